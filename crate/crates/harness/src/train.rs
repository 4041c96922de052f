//! Training loop with per-epoch CSV metrics and a final checkpoint.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use gct_core::checkpoint;
use gct_core::data::{self, batches, sequential_batches, Augment, Dataset, Standardization};
use gct_core::layers::{build_network, softmax_xent, Mode, Network};
use gct_core::optim::{lr_at, Sgd};
use serde::Serialize;

use crate::config::{DatasetKind, RunConfig};
use crate::error::{HarnessError, HarnessResult};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc,wall_seconds";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RESOLVED_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: Option<f64>,
}

impl EpochMetrics {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_acc,
            self.val_loss,
            self.val_acc,
            self.wall_seconds.map(|s| format!("{s:.3}")).unwrap_or_default()
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn final_val_acc(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.val_acc)
    }
}

/// Train and validation splits, standardized with training statistics.
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub standardization: Standardization,
}

pub fn load_splits(cfg: &RunConfig) -> HarnessResult<Splits> {
    let d = &cfg.dataset;
    let (mut train, mut val) = match d.kind {
        DatasetKind::Synthetic => {
            let s = &d.synthetic;
            let shape = [s.channels, s.size, s.size];
            (
                data::synthetic(s.train_size, shape, s.classes, s.seed).map_err(HarnessError::data)?,
                data::synthetic(s.val_size, shape, s.classes, s.seed.wrapping_add(1)).map_err(HarnessError::data)?,
            )
        }
        DatasetKind::Mnist => (
            data::load_mnist(&d.train_paths[0], &d.train_paths[1]).map_err(HarnessError::data)?,
            data::load_mnist(&d.val_paths[0], &d.val_paths[1]).map_err(HarnessError::data)?,
        ),
        DatasetKind::Cifar10 => (
            data::load_cifar10(&d.train_paths).map_err(HarnessError::data)?,
            data::load_cifar10(&d.val_paths).map_err(HarnessError::data)?,
        ),
    };
    if let Some(n) = d.train_limit {
        train = train.truncated(n);
    }
    if let Some(n) = d.val_limit {
        val = val.truncated(n);
    }
    let (ts, vs) = (train.images.shape(), val.images.shape());
    if (ts.c, ts.h, ts.w) != (vs.c, vs.h, vs.w) {
        return Err(HarnessError::Data(format!("train images {ts} and validation images {vs} differ")));
    }
    let standardization = match &cfg.standardization {
        Some(s) => s.clone(),
        None => train.channel_stats(),
    };
    train.standardize(&standardization).map_err(HarnessError::data)?;
    val.standardize(&standardization).map_err(HarnessError::data)?;
    Ok(Splits {
        train,
        val,
        standardization,
    })
}

/// Builds the configured network sized for `data`'s images.
pub fn build_for(cfg: &RunConfig, data: &Dataset) -> HarnessResult<Network<f32>> {
    let mut spec = cfg.network_spec()?;
    let s = data.images.shape();
    spec.input_channels = s.c;
    spec.input_size = [s.h, s.w];
    let net = build_network::<f32>(&spec, cfg.train.seed).map_err(HarnessError::config)?;
    let out = gct_core::layers::network::seq_output_shape(net.nodes(), net.input_shape(1)).map_err(HarnessError::config)?;
    if out.sample() != data.class_count {
        return Err(HarnessError::Config(format!(
            "network emits {} logits but the dataset has {} classes",
            out.sample(),
            data.class_count
        )));
    }
    Ok(net)
}

/// Eval-mode mean loss and accuracy over `ds`.
pub fn evaluate(net: &mut Network<f32>, ds: &Dataset, batch_size: usize) -> HarnessResult<(f64, f64)> {
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for b in sequential_batches(ds, batch_size) {
        let logits = net.forward(&b.images, Mode::Eval)?;
        let out = softmax_xent(&logits, &b.labels)?;
        loss += out.loss as f64 * b.labels.len() as f64;
        correct += out.correct;
    }
    if !loss.is_finite() {
        return Err(HarnessError::Numeric("validation loss is not finite".into()));
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Runs `cmd_train`. All config problems surface before the first step.
pub fn run_train(cfg: &RunConfig) -> HarnessResult<TrainOutcome> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let mut net = build_for(cfg, &splits.train)?;
    train_network(cfg, &mut net, &splits)
}

pub fn train_network(cfg: &RunConfig, net: &mut Network<f32>, splits: &Splits) -> HarnessResult<TrainOutcome> {
    let out_dir = &cfg.output_dir;
    fs::create_dir_all(out_dir)?;
    let resolved = RunConfig {
        standardization: Some(splits.standardization.clone()),
        ..cfg.clone()
    };
    fs::write(out_dir.join(RESOLVED_CONFIG_FILE), resolved.to_json())?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut csv = BufWriter::new(File::create(&metrics_path)?);
    writeln!(csv, "{METRICS_HEADER}")?;
    csv.flush()?;

    let tc = &cfg.train;
    let augment: Augment = cfg.dataset.augment;
    let mut opt = Sgd::new(tc.clone());
    let mut metrics = Vec::new();
    let mut steps = 0usize;
    let start = Instant::now();
    for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, tc);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for b in batches(&splits.train, tc.batch_size, tc.seed, epoch, augment) {
            let logits = net.forward(&b.images, Mode::Train)?;
            let out = softmax_xent(&logits, &b.labels)?;
            if !out.loss.is_finite() {
                return Err(HarnessError::Numeric(format!(
                    "training loss became {} at epoch {epoch}, step {steps}",
                    out.loss
                )));
            }
            net.backward(&out.grad)?;
            opt.step(net, lr)?;
            loss_sum += out.loss as f64 * b.labels.len() as f64;
            correct += out.correct;
            steps += 1;
        }
        let n = splits.train.len() as f64;
        let (val_loss, val_acc) = evaluate(net, &splits.val, tc.batch_size)?;
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
            wall_seconds: cfg.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        writeln!(csv, "{}", row.csv_row())?;
        csv.flush()?;
        metrics.push(row);
    }

    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let meta = serde_json::json!({
        "epochs_completed": tc.epochs,
        "steps": steps,
        "standardization": splits.standardization,
    });
    checkpoint::save(net, &checkpoint, meta)?;
    Ok(TrainOutcome {
        metrics,
        checkpoint,
        metrics_path,
        steps,
    })
}
