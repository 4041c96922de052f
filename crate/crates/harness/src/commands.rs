//! Subcommands other than training.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gct_core::analysis::{analysis_csv, count_cost_spec, histogram_csv, variance_ratio, AnalysisRecord, CostReport};
use gct_core::checkpoint;
use gct_core::data::Standardization;
use gct_core::gct::{Adaptation, ChannelNorm, EmbedNorm, GctVariant};
use gct_core::gradcheck::{run_suite_corrupted, CaseReport, TOLERANCE};
use gct_core::layers::{build_network, Mode, Network, NetworkSpec, Placement};
use gct_core::{Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, HarnessResult};
use crate::train::{evaluate, load_splits, run_train, TrainOutcome};

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn gct_variant_count(&self) -> usize {
        self.cases.iter().filter(|c| c.case.starts_with("gct/")).count()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{:<44} {:>11.3e}  {}",
                c.case,
                c.max_rel_error,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

/// 64-bit finite-difference suite; `corrupt` perturbs analytic gradients.
pub fn cmd_gradcheck(instances: usize, seed: u64, corrupt: f64) -> HarnessResult<GradcheckReport> {
    if instances == 0 {
        return Err(HarnessError::Config("instances must be >= 1".into()));
    }
    Ok(GradcheckReport {
        instances,
        seed,
        tolerance: TOLERANCE,
        cases: run_suite_corrupted(instances, seed, corrupt)?,
    })
}

// ------------------------------------------------------------------- ablate

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Embedding,
    Normalization,
    Adaptation,
    Position,
}

impl std::str::FromStr for AblationAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "embedding" => Self::Embedding,
            "normalization" => Self::Normalization,
            "adaptation" => Self::Adaptation,
            "position" => Self::Position,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown ablation axis `{other}` (embedding, normalization, adaptation, position)"
                )))
            }
        })
    }
}

/// One ablation row: a label and the config change it applies.
#[derive(Debug, Clone)]
pub struct AblationVariant {
    pub label: &'static str,
    pub variant: GctVariant,
    pub placement: Placement,
}

/// Row set of an axis, everything else held at the base config.
pub fn ablation_variants(axis: AblationAxis, base: GctVariant, placement: Placement) -> Vec<AblationVariant> {
    let row = |label, variant, placement| AblationVariant {
        label,
        variant,
        placement,
    };
    match axis {
        AblationAxis::Embedding => [EmbedNorm::Linf, EmbedNorm::L1, EmbedNorm::L2]
            .map(|e| row(e.name(), GctVariant { embed_norm: e, ..base }, placement))
            .to_vec(),
        AblationAxis::Normalization => [ChannelNorm::MeanVariance, ChannelNorm::L1, ChannelNorm::L2]
            .map(|c| row(c.name(), GctVariant { channel_norm: c, ..base }, placement))
            .to_vec(),
        AblationAxis::Adaptation => [Adaptation::Sigmoid, Adaptation::OnePlusElu, Adaptation::OnePlusTanh]
            .map(|a| row(a.name(), GctVariant { adaptation: a, ..base }, placement))
            .to_vec(),
        AblationAxis::Position => [Placement::AfterBn, Placement::BeforeBn, Placement::BeforeConv]
            .map(|p| row(p.name(), base, p))
            .to_vec(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub rank: usize,
    pub axis: AblationAxis,
    pub variant: String,
    pub placement: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub final_val_acc: Option<f64>,
    pub run_dir: PathBuf,
}

pub const ABLATION_HEADER: &str = "rank,axis,variant,placement,seed,epochs,final_train_loss,final_val_loss,final_val_acc";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let axis = serde_json::to_value(r.axis).expect("axis serializes");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.rank,
            axis.as_str().unwrap_or_default(),
            r.variant,
            r.placement,
            r.seed,
            r.epochs,
            opt(r.final_train_loss),
            opt(r.final_val_loss),
            opt(r.final_val_acc)
        );
    }
    s
}

/// Trains one run per row on the axis with identical seed and schedule, then
/// ranks by final validation accuracy (ties keep row order).
pub fn cmd_ablate(cfg: &RunConfig, axis: AblationAxis) -> HarnessResult<Vec<AblationRow>> {
    cfg.validate()?;
    let spec = cfg.network_spec()?;
    let placement = if spec.placement == Placement::None {
        Placement::BeforeConv
    } else {
        spec.placement
    };
    let root = cfg.output_dir.join(format!("ablate_{}", axis_name(axis)));
    let mut rows = Vec::new();
    for v in ablation_variants(axis, spec.gct, placement) {
        let run_dir = root.join(v.label);
        let run_cfg = RunConfig {
            gct: Some(v.variant),
            placement: Some(v.placement),
            output_dir: run_dir.clone(),
            ..cfg.clone()
        };
        let out: TrainOutcome = run_train(&run_cfg)?;
        let last = out.metrics.last();
        rows.push(AblationRow {
            rank: 0,
            axis,
            variant: v.label.to_string(),
            placement: v.placement.name().to_string(),
            seed: cfg.train.seed,
            epochs: cfg.train.epochs,
            final_train_loss: last.map(|m| m.train_loss),
            final_val_loss: last.map(|m| m.val_loss),
            final_val_acc: last.map(|m| m.val_acc),
            run_dir,
        });
    }
    rows.sort_by(|a, b| {
        b.final_val_acc
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.final_val_acc.unwrap_or(f64::NEG_INFINITY))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    fs::create_dir_all(&root)?;
    fs::write(root.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

fn axis_name(axis: AblationAxis) -> &'static str {
    match axis {
        AblationAxis::Embedding => "embedding",
        AblationAxis::Normalization => "normalization",
        AblationAxis::Adaptation => "adaptation",
        AblationAxis::Position => "position",
    }
}

// ------------------------------------------------------------------ analyze

pub const ANALYSIS_FILE: &str = "analysis.csv";
pub const HISTOGRAM_FILE: &str = "gamma_histogram.csv";

#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub records: Vec<AnalysisRecord>,
    pub analysis_path: PathBuf,
    pub histogram_path: PathBuf,
}

/// Where the variance-ratio probe batch comes from.
#[derive(Debug, Clone)]
pub enum ProbeInput {
    /// Standard normal noise of the network's input shape.
    Random { batch: usize, seed: u64 },
    /// The first `batch` validation images of a run config.
    Validation { config: Box<RunConfig>, batch: usize },
}

fn probe_batch(net: &Network<f32>, probe: &ProbeInput, stats: Option<Standardization>) -> HarnessResult<Tensor4<f32>> {
    match probe {
        ProbeInput::Random { batch, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let shape = net.input_shape((*batch).max(1));
            Ok(Tensor4::from_fn(shape, |_, _, _, _| {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                v as f32
            }))
        }
        ProbeInput::Validation { config, batch } => {
            let cfg = RunConfig {
                standardization: config.standardization.clone().or(stats),
                ..(**config).clone()
            };
            cfg.validate()?;
            let val = load_splits(&cfg)?.val.truncated((*batch).max(1));
            Ok(val.images)
        }
    }
}

pub fn cmd_analyze(checkpoint_path: &Path, probe: &ProbeInput, out_dir: &Path) -> HarnessResult<AnalysisOutput> {
    let (mut net, meta) = checkpoint::load::<f32>(checkpoint_path).map_err(HarnessError::data)?;
    if net.gct_layers().is_empty() {
        return Err(HarnessError::Data(format!(
            "checkpoint {} has no GCT layers to analyze",
            checkpoint_path.display()
        )));
    }
    let stats = serde_json::from_value::<Standardization>(meta["standardization"].clone()).ok();
    let batch = probe_batch(&net, probe, stats)?;
    let records = variance_ratio(&mut net, &batch)?;
    fs::create_dir_all(out_dir)?;
    let analysis_path = out_dir.join(ANALYSIS_FILE);
    let histogram_path = out_dir.join(HISTOGRAM_FILE);
    fs::write(&analysis_path, analysis_csv(&records))?;
    fs::write(&histogram_path, histogram_csv(&records))?;
    Ok(AnalysisOutput {
        records,
        analysis_path,
        histogram_path,
    })
}

// ---------------------------------------------------------------- count-cost

/// Loads a spec file, or a built-in network when `spec` names one.
pub fn load_spec(spec: &str) -> HarnessResult<NetworkSpec> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path)?;
        return NetworkSpec::from_json(&text).map_err(HarnessError::config);
    }
    NetworkSpec::builtin(spec)
        .ok_or_else(|| HarnessError::Config(format!("`{spec}` is neither a spec file nor a built-in network")))
}

pub fn parse_input_shape(s: &str) -> HarnessResult<Shape4> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| HarnessError::Config(format!("bad input shape `{s}`: {e}")))?;
    let [n, c, h, w] = dims[..] else {
        return Err(HarnessError::Config(format!("input shape `{s}` must be N,C,H,W")));
    };
    let shape = Shape4::new(n, c, h, w);
    shape.validate().map_err(HarnessError::config)?;
    Ok(shape)
}

pub fn cmd_count_cost(
    spec: &NetworkSpec,
    input: Option<Shape4>,
    placement: Option<Placement>,
) -> HarnessResult<CostReport> {
    let mut spec = spec.clone();
    if let Some(p) = placement {
        spec.placement = p;
    }
    if let Some(s) = input {
        if s.c != spec.input_channels {
            return Err(HarnessError::Config(format!(
                "input has {} channels, spec expects {}",
                s.c, spec.input_channels
            )));
        }
    }
    count_cost_spec(&spec, input).map_err(HarnessError::config)
}

// --------------------------------------------------------- evaluate / time

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub val_loss: f64,
    pub val_acc: f64,
    pub samples: usize,
}

pub fn cmd_evaluate(checkpoint_path: &Path, cfg: &RunConfig) -> HarnessResult<Evaluation> {
    let (mut net, meta) = checkpoint::load::<f32>(checkpoint_path).map_err(HarnessError::data)?;
    let cfg = RunConfig {
        standardization: cfg
            .standardization
            .clone()
            .or_else(|| serde_json::from_value(meta["standardization"].clone()).ok()),
        ..cfg.clone()
    };
    cfg.validate()?;
    let splits = load_splits(&cfg)?;
    let (val_loss, val_acc) = evaluate(&mut net, &splits.val, cfg.train.batch_size)?;
    Ok(Evaluation {
        val_loss,
        val_acc,
        samples: splits.val.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub network: String,
    pub placement: String,
    pub batch: usize,
    pub iterations: usize,
    pub forward_ms_per_batch: f64,
    pub images_per_second: f64,
}

/// Eval-mode forward throughput on random input.
pub fn cmd_time(spec: &NetworkSpec, batch: usize, iterations: usize) -> HarnessResult<Timing> {
    let mut net = build_network::<f32>(spec, 0).map_err(HarnessError::config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor4::from_fn(net.input_shape(batch.max(1)), |_, _, _, _| rng.random_range(-1.0..1.0f32));
    net.forward(&x, Mode::Eval)?;
    let start = Instant::now();
    for _ in 0..iterations.max(1) {
        net.forward(&x, Mode::Eval)?;
    }
    let secs = start.elapsed().as_secs_f64() / iterations.max(1) as f64;
    Ok(Timing {
        network: spec.name.clone(),
        placement: spec.placement.name().to_string(),
        batch: batch.max(1),
        iterations: iterations.max(1),
        forward_ms_per_batch: secs * 1e3,
        images_per_second: batch.max(1) as f64 / secs,
    })
}
