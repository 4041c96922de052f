//! Run configuration: one JSON file, with CLI overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use gct_core::data::{Augment, Standardization};
use gct_core::gct::GctVariant;
use gct_core::layers::{NetworkSpec, Placement};
use gct_core::optim::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, HarnessResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10,
    Mnist,
    #[default]
    Synthetic,
}

/// Shape and size of the generated dataset used when `kind` is `synthetic`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub channels: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_size: 256,
            val_size: 128,
            channels: 3,
            size: 16,
            classes: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// CIFAR-10: training batch files. MNIST: `[images, labels]`.
    pub train_paths: Vec<PathBuf>,
    /// CIFAR-10: test batch files. MNIST: `[images, labels]`.
    pub val_paths: Vec<PathBuf>,
    pub augment: Augment,
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in network name (`smallcnn`, `miniresnet`, `resnet50`).
    pub network: String,
    /// Network spec JSON file; takes precedence over `network`.
    pub network_spec: Option<PathBuf>,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    /// Overrides the spec's placement when set.
    pub placement: Option<Placement>,
    /// Overrides the spec's GCT variant when set.
    pub gct: Option<GctVariant>,
    /// Adds SE blocks with this reduction when set.
    pub se_reduction: Option<usize>,
    pub output_dir: PathBuf,
    /// Fill the wall_seconds column of metrics.csv.
    pub record_wall_time: bool,
    /// Per-channel statistics; computed from the training split when absent.
    pub standardization: Option<Standardization>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: "smallcnn".into(),
            network_spec: None,
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            placement: None,
            gct: None,
            se_reduction: None,
            output_dir: PathBuf::from("runs/default"),
            record_wall_time: false,
            standardization: None,
        }
    }
}

/// CLI flags that override config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub placement: Option<Placement>,
    pub epochs: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> HarnessResult<Self> {
        serde_json::from_str(s).map_err(HarnessError::config)
    }

    /// Reads a config file. Relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> HarnessResult<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.network_spec.as_mut() {
            fix(p);
        }
        self.dataset.train_paths.iter_mut().for_each(fix);
        self.dataset.val_paths.iter_mut().for_each(fix);
        fix(&mut self.output_dir);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(p) = o.placement {
            self.placement = Some(p);
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
    }

    /// Resolves the network spec with placement, variant and SE overrides applied.
    pub fn network_spec(&self) -> HarnessResult<NetworkSpec> {
        let mut spec = match &self.network_spec {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| HarnessError::Config(format!("cannot read spec {}: {e}", path.display())))?;
                NetworkSpec::from_json(&text).map_err(HarnessError::config)?
            }
            None => NetworkSpec::builtin(&self.network)
                .ok_or_else(|| HarnessError::Config(format!("unknown network `{}`", self.network)))?,
        };
        if let Some(p) = self.placement {
            spec.placement = p;
        }
        if let Some(v) = self.gct {
            spec.gct = v;
        }
        if self.se_reduction.is_some() {
            spec.se_reduction = self.se_reduction;
        }
        Ok(spec)
    }

    /// Checks everything that can be checked without reading datasets.
    pub fn validate(&self) -> HarnessResult<()> {
        self.train.validate().map_err(HarnessError::config)?;
        if let Some(v) = &self.gct {
            v.validate().map_err(HarnessError::config)?;
        }
        if self.se_reduction == Some(0) {
            return Err(HarnessError::Config("se_reduction must be >= 1".into()));
        }
        self.network_spec()?;
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synthetic => {
                let s = &d.synthetic;
                if s.train_size == 0 || s.val_size == 0 || s.channels == 0 || s.size == 0 || s.classes < 2 {
                    return Err(HarnessError::Config(
                        "synthetic dataset needs non-zero sizes and at least 2 classes".into(),
                    ));
                }
            }
            DatasetKind::Mnist => {
                if d.train_paths.len() != 2 || d.val_paths.len() != 2 {
                    return Err(HarnessError::Config(
                        "mnist needs train_paths and val_paths as [images, labels]".into(),
                    ));
                }
            }
            DatasetKind::Cifar10 => {
                if d.train_paths.is_empty() || d.val_paths.is_empty() {
                    return Err(HarnessError::Config("cifar10 needs train_paths and val_paths".into()));
                }
            }
        }
        if let Some(p) = d.train_paths.iter().chain(&d.val_paths).find(|p| !p.is_file()) {
            return Err(HarnessError::Data(format!("dataset file {} does not exist", p.display())));
        }
        if d.train_limit == Some(0) || d.val_limit == Some(0) {
            return Err(HarnessError::Config("dataset limits must be >= 1".into()));
        }
        Ok(())
    }
}
