//! SGD with momentum, warmup + step-decay schedule, and per-group weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Network, ParamKind};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Apply weight decay to GCT alpha and gamma. Beta is never decayed.
    pub decay_gct_alpha_gamma: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.05,
            warmup_lr: 0.005,
            warmup_epochs: 1,
            decay_epochs: vec![10, 15],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            decay_gct_alpha_gamma: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if self.warmup_epochs > 0 && !(self.warmup_lr > 0.0 && self.warmup_lr.is_finite()) {
            return bad(format!("warmup_lr must be > 0, got {}", self.warmup_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must be in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_epochs must be strictly increasing".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based): the warmup rate during warmup,
/// afterwards `base_lr * decay_factor^k` with `k` the number of decay
/// epochs already reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.warmup_lr;
    }
    let k = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.base_lr * cfg.decay_factor.powi(k as i32)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub decay_exempt: bool,
}

impl ParamGroup {
    /// Group for a named parameter under the decay policy in `cfg`.
    pub fn for_param(name: &str, kind: ParamKind, cfg: &TrainConfig) -> Self {
        let decay_exempt = match kind {
            ParamKind::GctBeta => true,
            ParamKind::GctAlpha | ParamKind::GctGamma => !cfg.decay_gct_alpha_gamma,
            _ => false,
        };
        Self {
            name: name.to_string(),
            decay_exempt,
        }
    }
}

/// One momentum-SGD update with coupled weight decay:
/// `v = momentum * v + g + wd * p`, `p = p - lr * v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    group: &ParamGroup,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::shape(
            "sgd_step",
            params.len(),
            format!("grads {} / velocity {}", grads.len(), velocity.len()),
        ));
    }
    let wd = if group.decay_exempt {
        T::zero()
    } else {
        T::from_f64_lossy(cfg.weight_decay)
    };
    let m = T::from_f64_lossy(cfg.momentum);
    let lr = T::from_f64_lossy(lr);
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every parameter of a network.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub cfg: TrainConfig,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: TrainConfig) -> Self {
        Self {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter using its current gradient.
    pub fn step(&mut self, net: &mut Network<T>, lr: f64) -> Result<()> {
        let mut result = Ok(());
        let cfg = &self.cfg;
        let velocity = &mut self.velocity;
        net.visit_params(&mut |p| {
            if result.is_err() {
                return;
            }
            let group = ParamGroup::for_param(&p.name, p.kind, cfg);
            let v = velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); p.value.len()]);
            result = sgd_step(p.value, p.grad, v, &group, lr, cfg);
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig {
            warmup_epochs: 1,
            warmup_lr: 0.01,
            base_lr: 0.1,
            decay_epochs: vec![30, 60],
            decay_factor: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert_eq!(lr_at(1, &cfg), 0.1);
        assert!((lr_at(30, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_at(60, &cfg) - 0.001).abs() < 1e-15);
        let flat = TrainConfig {
            decay_epochs: vec![],
            warmup_epochs: 0,
            ..cfg
        };
        assert!((0..100).all(|e| lr_at(e, &flat) == 0.1));
    }

    #[test]
    fn schedule_is_non_increasing_after_warmup() {
        let cfg = TrainConfig::default();
        for e in cfg.warmup_epochs..40 {
            assert!(lr_at(e + 1, &cfg) <= lr_at(e, &cfg));
        }
    }

    #[test]
    fn vanilla_sgd() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let g = ParamGroup::for_param("w", ParamKind::Weight, &cfg);
        let mut p = vec![1.0f64, 2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.5, -1.0], &mut v, &g, 0.1, &cfg).unwrap();
        assert_eq!(p, vec![0.95, 2.1]);
    }

    #[test]
    fn two_momentum_steps() {
        let cfg = TrainConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let g = ParamGroup::for_param("w", ParamKind::Weight, &cfg);
        let mut p = vec![0.0f64];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, &g, 1.0, &cfg).unwrap();
        sgd_step(&mut p, &[1.0], &mut v, &g, 1.0, &cfg).unwrap();
        assert!((p[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn exempt_group_ignores_weight_decay() {
        let run = |wd: f64| {
            let cfg = TrainConfig {
                weight_decay: wd,
                ..TrainConfig::default()
            };
            let g = ParamGroup::for_param("gct.beta", ParamKind::GctBeta, &cfg);
            assert!(g.decay_exempt);
            let mut p = vec![0.3f32, -0.7];
            let mut v = vec![0.0; 2];
            for _ in 0..5 {
                sgd_step(&mut p, &[0.1, 0.2], &mut v, &g, 0.05, &cfg).unwrap();
            }
            p
        };
        assert_eq!(run(0.0), run(0.1));
    }

    #[test]
    fn decay_policy_switch() {
        let mut cfg = TrainConfig::default();
        assert!(!ParamGroup::for_param("a", ParamKind::GctAlpha, &cfg).decay_exempt);
        assert!(!ParamGroup::for_param("w", ParamKind::BnScale, &cfg).decay_exempt);
        cfg.decay_gct_alpha_gamma = false;
        assert!(ParamGroup::for_param("g", ParamKind::GctGamma, &cfg).decay_exempt);
    }

    #[test]
    fn shape_mismatch() {
        let cfg = TrainConfig::default();
        let g = ParamGroup::for_param("w", ParamKind::Weight, &cfg);
        assert!(sgd_step(&mut [0.0f64; 2], &[0.0; 3], &mut [0.0; 2], &g, 0.1, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { base_lr: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { weight_decay: -1.0, ..TrainConfig::default() },
            TrainConfig { decay_epochs: vec![5, 5], ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
