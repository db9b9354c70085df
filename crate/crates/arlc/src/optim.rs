use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Learning-rate schedule applied at epoch boundaries.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the base rate by `factor` from `at_epoch` (0-based) onward.
    StepDecay { at_epoch: usize, factor: f64 },
}

#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    /// Per-parameter learning-rate multipliers as (name-prefix, factor)
    /// pairs; the first matching prefix wins, everything else gets 1.
    pub group_scales: Vec<(String, f64)>,
}

/// Momentum SGD over a parameter store. Frozen parameters own no velocity
/// state and are never touched.
#[derive(Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Option<Tensor>>,
    scales: Vec<f64>,
    lr: f64,
    steps: u64,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, store: &ParamStore) -> Self {
        let velocity: Vec<Option<Tensor>> = store
            .iter()
            .map(|(_, p)| {
                if p.frozen {
                    None
                } else {
                    Some(Tensor::zeros(p.value.shape()))
                }
            })
            .collect();
        let scales = store
            .iter()
            .map(|(name, _)| {
                cfg.group_scales
                    .iter()
                    .find(|(prefix, _)| name.starts_with(prefix.as_str()))
                    .map(|&(_, s)| s)
                    .unwrap_or(1.0)
            })
            .collect();
        let lr = cfg.learning_rate;
        Sgd {
            cfg,
            velocity,
            scales,
            lr,
            steps: 0,
        }
    }

    pub fn begin_epoch(&mut self, epoch: usize) {
        self.lr = match self.cfg.schedule {
            LrSchedule::Constant => self.cfg.learning_rate,
            LrSchedule::StepDecay { at_epoch, factor } => {
                if epoch >= at_epoch {
                    self.cfg.learning_rate * factor
                } else {
                    self.cfg.learning_rate
                }
            }
        };
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// v <- momentum * v + grad;  p <- p - lr * v;  grad <- 0.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let Some(vel) = self.velocity[i].as_mut() else {
                continue;
            };
            let p = store.get_mut(name).expect("store layout is fixed");
            for (v, g) in vel.data_mut().iter_mut().zip(p.grad.data()) {
                *v = self.cfg.momentum * *v + g;
            }
            p.value.axpy(-self.lr * self.scales[i], vel)?;
            p.grad.fill(0.0);
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64, frozen: bool) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(value)).unwrap();
        if frozen {
            store.freeze("w").unwrap();
        }
        store.get_mut("w").unwrap().grad = Tensor::scalar(grad);
        store
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = store_with(1.0, 0.0, false);
        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: 0.1,
                momentum: 0.9,
                schedule: LrSchedule::Constant,
                group_scales: vec![],
            },
            &store,
        );
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().value.item().unwrap(), 1.0);
    }

    #[test]
    fn plain_update_rule() {
        let mut store = store_with(1.0, 1.0, false);
        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: 0.1,
                momentum: 0.0,
                schedule: LrSchedule::Constant,
                group_scales: vec![],
            },
            &store,
        );
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().value.item().unwrap(), 0.9);
        assert_eq!(store.get("w").unwrap().grad.item().unwrap(), 0.0);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = store_with(1.0, 5.0, true);
        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: 0.1,
                momentum: 0.9,
                schedule: LrSchedule::Constant,
                group_scales: vec![],
            },
            &store,
        );
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().value.item().unwrap(), 1.0);
    }

    #[test]
    fn step_decay_kicks_in() {
        let store = ParamStore::new();
        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: 0.3,
                momentum: 0.9,
                group_scales: vec![],
                schedule: LrSchedule::StepDecay {
                    at_epoch: 2,
                    factor: 0.1,
                },
            },
            &store,
        );
        opt.begin_epoch(0);
        assert_eq!(opt.learning_rate(), 0.3);
        opt.begin_epoch(2);
        assert!((opt.learning_rate() - 0.03).abs() < 1e-15);
    }
}
