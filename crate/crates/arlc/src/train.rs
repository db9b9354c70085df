//! Two-phase training orchestration: phase one trains the plain network
//! end to end; phase two freezes the dynamic subblock's initial weights,
//! adds the adaptation head, and minimizes the composite loss.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Stack;
use crate::loss::{per_iteration_losses, phase_one_loss, phase_two_loss_parts, PhaseTwoLossConfig};
use crate::mnist::Dataset;
use crate::models::RecurrentModel;
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::params::ParamStore;
use crate::tape::Tape;

pub const EVAL_BATCH: usize = 250;

/// Stream offset for the adaptation head's fresh initialization, so phase
/// two draws are independent of the phase-one stream for the same seed.
const HEAD_INIT_STREAM: u64 = 0x517c_c1b7_2722_0a95;

#[derive(Debug, Clone)]
pub struct Hyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning-rate multiplier applied from two-thirds of the epochs on.
    pub lr_decay_factor: f64,
    /// Extra learning-rate factor for the adaptation head, offsetting the
    /// alpha scaling of its gradients.
    pub head_lr_scale: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            epochs: 20,
            lr_decay_factor: 0.1,
            head_lr_scale: 1.0,
        }
    }
}

impl Hyper {
    fn sgd_config(&self, scaled_groups: bool) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            schedule: LrSchedule::StepDecay {
                at_epoch: self.epochs * 2 / 3,
                factor: self.lr_decay_factor,
            },
            group_scales: if scaled_groups {
                vec![("h.".to_string(), self.head_lr_scale)]
            } else {
                Vec::new()
            },
        }
    }
}

/// Per-epoch record: mean training losses per iteration, the mean raw
/// hinge penalty, test accuracy after each iteration, and wall time.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub phase: u8,
    pub epoch: usize,
    pub mean_losses: Vec<f64>,
    pub kaizen: f64,
    pub test_accuracy: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub phase: u8,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs
            .last()
            .and_then(|e| e.test_accuracy.last().copied())
    }
}

/// Train the plain feed-forward network under cross entropy.
pub fn train_phase_one(
    model: &Stack,
    store: &mut ParamStore,
    train: &Dataset,
    test: &Dataset,
    hp: &Hyper,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    let mut report = TrainReport {
        phase: 1,
        seed,
        epochs: Vec::with_capacity(hp.epochs),
    };
    let mut opt = Sgd::new(hp.sgd_config(false), store);
    for epoch in 0..hp.epochs {
        let start = Instant::now();
        opt.begin_epoch(epoch);
        let mut loss_sum = 0.0;
        for (images, labels) in train.batches(hp.batch_size, seed, epoch) {
            let bsz = labels.len() as f64;
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape);
            let x = tape.constant(images);
            let logits = model.forward(&mut tape, &staged, x)?;
            let loss = phase_one_loss(&mut tape, logits, &labels)?;
            loss_sum += tape.value(loss).item()? * bsz;
            tape.backward(loss)?;
            store.harvest(&tape, &staged)?;
            opt.step(store)?;
        }
        let stats = EpochStats {
            phase: 1,
            epoch,
            mean_losses: vec![loss_sum / train.len() as f64],
            kaizen: 0.0,
            test_accuracy: vec![evaluate_static(model, store, test)?],
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Build the phase-two store from a trained phase-one store: the dynamic
/// subblock's weights are copied and frozen, everything else is carried
/// over trainable, and the adaptation head is freshly initialized with its
/// last parameterized layer zeroed (so the first forward pass reproduces
/// the phase-one network exactly).
pub fn init_phase_two(
    phase_one: &ParamStore,
    model: &RecurrentModel,
    seed: u64,
) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let copy = |names: Vec<String>, frozen: bool, store: &mut ParamStore| -> Result<()> {
        for name in names {
            let p = phase_one.get(&name).ok_or_else(|| {
                Error::Validation(format!("phase-one store is missing {name:?}"))
            })?;
            store.insert(&name, p.value.clone())?;
            if frozen {
                store.freeze(&name)?;
            }
        }
        Ok(())
    };
    copy(model.trunk.param_names(), false, &mut store)?;
    copy(model.block.f.param_names(), true, &mut store)?;
    copy(model.block.g.param_names(), false, &mut store)?;
    copy(model.classifier.param_names(), false, &mut store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(HEAD_INIT_STREAM));
    model.block.h.register(&mut store, &mut rng)?;
    if let Some(last) = model
        .block
        .h
        .layers
        .iter()
        .rev()
        .find(|l| !l.spec.param_shapes().is_empty())
    {
        for (suffix, _) in last.spec.param_shapes() {
            store
                .get_mut(&format!("{}.{}", last.name, suffix))
                .expect("registered above")
                .value
                .fill(0.0);
        }
    }
    Ok(store)
}

/// Train the recurrent network under the composite per-iteration loss.
pub fn train_phase_two(
    model: &RecurrentModel,
    store: &mut ParamStore,
    train: &Dataset,
    test: &Dataset,
    loss_cfg: &PhaseTwoLossConfig,
    hp: &Hyper,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    if loss_cfg.iterations != model.block.iterations {
        return Err(Error::Validation(format!(
            "loss config has K = {} but the block iterates {} times",
            loss_cfg.iterations, model.block.iterations
        )));
    }
    let k = model.block.iterations;
    let mut report = TrainReport {
        phase: 2,
        seed,
        epochs: Vec::with_capacity(hp.epochs),
    };
    let mut opt = Sgd::new(hp.sgd_config(true), store);
    for epoch in 0..hp.epochs {
        let start = Instant::now();
        opt.begin_epoch(epoch);
        let mut loss_sums = vec![0.0; k];
        let mut kaizen_sum = 0.0;
        for (images, labels) in train.batches(hp.batch_size, seed, epoch) {
            let bsz = labels.len() as f64;
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape);
            let x = tape.constant(images);
            let trace = model.forward_trace(&mut tape, &staged, x)?;
            let losses =
                per_iteration_losses(&mut tape, &trace, &model.classifier, &staged, &labels)?;
            let (total, kaizen) = phase_two_loss_parts(&mut tape, &losses, loss_cfg)?;
            for (sum, &l) in loss_sums.iter_mut().zip(&losses) {
                *sum += tape.value(l).item()? * bsz;
            }
            kaizen_sum += tape.value(kaizen).item()? * bsz;
            tape.backward(total)?;
            store.harvest(&tape, &staged)?;
            opt.step(store)?;
        }
        let n = train.len() as f64;
        let stats = EpochStats {
            phase: 2,
            epoch,
            mean_losses: loss_sums.iter().map(|s| s / n).collect(),
            kaizen: kaizen_sum / n,
            test_accuracy: evaluate_recurrent(model, store, test)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

fn accuracy_percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy (percent) of a plain feed-forward model.
pub fn evaluate_static(model: &Stack, store: &ParamStore, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for (images, labels) in data.sequential_batches(EVAL_BATCH) {
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let x = tape.constant(images);
        let logits = model.forward(&mut tape, &staged, x)?;
        let v = tape.value(logits);
        let classes = v.shape()[1];
        for (j, &label) in labels.iter().enumerate() {
            if argmax(&v.data()[j * classes..(j + 1) * classes]) == label {
                correct += 1;
            }
        }
    }
    Ok(accuracy_percent(correct, data.len()))
}

/// Top-1 accuracy (percent) after each recurrent iteration.
pub fn evaluate_recurrent(
    model: &RecurrentModel,
    store: &ParamStore,
    data: &Dataset,
) -> Result<Vec<f64>> {
    let k = model.block.iterations;
    let mut correct = vec![0usize; k];
    for (images, labels) in data.sequential_batches(EVAL_BATCH) {
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let x = tape.constant(images);
        let per_iter = model.forward_logits(&mut tape, &staged, x)?;
        for (i, &logits) in per_iter.iter().enumerate() {
            let v = tape.value(logits);
            let classes = v.shape()[1];
            for (j, &label) in labels.iter().enumerate() {
                if argmax(&v.data()[j * classes..(j + 1) * classes]) == label {
                    correct[i] += 1;
                }
            }
        }
    }
    Ok(correct
        .into_iter()
        .map(|c| accuracy_percent(c, data.len()))
        .collect())
}
