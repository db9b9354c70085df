//! Classification losses: the single cross entropy of phase one, the
//! per-iteration losses of phase two, and their composite with the
//! improvement hinge.

use crate::block::BlockTrace;
use crate::error::{Error, Result};
use crate::layers::Stack;
use crate::params::StagedParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Coefficients of the phase-two composite loss: per-iteration weights
/// `gammas[0..K-1]` and the hinge weight `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTwoLossConfig {
    pub gammas: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
}

impl PhaseTwoLossConfig {
    pub fn new(gammas: Vec<f64>, lambda: f64, iterations: usize) -> Result<Self> {
        if gammas.len() + 1 != iterations {
            return Err(Error::Validation(format!(
                "{} gamma coefficients for {} iterations (need K-1)",
                gammas.len(),
                iterations
            )));
        }
        if let Some(&g) = gammas.iter().find(|&&g| !(0.0..=1.0).contains(&g)) {
            return Err(Error::Validation(format!(
                "gamma {g} outside [0, 1]"
            )));
        }
        if !(lambda >= 0.0) {
            return Err(Error::Validation(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(PhaseTwoLossConfig {
            gammas,
            lambda,
            iterations,
        })
    }

    /// Default coefficients: the first iteration weighted 3e-3, later ones
    /// 1e-3, hinge weight 0.1.
    pub fn defaults(iterations: usize, lambda: f64) -> Result<Self> {
        let gammas = (0..iterations.saturating_sub(1))
            .map(|i| if i == 0 { 3e-3 } else { 1e-3 })
            .collect();
        PhaseTwoLossConfig::new(gammas, lambda, iterations)
    }
}

/// Batch-mean cross entropy of the logits.
pub fn phase_one_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Cross entropy of the classifier applied to every iteration's output,
/// all on the same tape.
pub fn per_iteration_losses(
    tape: &mut Tape,
    trace: &BlockTrace,
    classifier: &Stack,
    staged: &StagedParams,
    labels: &[usize],
) -> Result<Vec<Var>> {
    trace
        .outputs
        .iter()
        .map(|&z| {
            let logits = classifier.forward(tape, staged, z)?;
            tape.softmax_cross_entropy(logits, labels)
        })
        .collect()
}

/// The composite phase-two objective:
/// L_K + sum_i gamma_i * L_i + lambda * sum_i max(0, L_{i+1} - L_i).
///
/// Nothing is detached: the hinge pushes gradients into both adjacent
/// losses whenever it is active.
pub fn phase_two_loss(tape: &mut Tape, losses: &[Var], cfg: &PhaseTwoLossConfig) -> Result<Var> {
    Ok(phase_two_loss_parts(tape, losses, cfg)?.0)
}

/// As [`phase_two_loss`], also returning the raw (unweighted) hinge sum so
/// callers can report it.
pub fn phase_two_loss_parts(
    tape: &mut Tape,
    losses: &[Var],
    cfg: &PhaseTwoLossConfig,
) -> Result<(Var, Var)> {
    if losses.len() != cfg.iterations {
        return Err(Error::Validation(format!(
            "{} losses for K = {}",
            losses.len(),
            cfg.iterations
        )));
    }
    let k = cfg.iterations;
    let mut total = losses[k - 1];
    for (i, &gamma) in cfg.gammas.iter().enumerate() {
        let weighted = tape.scalar_mul(losses[i], gamma)?;
        total = tape.add(total, weighted)?;
    }
    let mut kaizen: Option<Var> = None;
    for i in 0..k - 1 {
        let diff = tape.sub(losses[i + 1], losses[i])?;
        let pen = tape.hinge(diff)?;
        kaizen = Some(match kaizen {
            Some(acc) => tape.add(acc, pen)?,
            None => pen,
        });
    }
    let kaizen = match kaizen {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let weighted_kaizen = tape.scalar_mul(kaizen, cfg.lambda)?;
    total = tape.add(total, weighted_kaizen)?;
    Ok((total, kaizen))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_phase_two(l: &[f64], gammas: Vec<f64>, lambda: f64) -> (f64, f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = l
            .iter()
            .map(|&v| tape.leaf(Tensor::scalar(v), true))
            .collect();
        let cfg = PhaseTwoLossConfig::new(gammas, lambda, l.len()).unwrap();
        let (total, kaizen) = phase_two_loss_parts(&mut tape, &vars, &cfg).unwrap();
        (
            tape.value(total).item().unwrap(),
            tape.value(kaizen).item().unwrap(),
        )
    }

    #[test]
    fn composite_monotone_case() {
        let (total, kaizen) = eval_phase_two(&[0.6, 0.5], vec![3e-3], 0.1);
        assert!((total - 0.5018).abs() < 1e-12);
        assert_eq!(kaizen, 0.0);
    }

    #[test]
    fn composite_hinge_active() {
        let (total, _) = eval_phase_two(&[0.5, 0.6], vec![3e-3], 0.1);
        assert!((total - 0.6115).abs() < 1e-12);
    }

    #[test]
    fn composite_hinge_ablated() {
        let (total, kaizen) = eval_phase_two(&[0.5, 0.6], vec![3e-3], 0.0);
        assert!((total - 0.6015).abs() < 1e-12);
        assert!((kaizen - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_coefficients_reduce_to_final_loss_bitwise() {
        let losses = [0.73125, 0.5112, 0.40625];
        let (total, _) = eval_phase_two(&losses, vec![0.0, 0.0], 0.0);
        assert_eq!(total, losses[2]);
    }

    #[test]
    fn config_validation() {
        assert!(PhaseTwoLossConfig::new(vec![0.1], 0.1, 3).is_err());
        assert!(PhaseTwoLossConfig::new(vec![0.1, 1.5], 0.1, 3).is_err());
        assert!(PhaseTwoLossConfig::new(vec![0.1, 0.1], -0.1, 3).is_err());
        let cfg = PhaseTwoLossConfig::defaults(4, 0.1).unwrap();
        assert_eq!(cfg.gammas, vec![3e-3, 1e-3, 1e-3]);
    }

    #[test]
    fn loss_count_must_match_iterations() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::scalar(0.5), true);
        let cfg = PhaseTwoLossConfig::new(vec![0.1], 0.1, 2).unwrap();
        assert!(phase_two_loss(&mut tape, &[l], &cfg).is_err());
    }
}
