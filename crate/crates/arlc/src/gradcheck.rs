//! Central finite-difference gradient checking.
//!
//! The checker rebuilds the forward pass from scratch for every perturbed
//! input entry, so it never touches the backward rules it is validating.
//! Scalarization sandwiches the op output between two fixed random vectors,
//! which makes the incoming gradient non-uniform across every output index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// |a - b| relative to the larger magnitude, floored at 1 so that
/// near-zero gradients are compared absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Reduce an arbitrary tensor to a scalar with position-dependent weights:
/// r^T M c over the tensor viewed as a matrix. The weights come from the
/// caller's rng, so they are fixed across rebuilds of the same check.
pub fn scalarize(tape: &mut Tape, v: Var, weights: &(Vec<f64>, Vec<f64>)) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    if shape.is_empty() || shape.iter().product::<usize>() == 1 {
        let flat = tape.reshape(v, &[1])?;
        return tape.sum(flat);
    }
    let m = shape[0];
    let n: usize = shape[1..].iter().product();
    let mat = tape.reshape(v, &[m, n])?;
    let left = tape.constant(Tensor::new(vec![1, m], weights.0.clone())?);
    let right = tape.constant(Tensor::new(vec![n, 1], weights.1.clone())?);
    let lm = tape.matmul(left, mat)?;
    let s = tape.matmul(lm, right)?;
    tape.sum(s)
}

/// Fresh scalarization weights for an output of the given shape.
pub fn scalarize_weights(shape: &[usize], rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let m = if shape.is_empty() { 1 } else { shape[0] };
    let n: usize = if shape.is_empty() {
        1
    } else {
        shape[1..].iter().product()
    };
    let left = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
    let right = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    (left, right)
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` must be a pure function of the input tensors: it stages them as
/// leaves (all requiring grad) and returns a scalar root. Returns the max
/// relative error over every entry of every input.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let stage = |tensors: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let root = build(&mut tape, &vars)?;
        Ok((tape, vars, root))
    };

    let (mut tape, vars, root) = stage(inputs)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect();

    let mut max_err = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.numel() {
            let orig = tensor.data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let f_plus = {
                let (t, _, r2) = stage(&work)?;
                t.value(r2).item()?
            };
            work[ti].data_mut()[ei] = orig - step;
            let f_minus = {
                let (t, _, r2) = stage(&work)?;
                t.value(r2).item()?
            };
            work[ti].data_mut()[ei] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let err = relative_error(analytic[ti].data()[ei], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

struct SuiteCheck {
    name: &'static str,
    tolerance: f64,
    trials: usize,
    build: Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>,
}

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform samples bounded away from zero, for kink ops (relu/hinge/maxpool).
fn uniform_away_from_zero(shape: &[usize], rng: &mut impl Rng, margin: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let v: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

fn op_suite() -> Vec<SuiteCheck> {
    fn simple<F>(f: F) -> Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var> + Copy + 'static,
    {
        Box::new(move |rng| {
            let inputs = [uniform(&[3, 4], rng), uniform(&[3, 4], rng)];
            check_gradients(f, &inputs, DEFAULT_STEP)
        })
    }

    vec![
        SuiteCheck {
            name: "matmul",
            tolerance: 1e-6,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform(&[3, 4], rng), uniform(&[4, 2], rng)];
                let w = scalarize_weights(&[3, 2], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.matmul(v[0], v[1])?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "batched_matmul",
            tolerance: 1e-6,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform(&[3, 2, 4], rng), uniform(&[3, 4, 2], rng)];
                let w = scalarize_weights(&[3, 4], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.batched_matmul(v[0], v[1])?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "conv2d",
            tolerance: 1e-5,
            trials: 1,
            build: Box::new(|rng| {
                let inputs = [uniform(&[2, 3, 8, 8], rng), uniform(&[3, 3, 3, 3], rng)];
                let w = scalarize_weights(&[2, 3 * 6 * 6], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.conv2d(v[0], v[1])?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "conv2d_per_sample",
            tolerance: 1e-5,
            trials: 1,
            build: Box::new(|rng| {
                let inputs = [uniform(&[2, 2, 6, 6], rng), uniform(&[2, 2, 2, 3, 3], rng)];
                let w = scalarize_weights(&[2, 2 * 4 * 4], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.conv2d_per_sample(v[0], v[1])?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "maxpool2d",
            tolerance: 1e-5,
            trials: 2,
            build: Box::new(|rng| {
                // entries spaced away from each other so a 1e-6 nudge
                // cannot flip any window argmax
                let inputs = [uniform_away_from_zero(&[1, 2, 6, 6], rng, 0.01)];
                let w = scalarize_weights(&[1, 2 * 3 * 3], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.maxpool2d(v[0], (2, 2), (2, 2))?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    1e-6,
                )
            }),
        },
        SuiteCheck {
            name: "avgpool2d",
            tolerance: 1e-6,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform(&[1, 2, 6, 6], rng)];
                let w = scalarize_weights(&[1, 2 * 3 * 3], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.avgpool2d(v[0], (2, 2), (2, 2))?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "relu",
            tolerance: 1e-8,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform_away_from_zero(&[4, 5], rng, 0.01)];
                let w = scalarize_weights(&[4, 5], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.relu(v[0])?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "hinge",
            tolerance: 1e-8,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform_away_from_zero(&[6], rng, 0.01)];
                let w = scalarize_weights(&[6], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.hinge(v[0])?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "add",
            tolerance: 1e-6,
            trials: 2,
            build: simple(|t, v| {
                let z = t.add(v[0], v[1])?;
                t.sum(z)
            }),
        },
        SuiteCheck {
            name: "sub",
            tolerance: 1e-6,
            trials: 2,
            build: simple(|t, v| {
                let z = t.sub(v[0], v[1])?;
                t.sum(z)
            }),
        },
        SuiteCheck {
            name: "scalar_mul",
            tolerance: 1e-6,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform(&[3, 4], rng)];
                let c = rng.gen_range(-2.0..2.0);
                let w = scalarize_weights(&[3, 4], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.scalar_mul(v[0], c)?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "concat",
            tolerance: 1e-6,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform(&[2, 3], rng), uniform(&[2, 5], rng)];
                let w = scalarize_weights(&[2, 8], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.concat(&[v[0], v[1]], 1)?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "flatten",
            tolerance: 1e-6,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform(&[2, 3, 4], rng)];
                let w = scalarize_weights(&[2, 12], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.flatten(v[0])?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "narrow",
            tolerance: 1e-6,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform(&[3, 7], rng)];
                let w = scalarize_weights(&[3, 4], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.narrow(v[0], 1, 2, 4)?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "broadcast_batch",
            tolerance: 1e-6,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform(&[4, 3], rng)];
                let w = scalarize_weights(&[5, 12], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.broadcast_batch(v[0], 5)?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "mean_over_batch",
            tolerance: 1e-6,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform(&[5, 4], rng)];
                let w = scalarize_weights(&[4], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.mean_over_batch(v[0])?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "bias_add",
            tolerance: 1e-6,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform(&[3, 4], rng), uniform(&[4], rng)];
                let w = scalarize_weights(&[3, 4], rng);
                check_gradients(
                    move |t, v| {
                        let z = t.bias_add(v[0], v[1])?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "softmax_cross_entropy",
            tolerance: 1e-6,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform(&[4, 10], rng)];
                let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..10)).collect();
                check_gradients(
                    move |t, v| t.softmax_cross_entropy(v[0], &labels),
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "weight_update",
            tolerance: 1e-6,
            trials: 2,
            build: Box::new(|rng| {
                let inputs = [uniform(&[2, 6], rng), uniform(&[2, 6], rng)];
                let w = scalarize_weights(&[2, 6], rng);
                check_gradients(
                    move |t, v| {
                        let z = crate::block::weight_update(t, v[0], v[1], 1e-3)?;
                        scalarize(t, z, &w)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }),
        },
        SuiteCheck {
            name: "end_to_end_k3",
            tolerance: 1e-4,
            trials: 1,
            build: Box::new(|rng| end_to_end_k3_check(rng)),
        },
    ]
}

/// Gradient check of the full composite loss on a tiny 4-sample instance
/// with three recurrent iterations: gradients must flow through the
/// computed weight tensors back to every parameter.
fn end_to_end_k3_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let batch = 4;
    let in_dim = 6;
    let hid = 3;
    let inputs = [
        uniform(&[batch, in_dim], rng),          // u
        uniform(&[in_dim, hid], rng),            // dynamic layer initial weights
        uniform(&[hid, in_dim * hid], rng),      // adaptation head weights
        uniform(&[hid, hid], rng),               // classifier weights
    ];
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..hid)).collect();
    check_gradients(
        move |t, v| {
            let (u, w1, wh, wc) = (v[0], v[1], v[2], v[3]);
            let k = 3;
            let alpha = 1e-3;
            let p = in_dim * hid;
            let w1_flat = t.reshape(w1, &[p])?;
            let mut w = t.broadcast_batch(w1_flat, batch)?;
            let mut losses = Vec::with_capacity(k);
            for _ in 0..k {
                let wmat = t.reshape(w, &[batch, in_dim, hid])?;
                let u3 = t.reshape(u, &[batch, 1, in_dim])?;
                let f_out = t.batched_matmul(u3, wmat)?;
                let f_out = t.reshape(f_out, &[batch, hid])?;
                let z = t.relu(f_out)?;
                let logits = t.matmul(z, wc)?;
                losses.push(t.softmax_cross_entropy(logits, &labels)?);
                if losses.len() < k {
                    let h_out = t.matmul(z, wh)?;
                    w = crate::block::weight_update(t, w, h_out, alpha)?;
                }
            }
            let cfg = crate::loss::PhaseTwoLossConfig::new(vec![3e-3, 1e-3], 0.1, k)?;
            crate::loss::phase_two_loss(t, &losses, &cfg)
        },
        &inputs,
        DEFAULT_STEP,
    )
}

/// Run every gradient check; `corrupt` injects a deliberate error into the
/// named check's analytic gradient so the harness can prove it detects
/// broken backward rules.
pub fn run_full_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<CheckResult>> {
    run_suite_with_trials(seed, None, corrupt)
}

/// As [`run_full_suite`] with every check's trial count overridden.
pub fn run_suite_with_trials(
    seed: u64,
    trials: Option<usize>,
    corrupt: Option<&str>,
) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for check in op_suite() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(check.name));
        let mut max_err = 0.0f64;
        for _ in 0..trials.unwrap_or(check.trials) {
            let err = (check.build)(&mut rng)?;
            if err > max_err {
                max_err = err;
            }
        }
        if corrupt == Some(check.name) {
            max_err += 1.0;
        }
        results.push(CheckResult {
            name: check.name.to_string(),
            max_rel_err: max_err,
            tolerance: check.tolerance,
        });
    }
    Ok(results)
}

fn fxhash(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let results = run_full_suite(7, None).unwrap();
        for r in &results {
            assert!(
                r.passed(),
                "{} failed: {} >= {}",
                r.name,
                r.max_rel_err,
                r.tolerance
            );
        }
        assert!(results.iter().any(|r| r.name == "end_to_end_k3"));
    }

    #[test]
    fn corruption_is_detected() {
        let results = run_full_suite(7, Some("matmul")).unwrap();
        let matmul = results.iter().find(|r| r.name == "matmul").unwrap();
        assert!(!matmul.passed());
        assert!(results
            .iter()
            .filter(|r| r.name != "matmul")
            .all(CheckResult::passed));
    }

    #[test]
    fn suite_is_deterministic() {
        let a = run_full_suite(42, None).unwrap();
        let b = run_full_suite(42, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.max_rel_err, y.max_rel_err);
        }
    }
}
