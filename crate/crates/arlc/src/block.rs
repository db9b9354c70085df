//! The adaptive recurrent block: a primary subblock `f` whose weights are
//! rewritten between iterations by an adaptation head `h`, with an optional
//! static subblock `g` in between.
//!
//! The same input `u` is fed at every iteration. Weights are per-sample: a
//! batch of B samples carries B independent weight trajectories, all starting
//! from the stored initial weights, which are re-broadcast on every call so
//! no state leaks across calls.

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, Stack};
use crate::params::StagedParams;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct AdaptiveRecurrentBlock {
    /// Dynamic-weight subblock; its registered parameters are the initial
    /// weights of every per-sample trajectory.
    pub f: Stack,
    /// Static subblock applied after `f`; may be empty (identity).
    pub g: Stack,
    /// Adaptation head; consumes the post-`g` activations and emits one flat
    /// weight increment per sample.
    pub h: Stack,
    /// Iteration count K.
    pub iterations: usize,
    /// Step size applied to the head output.
    pub alpha: f64,
}

impl AdaptiveRecurrentBlock {
    pub fn new(f: Stack, g: Stack, h: Stack, iterations: usize, alpha: f64) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Validation("iteration count must be >= 1".into()));
        }
        if !(alpha >= 0.0) {
            return Err(Error::Validation(format!("alpha must be >= 0, got {alpha}")));
        }
        let dynamic = f.param_count();
        if dynamic == 0 {
            return Err(Error::Validation(
                "dynamic subblock has no parameters".into(),
            ));
        }
        for layer in &f.layers {
            if let LayerSpec::Conv2d { bias: true, .. } = layer.spec {
                return Err(Error::Validation(format!(
                    "dynamic conv layer {:?} may not use a bias",
                    layer.name
                )));
            }
        }
        let head_out = h
            .layers
            .iter()
            .rev()
            .find_map(|l| match l.spec {
                LayerSpec::Linear { out_features, .. } => Some(out_features),
                _ => None,
            })
            .ok_or_else(|| {
                Error::Validation("adaptation head has no linear output layer".into())
            })?;
        if head_out != dynamic {
            return Err(Error::Validation(format!(
                "adaptation head emits {head_out} values but the dynamic subblock has {dynamic} parameters"
            )));
        }
        Ok(AdaptiveRecurrentBlock {
            f,
            g,
            h,
            iterations,
            alpha,
        })
    }

    /// Scalar count of the dynamic weights.
    pub fn dynamic_param_count(&self) -> usize {
        self.f.param_count()
    }

    /// Store names of the initial dynamic weights.
    pub fn w1_names(&self) -> Vec<String> {
        self.f.param_names()
    }
}

/// Per-iteration record of one forward pass through a recurrent block.
/// `outputs[i]` is the post-`g` activation of iteration i; `weights[i]` is
/// the flat per-sample weight tensor it was computed with.
#[derive(Debug)]
pub struct BlockTrace {
    pub outputs: Vec<Var>,
    pub weights: Vec<Var>,
}

impl BlockTrace {
    pub fn final_output(&self) -> Var {
        *self.outputs.last().expect("trace has at least one iteration")
    }

    pub fn iterations(&self) -> usize {
        self.outputs.len()
    }
}

/// One additive weight step: `w + alpha * head_out`, as tape nodes, so the
/// result stays differentiable w.r.t. both operands.
pub fn weight_update(tape: &mut Tape, w: Var, head_out: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::Validation(format!("alpha must be >= 0, got {alpha}")));
    }
    if tape.value(w).shape() != tape.value(head_out).shape() {
        return Err(Error::dimension(
            "weight_update",
            format!(
                "{:?} vs {:?}",
                tape.value(w).shape(),
                tape.value(head_out).shape()
            ),
        ));
    }
    let scaled = tape.scalar_mul(head_out, alpha)?;
    tape.add(w, scaled)
}

/// Apply the dynamic subblock with one weight set per sample. `weights` is
/// the flat [B, P] tensor; parameterized layers consume their slice of it in
/// declaration order. Linear layers run as batched matmuls, conv layers with
/// per-sample kernels.
pub fn dynamic_forward(
    tape: &mut Tape,
    f: &Stack,
    weights: Var,
    input: Var,
) -> Result<Var> {
    let ws = tape.value(weights).shape().to_vec();
    let xs = tape.value(input).shape().to_vec();
    if ws.len() != 2 || xs.is_empty() || ws[0] != xs[0] {
        return Err(Error::dimension(
            "dynamic_forward",
            format!("weights {ws:?} vs input batch {xs:?}"),
        ));
    }
    let batch = ws[0];
    let mut offset = 0usize;
    let mut x = input;
    for layer in &f.layers {
        match &layer.spec {
            LayerSpec::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let count = in_features * out_features;
                let flat = tape.narrow(weights, 1, offset, count)?;
                offset += count;
                let wmat = tape.reshape(flat, &[batch, *in_features, *out_features])?;
                let row = tape.reshape(x, &[batch, 1, *in_features])?;
                let out = tape.batched_matmul(row, wmat)?;
                x = tape.reshape(out, &[batch, *out_features])?;
                if *bias {
                    let b = tape.narrow(weights, 1, offset, *out_features)?;
                    offset += *out_features;
                    x = tape.add(x, b)?;
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let count = out_channels * in_channels * kernel.0 * kernel.1;
                let flat = tape.narrow(weights, 1, offset, count)?;
                offset += count;
                let k = tape.reshape(
                    flat,
                    &[batch, *out_channels, *in_channels, kernel.0, kernel.1],
                )?;
                x = tape.conv2d_per_sample(x, k)?;
            }
            spec => {
                x = crate::layers::layer_forward(tape, spec, &[], x)?;
            }
        }
    }
    Ok(x)
}

/// Run the full K-iteration loop of one block. The initial weights are
/// packed from the staged store entries and broadcast per sample, so the
/// stored values are read-only; the same `u` is fed at every iteration.
pub fn recurrent_forward(
    tape: &mut Tape,
    block: &AdaptiveRecurrentBlock,
    staged: &StagedParams,
    u: Var,
) -> Result<BlockTrace> {
    let batch = {
        let s = tape.value(u).shape();
        if s.is_empty() {
            return Err(Error::dimension("recurrent_forward", "rank-0 input"));
        }
        s[0]
    };

    let mut parts = Vec::new();
    for name in block.f.param_names() {
        let v = staged.var(&name)?;
        let numel = tape.value(v).numel();
        parts.push(tape.reshape(v, &[numel])?);
    }
    let flat = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 0)?
    };
    let mut weights = tape.broadcast_batch(flat, batch)?;

    let mut trace = BlockTrace {
        outputs: Vec::with_capacity(block.iterations),
        weights: Vec::with_capacity(block.iterations),
    };
    for i in 1..=block.iterations {
        let f_out = dynamic_forward(tape, &block.f, weights, u)?;
        let z = block.g.forward(tape, staged, f_out)?;
        if !tape.value(z).all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite activation at iteration {i}"
            )));
        }
        trace.outputs.push(z);
        trace.weights.push(weights);
        if i < block.iterations {
            let head_out = block.h.forward(tape, staged, z)?;
            weights = weight_update(tape, weights, head_out, block.alpha)?;
        }
    }
    Ok(trace)
}

/// Chain several blocks: each runs its full K iterations, and its final
/// output becomes the next block's input. Returns the last block's trace
/// plus the intermediate hand-off activations.
pub fn chain_forward(
    tape: &mut Tape,
    blocks: &[AdaptiveRecurrentBlock],
    staged: &StagedParams,
    u: Var,
) -> Result<(BlockTrace, Vec<Var>)> {
    if blocks.is_empty() {
        return Err(Error::Validation("chain of zero blocks".into()));
    }
    let mut input = u;
    let mut intermediates = Vec::with_capacity(blocks.len() - 1);
    for (idx, block) in blocks.iter().enumerate() {
        let trace = recurrent_forward(tape, block, staged, input)?;
        if idx + 1 == blocks.len() {
            return Ok((trace, intermediates));
        }
        input = trace.final_output();
        intermediates.push(input);
    }
    unreachable!("loop returns on the last block");
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::layers::layer_forward;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn linear(inf: usize, outf: usize) -> LayerSpec {
        LayerSpec::Linear {
            in_features: inf,
            out_features: outf,
            bias: false,
        }
    }

    /// f: 4 -> 3 linear, g: relu, h: 3 -> 12 linear.
    fn tiny_block(iterations: usize, alpha: f64) -> (AdaptiveRecurrentBlock, ParamStore) {
        let f = Stack::new(vec![("f.fc", linear(4, 3))]);
        let g = Stack::new(vec![("g.relu", LayerSpec::Relu)]);
        let h = Stack::new(vec![("h.fc", linear(3, 12))]);
        let block = AdaptiveRecurrentBlock::new(f, g, h, iterations, alpha).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        block.f.register(&mut store, &mut rng).unwrap();
        block.h.register(&mut store, &mut rng).unwrap();
        (block, store)
    }

    fn zero_head(store: &mut ParamStore) {
        store.get_mut("h.fc.weight").unwrap().value.fill(0.0);
    }

    /// Plain-Vec oracle of the same recursion: per-sample matvec, relu,
    /// additive update. No tape involvement.
    fn naive_trace(
        u: &[f64],
        batch: usize,
        w1: &[f64],
        wh: &[f64],
        alpha: f64,
        k: usize,
    ) -> Vec<Vec<f64>> {
        let (inf, outf, p) = (4, 3, 12);
        let mut weights: Vec<Vec<f64>> = (0..batch).map(|_| w1.to_vec()).collect();
        let mut zs = Vec::new();
        for iter in 0..k {
            let mut z = vec![0.0; batch * outf];
            for b in 0..batch {
                for j in 0..outf {
                    let mut s = 0.0;
                    for i in 0..inf {
                        s += u[b * inf + i] * weights[b][i * outf + j];
                    }
                    z[b * outf + j] = s.max(0.0);
                }
            }
            if iter + 1 < k {
                for b in 0..batch {
                    for q in 0..p {
                        let mut s = 0.0;
                        for j in 0..outf {
                            s += z[b * outf + j] * wh[j * p + q];
                        }
                        weights[b][q] += alpha * s;
                    }
                }
            }
            zs.push(z);
        }
        zs
    }

    #[test]
    fn weight_update_arithmetic() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        let h = tape.constant(Tensor::new(vec![1], vec![2.0]).unwrap());
        let next = weight_update(&mut tape, w, h, 1e-3).unwrap();
        assert!((tape.value(next).data()[0] - 0.502).abs() < 1e-15);
    }

    #[test]
    fn weight_update_zero_alpha_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wt = Tensor::uniform(&[2, 6], -1.0, 1.0, &mut rng);
        let ht = Tensor::uniform(&[2, 6], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let w = tape.constant(wt.clone());
        let h = tape.constant(ht);
        let next = weight_update(&mut tape, w, h, 0.0).unwrap();
        assert_eq!(tape.value(next), &wt);
        assert!(weight_update(&mut tape, w, h, -0.5).is_err());
    }

    #[test]
    fn weight_update_gradient_wrt_head_is_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng), true);
        let h = tape.leaf(Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng), true);
        let alpha = 1e-3;
        let next = weight_update(&mut tape, w, h, alpha).unwrap();
        let s = tape.sum(next).unwrap();
        tape.backward(s).unwrap();
        for &g in tape.grad(h).unwrap().data() {
            assert!((g - alpha).abs() < 1e-18);
        }
        for &g in tape.grad(w).unwrap().data() {
            assert_eq!(g, 1.0);
        }
    }

    #[test]
    fn dynamic_forward_equal_weight_sets_replicate_single_sample() {
        let (block, store) = tiny_block(1, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row = Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let mut two = row.data().to_vec();
        two.extend_from_slice(row.data());
        let u2 = Tensor::new(vec![2, 4], two).unwrap();

        let w1 = store.get("f.fc.weight").unwrap().value.clone();

        let mut tape = Tape::new();
        let w_flat = tape.constant(w1.reshaped(&[12]).unwrap());
        let w_b2 = tape.broadcast_batch(w_flat, 2).unwrap();
        let u = tape.constant(u2);
        let out2 = dynamic_forward(&mut tape, &block.f, w_b2, u).unwrap();

        let w_b1 = tape.broadcast_batch(w_flat, 1).unwrap();
        let u1 = tape.constant(row);
        let out1 = dynamic_forward(&mut tape, &block.f, w_b1, u1).unwrap();

        let single = tape.value(out1).data().to_vec();
        let double = tape.value(out2).data();
        assert_eq!(&double[..3], &single[..]);
        assert_eq!(&double[3..], &single[..]);
    }

    #[test]
    fn dynamic_forward_with_broadcast_weights_matches_static_layer() {
        let (block, store) = tiny_block(1, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let w1 = store.get("f.fc.weight").unwrap().value.clone();

        let mut tape = Tape::new();
        let w_flat = tape.constant(w1.reshaped(&[12]).unwrap());
        let w_b = tape.broadcast_batch(w_flat, 5).unwrap();
        let uv = tape.constant(u);
        let dynamic = dynamic_forward(&mut tape, &block.f, w_b, uv).unwrap();

        let wv = tape.constant(w1);
        let static_out = layer_forward(&mut tape, &block.f.layers[0].spec, &[wv], uv).unwrap();
        assert_eq!(tape.value(dynamic).data(), tape.value(static_out).data());
    }

    #[test]
    fn dynamic_forward_matches_per_sample_loop_oracle() {
        for &batch in &[1usize, 2, 5] {
            let (block, store) = tiny_block(1, 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(batch as u64);
            let u = Tensor::uniform(&[batch, 4], -1.0, 1.0, &mut rng);
            // independent per-sample weights
            let w = Tensor::uniform(&[batch, 12], -1.0, 1.0, &mut rng);

            let mut tape = Tape::new();
            let wv = tape.constant(w.clone());
            let uv = tape.constant(u.clone());
            let out = dynamic_forward(&mut tape, &block.f, wv, uv).unwrap();

            // loop-over-samples oracle with plain matvec
            let _ = store;
            for b in 0..batch {
                for j in 0..3 {
                    let mut s = 0.0;
                    for i in 0..4 {
                        s += u.data()[b * 4 + i] * w.data()[b * 12 + i * 3 + j];
                    }
                    let got = tape.value(out).data()[b * 3 + j];
                    assert!((got - s).abs() <= 1e-12, "sample {b} unit {j}: {got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn recurrent_forward_with_zero_head_repeats_first_iteration() {
        let (block, mut store) = tiny_block(4, 1e-3);
        zero_head(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let uv = tape.constant(u);
        let trace = recurrent_forward(&mut tape, &block, &staged, uv).unwrap();
        assert_eq!(trace.iterations(), 4);
        let first = tape.value(trace.outputs[0]).clone();
        for &z in &trace.outputs[1..] {
            assert_eq!(tape.value(z), &first);
        }
    }

    #[test]
    fn single_iteration_equals_static_composition() {
        let (block, store) = tiny_block(1, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let uv = tape.constant(u);
        let trace = recurrent_forward(&mut tape, &block, &staged, uv).unwrap();

        let wv = staged.var("f.fc.weight").unwrap();
        let f_out = layer_forward(&mut tape, &block.f.layers[0].spec, &[wv], uv).unwrap();
        let z = tape.relu(f_out).unwrap();
        assert_eq!(
            tape.value(trace.final_output()).data(),
            tape.value(z).data()
        );
    }

    #[test]
    fn three_iterations_match_hand_unrolled_oracle() {
        let (block, store) = tiny_block(3, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let uv = tape.constant(u.clone());
        let trace = recurrent_forward(&mut tape, &block, &staged, uv).unwrap();

        let w1 = store.get("f.fc.weight").unwrap().value.data();
        let wh = store.get("h.fc.weight").unwrap().value.data();
        let expect = naive_trace(u.data(), 3, w1, wh, 0.05, 3);
        for (i, zexp) in expect.iter().enumerate() {
            let got = tape.value(trace.outputs[i]).data();
            for (a, b) in got.iter().zip(zexp) {
                assert!((a - b).abs() <= 1e-12, "iteration {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_alpha_outputs_are_bit_identical_to_single_iteration() {
        for k in [2usize, 3, 5] {
            let (block, store) = tiny_block(k, 0.0);
            let (single, _) = tiny_block(1, 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let u = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);

            let mut tape = Tape::new();
            let staged = store.stage(&mut tape);
            let uv = tape.constant(u.clone());
            let trace = recurrent_forward(&mut tape, &block, &staged, uv).unwrap();

            let mut tape1 = Tape::new();
            let staged1 = store.stage(&mut tape1);
            let uv1 = tape1.constant(u);
            let trace1 = recurrent_forward(&mut tape1, &single, &staged1, uv1).unwrap();

            assert_eq!(
                tape.value(trace.final_output()),
                tape1.value(trace1.final_output())
            );
        }
    }

    #[test]
    fn trace_weights_recompute_bit_exactly() {
        let (block, store) = tiny_block(3, 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let uv = tape.constant(u);
        let trace = recurrent_forward(&mut tape, &block, &staged, uv).unwrap();
        for i in 0..2 {
            let head = block.h.forward(&mut tape, &staged, trace.outputs[i]).unwrap();
            let recomputed =
                weight_update(&mut tape, trace.weights[i], head, block.alpha).unwrap();
            assert_eq!(
                tape.value(recomputed).data(),
                tape.value(trace.weights[i + 1]).data()
            );
        }
    }

    #[test]
    fn stored_initial_weights_survive_forward_and_backward() {
        let (block, mut store) = tiny_block(3, 1e-2);
        store.freeze("f.fc.weight").unwrap();
        let before = store.get("f.fc.weight").unwrap().value.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..3 {
            let u = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape);
            let uv = tape.constant(u);
            let trace = recurrent_forward(&mut tape, &block, &staged, uv).unwrap();
            let s = tape.sum(trace.final_output()).unwrap();
            tape.backward(s).unwrap();
            store.harvest(&tape, &staged).unwrap();
        }
        assert_eq!(store.get("f.fc.weight").unwrap().value, before);
    }

    #[test]
    fn head_gradient_is_zero_iff_single_iteration() {
        for (k, expect_nonzero) in [(1usize, false), (2, true), (3, true)] {
            let (block, store) = tiny_block(k, 1e-2);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let u = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape);
            let uv = tape.constant(u);
            let trace = recurrent_forward(&mut tape, &block, &staged, uv).unwrap();
            let s = tape.sum(trace.final_output()).unwrap();
            tape.backward(s).unwrap();
            let hvar = staged.var("h.fc.weight").unwrap();
            let nonzero = tape
                .grad(hvar)
                .map(|g| g.data().iter().any(|&v| v != 0.0))
                .unwrap_or(false);
            assert_eq!(nonzero, expect_nonzero, "K = {k}");
        }
    }

    #[test]
    fn chain_of_one_equals_recurrent_forward() {
        let (block, store) = tiny_block(2, 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let uv = tape.constant(u);
        let (chained, inter) = chain_forward(&mut tape, &[block.clone()], &staged, uv).unwrap();
        assert!(inter.is_empty());
        let direct = recurrent_forward(&mut tape, &block, &staged, uv).unwrap();
        assert_eq!(
            tape.value(chained.final_output()).data(),
            tape.value(direct.final_output()).data()
        );
    }

    /// Two chained 4 -> 4 blocks with zeroed heads collapse to the static
    /// composition of their initial weights.
    #[test]
    fn chained_zero_heads_equal_static_composition() {
        let make = |fc: &'static str, hfc: &'static str| {
            let f = Stack::new(vec![(fc, linear(4, 4))]);
            let g = Stack::new(vec![]);
            let h = Stack::new(vec![(hfc, linear(4, 16))]);
            AdaptiveRecurrentBlock::new(f, g, h, 2, 1e-2).unwrap()
        };
        let b1 = make("a.fc", "ah.fc");
        let b2 = make("b.fc", "bh.fc");
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        b1.f.register(&mut store, &mut rng).unwrap();
        b1.h.register(&mut store, &mut rng).unwrap();
        b2.f.register(&mut store, &mut rng).unwrap();
        b2.h.register(&mut store, &mut rng).unwrap();
        store.get_mut("ah.fc.weight").unwrap().value.fill(0.0);
        store.get_mut("bh.fc.weight").unwrap().value.fill(0.0);

        let u = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let uv = tape.constant(u);
        let (trace, inter) =
            chain_forward(&mut tape, &[b1.clone(), b2.clone()], &staged, uv).unwrap();
        assert_eq!(inter.len(), 1);

        let w1 = staged.var("a.fc.weight").unwrap();
        let w2 = staged.var("b.fc.weight").unwrap();
        let s1 = tape.matmul(uv, w1).unwrap();
        let s2 = tape.matmul(s1, w2).unwrap();
        assert_eq!(
            tape.value(trace.final_output()).data(),
            tape.value(s2).data()
        );
    }

    #[test]
    fn chained_blocks_match_staged_oracle() {
        // two 4 -> 4 blocks, K = 2 each, nonzero heads: compare against
        // running the two recursions by hand with plain tensor math
        let f1 = Stack::new(vec![("a.fc", linear(4, 4))]);
        let h1 = Stack::new(vec![("ah.fc", linear(4, 16))]);
        let b1 = AdaptiveRecurrentBlock::new(f1, Stack::new(vec![]), h1, 2, 0.05).unwrap();
        let f2 = Stack::new(vec![("b.fc", linear(4, 4))]);
        let h2 = Stack::new(vec![("bh.fc", linear(4, 16))]);
        let b2 = AdaptiveRecurrentBlock::new(f2, Stack::new(vec![]), h2, 2, 0.05).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        b1.f.register(&mut store, &mut rng).unwrap();
        b1.h.register(&mut store, &mut rng).unwrap();
        b2.f.register(&mut store, &mut rng).unwrap();
        b2.h.register(&mut store, &mut rng).unwrap();

        let batch = 2;
        let u = Tensor::uniform(&[batch, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let uv = tape.constant(u.clone());
        let (trace, _) = chain_forward(&mut tape, &[b1, b2], &staged, uv).unwrap();
        let got = tape.value(trace.final_output()).data();

        // staged oracle: identity g, so z = u W_i per iteration
        let stage_block = |u: &[f64], w1: &[f64], wh: &[f64]| -> Vec<f64> {
            let mut w: Vec<Vec<f64>> = (0..batch).map(|_| w1.to_vec()).collect();
            let mut z = vec![0.0; batch * 4];
            for iter in 0..2 {
                for b in 0..batch {
                    for j in 0..4 {
                        let mut s = 0.0;
                        for i in 0..4 {
                            s += u[b * 4 + i] * w[b][i * 4 + j];
                        }
                        z[b * 4 + j] = s;
                    }
                }
                if iter == 0 {
                    for b in 0..batch {
                        for q in 0..16 {
                            let mut s = 0.0;
                            for j in 0..4 {
                                s += z[b * 4 + j] * wh[j * 16 + q];
                            }
                            w[b][q] += 0.05 * s;
                        }
                    }
                }
            }
            z
        };
        let z1 = stage_block(
            u.data(),
            store.get("a.fc.weight").unwrap().value.data(),
            store.get("ah.fc.weight").unwrap().value.data(),
        );
        let z2 = stage_block(
            &z1,
            store.get("b.fc.weight").unwrap().value.data(),
            store.get("bh.fc.weight").unwrap().value.data(),
        );
        for (a, b) in got.iter().zip(&z2) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn head_width_must_match_dynamic_parameter_count() {
        let f = Stack::new(vec![("f.fc", linear(4, 3))]);
        let g = Stack::new(vec![]);
        let h = Stack::new(vec![("h.fc", linear(3, 11))]);
        assert!(AdaptiveRecurrentBlock::new(f, g, h, 2, 1e-3).is_err());
    }
}
