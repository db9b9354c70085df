//! Reverse-mode automatic differentiation over an append-only operation tape.
//!
//! Every differentiable value is a node on the tape, including computed
//! weight tensors: nothing distinguishes "weights" from "activations", so
//! gradients flow through weight tensors that are themselves outputs of
//! earlier operations. Node inputs always precede the node itself, and
//! `backward` replays the list once in reverse.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    ScalarMul { x: Var, c: f64 },
    Matmul { a: Var, b: Var },
    BatchedMatmul { a: Var, b: Var },
    Conv2d { input: Var, kernel: Var },
    Conv2dPerSample { input: Var, kernel: Var },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    AvgPool2d { x: Var, window: (usize, usize), stride: (usize, usize) },
    Relu { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape { x: Var },
    BroadcastBatch { x: Var },
    Narrow { x: Var, axis: usize, start: usize },
    MeanOverBatch { x: Var },
    Sum { x: Var },
    BiasAdd { x: Var, bias: Var },
    SoftmaxCrossEntropy { logits: Var, softmax: Tensor, inv_batch: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Push an arithmetic result, rejecting non-finite values.
    fn push_checked(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "{op_name} produced a non-finite value"
            )));
        }
        Ok(self.push(value, requires_grad, op))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── elementwise and structural ops ──────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.axpy(1.0, vb)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("add", out, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dimension(
                "sub",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.axpy(-1.0, vb)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("sub", out, rg, Op::Sub { a, b })
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| c * v).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push_checked("scalar_mul", out, rg, Op::ScalarMul { x, c })
    }

    /// max(0, x) elementwise; gradient is 0 at x == 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Relu { x }))
    }

    /// Hinge max(0, x); same rule as relu, kept as its own entry point
    /// because it is applied to loss differences rather than activations.
    pub fn hinge(&mut self, x: Var) -> Result<Var> {
        self.relu(x)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Validation("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::dimension(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dimension(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", s, first),
                ));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let out_row = axis_total * tail;
        let mut col = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            let rows = s[axis] * tail;
            let src = self.value(p).data();
            for o in 0..outer {
                data[o * out_row + col..o * out_row + col + rows]
                    .copy_from_slice(&src[o * rows..(o + 1) * rows]);
            }
            col += rows;
        }
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != vx.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dimension(
                "reshape",
                format!("{:?} to {:?}", vx.shape(), shape),
            ));
        }
        let out = Tensor::new(shape.to_vec(), vx.data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    /// Collapse all but the leading (batch) axis: [B, d1, ..] -> [B, d1*..].
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.is_empty() {
            return Err(Error::dimension("flatten", "rank-0 input".to_string()));
        }
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    /// Replicate a tensor along a new leading batch axis: [d..] -> [batch, d..].
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        if batch == 0 {
            return Err(Error::dimension("broadcast_batch", "batch 0".to_string()));
        }
        let vx = self.value(x);
        let mut shape = Vec::with_capacity(vx.shape().len() + 1);
        shape.push(batch);
        shape.extend_from_slice(vx.shape());
        let mut data = Vec::with_capacity(batch * vx.numel());
        for _ in 0..batch {
            data.extend_from_slice(vx.data());
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::BroadcastBatch { x }))
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dimension(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, s),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let tail: usize = s[axis + 1..].iter().product();
        let mut shape = s.to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * tail);
        let in_row = s[axis] * tail;
        for o in 0..outer {
            let base = o * in_row + start * tail;
            data.extend_from_slice(&vx.data()[base..base + len * tail]);
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Narrow { x, axis, start }))
    }

    /// Mean over the leading axis: [B, d..] -> [d..].
    pub fn mean_over_batch(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.is_empty() {
            return Err(Error::dimension(
                "mean_over_batch",
                "rank-0 input".to_string(),
            ));
        }
        let b = s[0];
        let rest: usize = s[1..].iter().product();
        let mut data = vec![0.0; rest];
        for bi in 0..b {
            for (d, v) in data.iter_mut().zip(&vx.data()[bi * rest..(bi + 1) * rest]) {
                *d += v;
            }
        }
        let inv = 1.0 / b as f64;
        for d in &mut data {
            *d *= inv;
        }
        let out = Tensor::new(s[1..].to_vec(), data)?;
        let rg = self.rg(x);
        self.push_checked("mean_over_batch", out, rg, Op::MeanOverBatch { x })
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push_checked("sum", Tensor::scalar(total), rg, Op::Sum { x })
    }

    /// Add a per-feature bias: [B,F] + [F], or [B,C,H,W] + [C].
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let xs = vx.shape();
        let valid = match (xs.len(), vb.shape().len()) {
            (2, 1) => vb.shape()[0] == xs[1],
            (4, 1) => vb.shape()[0] == xs[1],
            _ => false,
        };
        if !valid {
            return Err(Error::dimension(
                "bias_add",
                format!("{:?} vs {:?}", xs, vb.shape()),
            ));
        }
        let plane: usize = xs[2..].iter().product();
        let channels = xs[1];
        let mut data = vx.data().to_vec();
        for bi in 0..xs[0] {
            for c in 0..channels {
                let base = (bi * channels + c) * plane;
                let bv = vb.data()[c];
                for v in &mut data[base..base + plane] {
                    *v += bv;
                }
            }
        }
        let out = Tensor::new(xs.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push_checked("bias_add", out, rg, Op::BiasAdd { x, bias })
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(
                "matmul",
                format!("{sa:?} vs {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(va.data(), vb.data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul", out, rg, Op::Matmul { a, b })
    }

    /// Independent matmul per batch index: [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dimension(
                "batched_matmul",
                format!("{sa:?} vs {sb:?}"),
            ));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; bsz * m * n];
        for bi in 0..bsz {
            kernels::matmul_acc(
                &mut data[bi * m * n..(bi + 1) * m * n],
                &va.data()[bi * m * k..(bi + 1) * m * k],
                &vb.data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::new(vec![bsz, m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("batched_matmul", out, rg, Op::BatchedMatmul { a, b })
    }

    // ── convolution and pooling ─────────────────────────────────────

    /// Valid cross-correlation, stride 1, no padding:
    /// [B,Cin,H,W] x [Cout,Cin,kh,kw] -> [B,Cout,H-kh+1,W-kw+1].
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (vx, vk) = (self.value(input), self.value(kernel));
        let (xs, ks) = (vx.shape(), vk.shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::dimension(
                "conv2d",
                format!("input {xs:?}, kernel {ks:?}"),
            ));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(Error::dimension(
                "conv2d",
                format!("input channels {cin} vs kernel channels {kcin}"),
            ));
        }
        if kh > h || kw > w {
            return Err(Error::dimension(
                "conv2d",
                format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            ));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let in_len = cin * h * w;
        let out_len = cout * oh * ow;
        let mut data = vec![0.0; b * out_len];
        let kdata = vk.data();
        data.par_chunks_mut(out_len)
            .zip(vx.data().par_chunks(in_len))
            .for_each(|(o, x)| kernels::conv2d_sample(o, x, kdata, cin, h, w, cout, kh, kw));
        let out = Tensor::new(vec![b, cout, oh, ow], data)?;
        let rg = self.rg(input) || self.rg(kernel);
        self.push_checked("conv2d", out, rg, Op::Conv2d { input, kernel })
    }

    /// Convolution where every batch sample has its own kernel:
    /// [B,Cin,H,W] x [B,Cout,Cin,kh,kw] -> [B,Cout,H-kh+1,W-kw+1].
    pub fn conv2d_per_sample(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (vx, vk) = (self.value(input), self.value(kernel));
        let (xs, ks) = (vx.shape(), vk.shape());
        if xs.len() != 4 || ks.len() != 5 || ks[0] != xs[0] {
            return Err(Error::dimension(
                "conv2d_per_sample",
                format!("input {xs:?}, kernel {ks:?}"),
            ));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, kh, kw) = (ks[1], ks[2], ks[3], ks[4]);
        if kcin != cin {
            return Err(Error::dimension(
                "conv2d_per_sample",
                format!("input channels {cin} vs kernel channels {kcin}"),
            ));
        }
        if kh > h || kw > w {
            return Err(Error::dimension(
                "conv2d_per_sample",
                format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            ));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let in_len = cin * h * w;
        let k_len = cout * cin * kh * kw;
        let out_len = cout * oh * ow;
        let mut data = vec![0.0; b * out_len];
        data.par_chunks_mut(out_len)
            .zip(vx.data().par_chunks(in_len))
            .zip(vk.data().par_chunks(k_len))
            .for_each(|((o, x), k)| kernels::conv2d_sample(o, x, k, cin, h, w, cout, kh, kw));
        let out = Tensor::new(vec![b, cout, oh, ow], data)?;
        let rg = self.rg(input) || self.rg(kernel);
        self.push_checked(
            "conv2d_per_sample",
            out,
            rg,
            Op::Conv2dPerSample { input, kernel },
        )
    }

    fn pool_geometry(
        op: &'static str,
        shape: &[usize],
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<(usize, usize, usize, usize, usize, usize)> {
        if shape.len() != 4 {
            return Err(Error::dimension(op, format!("input {shape:?} is not rank 4")));
        }
        let (h, w) = (shape[2], shape[3]);
        let ((ph, pw), (sh, sw)) = (window, stride);
        if ph == 0 || pw == 0 || sh == 0 || sw == 0 || ph > h || pw > w {
            return Err(Error::dimension(
                op,
                format!("window {ph}x{pw} stride {sh}x{sw} on input {h}x{w}"),
            ));
        }
        let oh = (h - ph) / sh + 1;
        let ow = (w - pw) / sw + 1;
        Ok((shape[0], shape[1], h, w, oh, ow))
    }

    pub fn maxpool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let vx = self.value(x);
        let (b, c, h, w, oh, ow) = Self::pool_geometry("maxpool2d", vx.shape(), window, stride)?;
        let mut data = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0u32; b * c * oh * ow];
        for p in 0..b * c {
            kernels::maxpool_plane(
                &mut data[p * oh * ow..(p + 1) * oh * ow],
                &mut argmax[p * oh * ow..(p + 1) * oh * ow],
                &vx.data()[p * h * w..(p + 1) * h * w],
                h,
                w,
                window.0,
                window.1,
                stride.0,
                stride.1,
                p * h * w,
            );
        }
        let out = Tensor::new(vec![b, c, oh, ow], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::MaxPool2d { x, argmax }))
    }

    pub fn avgpool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let vx = self.value(x);
        let (b, c, h, w, oh, ow) = Self::pool_geometry("avgpool2d", vx.shape(), window, stride)?;
        let mut data = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            kernels::avgpool_plane(
                &mut data[p * oh * ow..(p + 1) * oh * ow],
                &vx.data()[p * h * w..(p + 1) * h * w],
                h,
                w,
                window.0,
                window.1,
                stride.0,
                stride.1,
            );
        }
        let out = Tensor::new(vec![b, c, oh, ow], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            rg,
            Op::AvgPool2d {
                x,
                window,
                stride,
            },
        ))
    }

    // ── loss ────────────────────────────────────────────────────────

    /// Batch-mean negative log softmax probability of the true class.
    /// Uses the max-shifted log-sum-exp for stability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let s = vl.shape();
        if s.len() != 2 {
            return Err(Error::dimension(
                "softmax_cross_entropy",
                format!("logits {s:?} are not rank 2"),
            ));
        }
        let (b, c) = (s[0], s[1]);
        if labels.len() != b {
            return Err(Error::Validation(format!(
                "softmax_cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Validation(format!(
                "softmax_cross_entropy: label {bad} out of range 0..{c}"
            )));
        }
        let mut softmax = vec![0.0; b * c];
        let mut loss = 0.0;
        for (j, &y) in labels.iter().enumerate() {
            let row = &vl.data()[j * c..(j + 1) * c];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - maxv).exp();
            }
            let lse = maxv + denom.ln();
            loss += lse - row[y];
            for (sm, &v) in softmax[j * c..(j + 1) * c].iter_mut().zip(row) {
                *sm = (v - lse).exp();
            }
        }
        let inv_batch = 1.0 / b as f64;
        loss *= inv_batch;
        let softmax = Tensor::new(vec![b, c], softmax)?;
        let rg = self.rg(logits);
        self.push_checked(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                softmax: {
                    // fold labels into the saved softmax so backward is one subtraction
                    let mut sm = softmax;
                    for (j, &y) in labels.iter().enumerate() {
                        sm.data_mut()[j * c + y] -= 1.0;
                    }
                    sm
                },
                inv_batch,
            },
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulate dRoot/dNode into every reachable node with requires_grad.
    /// Gradients add across calls; use [`Tape::zero_grads`] to reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Validation(format!(
                "backward: unknown node {}",
                root.0
            )));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Validation(format!(
                "backward: root has shape {:?}, expected a scalar",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut pass: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        pass.resize_with(root.0 + 1, || None);
        pass[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape(), 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = pass[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut pass)?;
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.axpy(1.0, &g)?,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn pass_slot<'a>(
        &self,
        pass: &'a mut [Option<Tensor>],
        v: Var,
    ) -> &'a mut Tensor {
        pass[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn propagate(&self, id: usize, g: &Tensor, pass: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.rg(*a) {
                    self.pass_slot(pass, *a).axpy(1.0, g)?;
                }
                if self.rg(*b) {
                    self.pass_slot(pass, *b).axpy(1.0, g)?;
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    self.pass_slot(pass, *a).axpy(1.0, g)?;
                }
                if self.rg(*b) {
                    self.pass_slot(pass, *b).axpy(-1.0, g)?;
                }
            }
            Op::ScalarMul { x, c } => {
                if self.rg(*x) {
                    self.pass_slot(pass, *x).axpy(*c, g)?;
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let n = self.value(*b).shape()[1];
                if self.rg(*a) {
                    let bdata = self.value(*b).data().to_vec();
                    let da = self.pass_slot(pass, *a);
                    kernels::matmul_nt_acc(da.data_mut(), g.data(), &bdata, m, n, k);
                }
                if self.rg(*b) {
                    let adata = self.value(*a).data().to_vec();
                    let db = self.pass_slot(pass, *b);
                    kernels::matmul_tn_acc(db.data_mut(), &adata, g.data(), m, k, n);
                }
            }
            Op::BatchedMatmul { a, b } => {
                let (bsz, m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1], s[2])
                };
                let n = self.value(*b).shape()[2];
                if self.rg(*a) {
                    let bdata = self.value(*b).data().to_vec();
                    let da = self.pass_slot(pass, *a);
                    for bi in 0..bsz {
                        kernels::matmul_nt_acc(
                            &mut da.data_mut()[bi * m * k..(bi + 1) * m * k],
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &bdata[bi * k * n..(bi + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.rg(*b) {
                    let adata = self.value(*a).data().to_vec();
                    let db = self.pass_slot(pass, *b);
                    for bi in 0..bsz {
                        kernels::matmul_tn_acc(
                            &mut db.data_mut()[bi * k * n..(bi + 1) * k * n],
                            &adata[bi * m * k..(bi + 1) * m * k],
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Conv2d { input, kernel } => {
                let xs = self.value(*input).shape().to_vec();
                let ks = self.value(*kernel).shape().to_vec();
                let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                let in_len = cin * h * w;
                let out_len = cout * (h - kh + 1) * (w - kw + 1);
                if self.rg(*input) {
                    let kdata = self.value(*kernel).data().to_vec();
                    let dx = self.pass_slot(pass, *input);
                    dx.data_mut()
                        .par_chunks_mut(in_len)
                        .zip(g.data().par_chunks(out_len))
                        .for_each(|(dxs, gs)| {
                            kernels::conv2d_sample_input_grad(
                                dxs, gs, &kdata, cin, h, w, cout, kh, kw,
                            )
                        });
                }
                if self.rg(*kernel) {
                    // per-sample partials in parallel, then a fixed-order reduce
                    let xdata = self.value(*input).data();
                    let k_len: usize = ks.iter().product();
                    let partials: Vec<Vec<f64>> = (0..b)
                        .into_par_iter()
                        .map(|bi| {
                            let mut dk = vec![0.0; k_len];
                            kernels::conv2d_sample_kernel_grad(
                                &mut dk,
                                &g.data()[bi * out_len..(bi + 1) * out_len],
                                &xdata[bi * in_len..(bi + 1) * in_len],
                                cin,
                                h,
                                w,
                                cout,
                                kh,
                                kw,
                            );
                            dk
                        })
                        .collect();
                    let dk = self.pass_slot(pass, *kernel);
                    for part in &partials {
                        for (d, p) in dk.data_mut().iter_mut().zip(part) {
                            *d += p;
                        }
                    }
                }
            }
            Op::Conv2dPerSample { input, kernel } => {
                let xs = self.value(*input).shape().to_vec();
                let ks = self.value(*kernel).shape().to_vec();
                let (cin, h, w) = (xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ks[1], ks[3], ks[4]);
                let in_len = cin * h * w;
                let k_len = cout * cin * kh * kw;
                let out_len = cout * (h - kh + 1) * (w - kw + 1);
                if self.rg(*input) {
                    let kdata = self.value(*kernel).data().to_vec();
                    let dx = self.pass_slot(pass, *input);
                    dx.data_mut()
                        .par_chunks_mut(in_len)
                        .zip(g.data().par_chunks(out_len))
                        .zip(kdata.par_chunks(k_len))
                        .for_each(|((dxs, gs), k)| {
                            kernels::conv2d_sample_input_grad(
                                dxs, gs, k, cin, h, w, cout, kh, kw,
                            )
                        });
                }
                if self.rg(*kernel) {
                    let xdata = self.value(*input).data().to_vec();
                    let dk = self.pass_slot(pass, *kernel);
                    dk.data_mut()
                        .par_chunks_mut(k_len)
                        .zip(g.data().par_chunks(out_len))
                        .zip(xdata.par_chunks(in_len))
                        .for_each(|((dks, gs), x)| {
                            kernels::conv2d_sample_kernel_grad(
                                dks, gs, x, cin, h, w, cout, kh, kw,
                            )
                        });
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if self.rg(*x) {
                    let dx = self.pass_slot(pass, *x);
                    for (i, &src) in argmax.iter().enumerate() {
                        dx.data_mut()[src as usize] += g.data()[i];
                    }
                }
            }
            Op::AvgPool2d { x, window, stride } => {
                if self.rg(*x) {
                    let s = self.value(*x).shape().to_vec();
                    let (h, w) = (s[2], s[3]);
                    let ((ph, pw), (sh, sw)) = (*window, *stride);
                    let oh = (h - ph) / sh + 1;
                    let ow = (w - pw) / sw + 1;
                    let inv = 1.0 / (ph * pw) as f64;
                    let dx = self.pass_slot(pass, *x);
                    for p in 0..s[0] * s[1] {
                        let gplane = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                        let dplane = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gplane[oy * ow + ox] * inv;
                                for u in 0..ph {
                                    for v in 0..pw {
                                        dplane[(oy * sh + u) * w + ox * sw + v] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.rg(*x) {
                    let xdata = self.value(*x).data().to_vec();
                    let dx = self.pass_slot(pass, *x);
                    for ((d, &xv), &gv) in dx.data_mut().iter_mut().zip(&xdata).zip(g.data()) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let tail: usize = out_shape[*axis + 1..].iter().product();
                let out_row = out_shape[*axis] * tail;
                let mut col = 0usize;
                for &p in parts {
                    let rows = self.value(p).shape()[*axis] * tail;
                    if self.rg(p) {
                        let dp = self.pass_slot(pass, p);
                        for o in 0..outer {
                            let src = &g.data()[o * out_row + col..o * out_row + col + rows];
                            for (d, v) in dp.data_mut()[o * rows..(o + 1) * rows]
                                .iter_mut()
                                .zip(src)
                            {
                                *d += v;
                            }
                        }
                    }
                    col += rows;
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    let dx = self.pass_slot(pass, *x);
                    for (d, v) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += v;
                    }
                }
            }
            Op::BroadcastBatch { x } => {
                if self.rg(*x) {
                    let n = self.value(*x).numel();
                    let dx = self.pass_slot(pass, *x);
                    for chunk in g.data().chunks(n) {
                        for (d, v) in dx.data_mut().iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.rg(*x) {
                    let s = self.value(*x).shape().to_vec();
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    let outer: usize = s[..*axis].iter().product();
                    let tail: usize = s[*axis + 1..].iter().product();
                    let in_row = s[*axis] * tail;
                    let rows = out_shape[*axis] * tail;
                    let dx = self.pass_slot(pass, *x);
                    for o in 0..outer {
                        let base = o * in_row + start * tail;
                        for (d, v) in dx.data_mut()[base..base + rows]
                            .iter_mut()
                            .zip(&g.data()[o * rows..(o + 1) * rows])
                        {
                            *d += v;
                        }
                    }
                }
            }
            Op::MeanOverBatch { x } => {
                if self.rg(*x) {
                    let b = self.value(*x).shape()[0];
                    let inv = 1.0 / b as f64;
                    let rest = g.numel();
                    let dx = self.pass_slot(pass, *x);
                    for bi in 0..b {
                        for (d, v) in dx.data_mut()[bi * rest..(bi + 1) * rest]
                            .iter_mut()
                            .zip(g.data())
                        {
                            *d += inv * v;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.rg(*x) {
                    let gv = g.data()[0];
                    let dx = self.pass_slot(pass, *x);
                    for d in dx.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::BiasAdd { x, bias } => {
                if self.rg(*x) {
                    self.pass_slot(pass, *x).axpy(1.0, g)?;
                }
                if self.rg(*bias) {
                    let xs = self.value(*x).shape().to_vec();
                    let channels = xs[1];
                    let plane: usize = xs[2..].iter().product();
                    let db = self.pass_slot(pass, *bias);
                    for bi in 0..xs[0] {
                        for c in 0..channels {
                            let base = (bi * channels + c) * plane;
                            let mut s = 0.0;
                            for &v in &g.data()[base..base + plane] {
                                s += v;
                            }
                            db.data_mut()[c] += s;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                softmax,
                inv_batch,
            } => {
                if self.rg(*logits) {
                    let gv = g.data()[0] * inv_batch;
                    let dl = self.pass_slot(pass, *logits);
                    // softmax already has the one-hot folded in
                    for (d, v) in dl.data_mut().iter_mut().zip(softmax.data()) {
                        *d += gv * v;
                    }
                }
            }
        }
        Ok(())
    }
}
