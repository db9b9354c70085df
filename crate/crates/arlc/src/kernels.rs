//! Raw array kernels behind the tape operations.
//!
//! All reductions run in a fixed sequential order so results are
//! bit-reproducible across runs and thread counts. Batched variants reuse the
//! single-sample kernels, which makes a batched op with replicated operands
//! bit-identical to the unbatched op.

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// C[m,n] += A[m,k] * B[k,n].
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,k] += A[m,n] * B[k,n]^T  (i.e. A * B-transposed).
pub fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * k + j] += s;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]  (i.e. A-transposed * B).
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Valid cross-correlation of one sample: out[co,y,x] over input [cin,h,w]
/// and kernel [cout,cin,kh,kw]. `out` must be zeroed, length cout*oh*ow.
pub fn conv2d_sample(
    out: &mut [f64],
    x: &[f64],
    kernel: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    for co in 0..cout {
        let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * cin + ci) * kh * kw;
            for u in 0..kh {
                for v in 0..kw {
                    let kv = kernel[kbase + u * kw + v];
                    for y in 0..oh {
                        let xrow = &xplane[(y + u) * w + v..(y + u) * w + v + ow];
                        let orow = &mut oplane[y * ow..y * ow + ow];
                        for (o, xv) in orow.iter_mut().zip(xrow) {
                            *o += kv * xv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the input of `conv2d_sample`; accumulates into `dx`.
pub fn conv2d_sample_input_grad(
    dx: &mut [f64],
    dout: &[f64],
    kernel: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    for co in 0..cout {
        let dplane = &dout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xplane = &mut dx[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * cin + ci) * kh * kw;
            for u in 0..kh {
                for v in 0..kw {
                    let kv = kernel[kbase + u * kw + v];
                    for y in 0..oh {
                        let drow = &dplane[y * ow..y * ow + ow];
                        let xrow = &mut xplane[(y + u) * w + v..(y + u) * w + v + ow];
                        for (xv, dv) in xrow.iter_mut().zip(drow) {
                            *xv += kv * dv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the kernel of `conv2d_sample`; accumulates into `dk`.
pub fn conv2d_sample_kernel_grad(
    dk: &mut [f64],
    dout: &[f64],
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    for co in 0..cout {
        let dplane = &dout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * cin + ci) * kh * kw;
            for u in 0..kh {
                for v in 0..kw {
                    let mut s = 0.0;
                    for y in 0..oh {
                        let drow = &dplane[y * ow..y * ow + ow];
                        let xrow = &xplane[(y + u) * w + v..(y + u) * w + v + ow];
                        for (dv, xv) in drow.iter().zip(xrow) {
                            s += dv * xv;
                        }
                    }
                    dk[kbase + u * kw + v] += s;
                }
            }
        }
    }
}

/// Max pooling of one channel plane; records the flat argmax per window.
/// Ties break toward the first (row-major) input index.
pub fn maxpool_plane(
    out: &mut [f64],
    argmax: &mut [u32],
    x: &[f64],
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    sh: usize,
    sw: usize,
    plane_offset: usize,
) {
    let oh = (h - ph) / sh + 1;
    let ow = (w - pw) / sw + 1;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0usize;
            for u in 0..ph {
                for v in 0..pw {
                    let idx = (oy * sh + u) * w + ox * sw + v;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
            }
            out[oy * ow + ox] = best;
            argmax[oy * ow + ox] = (plane_offset + best_idx) as u32;
        }
    }
}

/// Average pooling of one channel plane.
pub fn avgpool_plane(
    out: &mut [f64],
    x: &[f64],
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    sh: usize,
    sw: usize,
) {
    let oh = (h - ph) / sh + 1;
    let ow = (w - pw) / sw + 1;
    let inv = 1.0 / (ph * pw) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = 0.0;
            for u in 0..ph {
                for v in 0..pw {
                    s += x[(oy * sh + u) * w + ox * sw + v];
                }
            }
            out[oy * ow + ox] = s * inv;
        }
    }
}
