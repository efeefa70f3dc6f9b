//! Raw numeric kernels.
//!
//! These free functions implement the forward and backward math for every
//! supported operation. The autodiff graph and the no-graph inference path
//! both call into this module, so the two paths cannot drift apart.
//! Reductions and inner products accumulate in f64.

use crate::{Error, Result};

// ── broadcasting ─────────────────────────────────────────────────────

/// Broadcast two shapes, aligning from the trailing dimension. Each aligned
/// pair must be equal or one of them 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::shape(format!(
                "cannot broadcast {a:?} with {b:?} (dim {da} vs {db})"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn pad_left(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut p = vec![1usize; ndim];
    p[ndim - shape.len()..].copy_from_slice(shape);
    p
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `shape` broadcast to it.
pub fn broadcast_index_map(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let padded = pad_left(shape, ndim);
    let numel: usize = out_shape.iter().product();
    let mut map = vec![0usize; numel];
    let mut coords = vec![0usize; ndim];
    for (flat, slot) in map.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0usize;
        let mut stride = 1usize;
        for d in (0..ndim).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            src += c * stride;
            stride *= padded[d];
        }
        *slot = src;
    }
    map
}

/// Sum a gradient of `grad_shape` down to `target_shape` (undo broadcasting).
pub fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let map = broadcast_index_map(target_shape, grad_shape);
    let mut out = vec![0.0; target_numel];
    for (flat, &g) in grad.iter().enumerate() {
        out[map[flat]] += g;
    }
    out
}

// ── matmul ───────────────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Gradients of `matmul`: dA = dC · Bᵀ, dB = Aᵀ · dC.
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (dv, &bv) in dcrow.iter().zip(brow) {
                acc += dv * bv;
            }
            darow[p] += acc;
        }
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dbv, &dv) in dbrow.iter_mut().zip(dcrow) {
                *dbv += av * dv;
            }
        }
    }
    (da, db)
}

// ── 1-d convolution, stride 1, symmetric zero padding ────────────────

/// y[b,o,t] = Σ_{c,κ} w[o,c,κ] · x[b,c,t+κ-pad], kernel length must be odd.
pub fn conv1d(
    x: &[f64],
    w: &[f64],
    batch: usize,
    c_in: usize,
    t: usize,
    c_out: usize,
    kernel: usize,
) -> Vec<f64> {
    let pad = kernel / 2;
    let mut y = vec![0.0; batch * c_out * t];
    for bi in 0..batch {
        for o in 0..c_out {
            let yrow = &mut y[(bi * c_out + o) * t..(bi * c_out + o + 1) * t];
            for c in 0..c_in {
                let xrow = &x[(bi * c_in + c) * t..(bi * c_in + c + 1) * t];
                let wrow = &w[(o * c_in + c) * kernel..(o * c_in + c + 1) * kernel];
                for (kk, &wv) in wrow.iter().enumerate() {
                    // x index = ti + kk - pad, clipped to valid range
                    let lo = pad.saturating_sub(kk);
                    let hi = (t + pad - kk).min(t);
                    for ti in lo..hi {
                        yrow[ti] += wv * xrow[ti + kk - pad];
                    }
                }
            }
        }
    }
    y
}

/// Gradients of `conv1d` w.r.t. input and weights.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    c_in: usize,
    t: usize,
    c_out: usize,
    kernel: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pad = kernel / 2;
    let mut dx = vec![0.0; batch * c_in * t];
    let mut dw = vec![0.0; c_out * c_in * kernel];
    for bi in 0..batch {
        for o in 0..c_out {
            let dyrow = &dy[(bi * c_out + o) * t..(bi * c_out + o + 1) * t];
            for c in 0..c_in {
                let xrow = &x[(bi * c_in + c) * t..(bi * c_in + c + 1) * t];
                let dxrow = &mut dx[(bi * c_in + c) * t..(bi * c_in + c + 1) * t];
                let wrow = &w[(o * c_in + c) * kernel..(o * c_in + c + 1) * kernel];
                let dwrow = &mut dw[(o * c_in + c) * kernel..(o * c_in + c + 1) * kernel];
                for kk in 0..kernel {
                    let lo = pad.saturating_sub(kk);
                    let hi = (t + pad - kk).min(t);
                    let wv = wrow[kk];
                    let mut wacc = 0.0;
                    for ti in lo..hi {
                        dxrow[ti + kk - pad] += wv * dyrow[ti];
                        wacc += dyrow[ti] * xrow[ti + kk - pad];
                    }
                    dwrow[kk] += wacc;
                }
            }
        }
    }
    (dx, dw)
}

// ── group normalization over [batch, channels, time] ─────────────────

pub struct GroupNormStats {
    pub mean: Vec<f64>,    // per (batch, group)
    pub inv_std: Vec<f64>, // per (batch, group)
}

pub fn group_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    batch: usize,
    channels: usize,
    t: usize,
    groups: usize,
    eps: f64,
) -> (Vec<f64>, GroupNormStats) {
    assert!(channels % groups == 0, "channels must divide into groups");
    let cg = channels / groups;
    let group_len = cg * t;
    let mut y = vec![0.0; x.len()];
    let mut mean = vec![0.0; batch * groups];
    let mut inv_std = vec![0.0; batch * groups];
    for bi in 0..batch {
        for g in 0..groups {
            let base = (bi * channels + g * cg) * t;
            let xs = &x[base..base + group_len];
            let mu: f64 = xs.iter().sum::<f64>() / group_len as f64;
            let var: f64 =
                xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / group_len as f64;
            let istd = 1.0 / (var + eps).sqrt();
            mean[bi * groups + g] = mu;
            inv_std[bi * groups + g] = istd;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let row = base + ci * t;
                for ti in 0..t {
                    let xhat = (x[row + ti] - mu) * istd;
                    y[row + ti] = xhat * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (y, GroupNormStats { mean, inv_std })
}

/// Returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    x: &[f64],
    gamma: &[f64],
    dy: &[f64],
    stats: &GroupNormStats,
    batch: usize,
    channels: usize,
    t: usize,
    groups: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = channels / groups;
    let group_len = (cg * t) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for bi in 0..batch {
        for g in 0..groups {
            let base = (bi * channels + g * cg) * t;
            let mu = stats.mean[bi * groups + g];
            let istd = stats.inv_std[bi * groups + g];
            // First pass: accumulate the two group means needed for dx.
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let row = base + ci * t;
                for ti in 0..t {
                    let xhat = (x[row + ti] - mu) * istd;
                    let dyv = dy[row + ti];
                    dgamma[ch] += dyv * xhat;
                    dbeta[ch] += dyv;
                    let dxhat = dyv * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let m_dxhat = sum_dxhat / group_len;
            let m_dxhat_xhat = sum_dxhat_xhat / group_len;
            for ci in 0..cg {
                let ch = g * cg + ci;
                let row = base + ci * t;
                for ti in 0..t {
                    let xhat = (x[row + ti] - mu) * istd;
                    let dxhat = dy[row + ti] * gamma[ch];
                    dx[row + ti] = istd * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ── activations ──────────────────────────────────────────────────────

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (1.0 - s))
        })
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

// ── resolution changes on the trailing axis of [b, c, t] ─────────────

/// Keep every second time step; `t` must be even.
pub fn downsample2(x: &[f64], rows: usize, t: usize) -> Vec<f64> {
    let half = t / 2;
    let mut y = vec![0.0; rows * half];
    for r in 0..rows {
        for ti in 0..half {
            y[r * half + ti] = x[r * t + 2 * ti];
        }
    }
    y
}

pub fn downsample2_backward(dy: &[f64], rows: usize, t: usize) -> Vec<f64> {
    let half = t / 2;
    let mut dx = vec![0.0; rows * t];
    for r in 0..rows {
        for ti in 0..half {
            dx[r * t + 2 * ti] = dy[r * half + ti];
        }
    }
    dx
}

/// Nearest-neighbor ×2 on the trailing axis.
pub fn upsample2(x: &[f64], rows: usize, t: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * t * 2];
    for r in 0..rows {
        for ti in 0..t {
            y[r * t * 2 + 2 * ti] = x[r * t + ti];
            y[r * t * 2 + 2 * ti + 1] = x[r * t + ti];
        }
    }
    y
}

pub fn upsample2_backward(dy: &[f64], rows: usize, t: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * t];
    for r in 0..rows {
        for ti in 0..t {
            dx[r * t + ti] = dy[r * t * 2 + 2 * ti] + dy[r * t * 2 + 2 * ti + 1];
        }
    }
    dx
}

// ── softmax cross-entropy ────────────────────────────────────────────

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits[batch, classes]`. Returns (loss, softmax probabilities).
pub fn softmax_cross_entropy(
    logits: &[f64],
    targets: &[usize],
    batch: usize,
    classes: usize,
) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for bi in 0..batch {
        let row = &logits[bi * classes..(bi + 1) * classes];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - mx).exp();
        }
        let log_denom = denom.ln() + mx;
        for (j, &v) in row.iter().enumerate() {
            probs[bi * classes + j] = (v - log_denom).exp();
        }
        loss -= logits[bi * classes + targets[bi]] - log_denom;
    }
    (loss / batch as f64, probs)
}

pub fn softmax_cross_entropy_backward(
    probs: &[f64],
    targets: &[usize],
    batch: usize,
    classes: usize,
    dloss: f64,
) -> Vec<f64> {
    let mut dl = probs.to_vec();
    for bi in 0..batch {
        dl[bi * classes + targets[bi]] -= 1.0;
    }
    let scale = dloss / batch as f64;
    for v in dl.iter_mut() {
        *v *= scale;
    }
    dl
}
