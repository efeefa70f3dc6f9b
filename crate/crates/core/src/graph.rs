//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! A [`Graph`] is built fresh for every forward pass: leaves are inserted
//! with [`Graph::leaf`] (constants) or [`Graph::param`] (named trainable
//! tensors), operations append nodes, and [`Graph::backward`] consumes the
//! graph to produce gradients for every grad-requiring leaf. Backward never
//! mutates forward values.

use indexmap::IndexMap;

use crate::kernels;
use crate::tensor::{strides, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: kernels::GroupNormStats,
    },
    Silu(Var),
    Relu(Var),
    SumAll(Var),
    MeanAll(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Down2(Var),
    Up2(Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Computation tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
    named: IndexMap<String, usize>,
}

impl GradStore {
    /// Gradient of a grad-requiring leaf, if it was reached by backprop.
    pub fn of(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradients keyed by parameter name, in insertion order.
    pub fn named(&self) -> IndexMap<String, Tensor> {
        self.named
            .iter()
            .filter_map(|(name, &idx)| self.grads[idx].clone().map(|g| (name.clone(), g)))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; gradients do not flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Unnamed grad-requiring input (e.g. a sample being guided).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Named trainable leaf. Names must be unique within one graph.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        debug_assert!(
            !self.nodes.iter().any(|n| n.name.as_deref() == Some(name)),
            "duplicate parameter `{name}` in one graph"
        );
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    // ── elementwise with trailing-aligned broadcasting ───────────────

    fn binary(&mut self, a: Var, b: Var, which: u8) -> Result<Var> {
        let out_shape = kernels::broadcast_shape(self.shape(a), self.shape(b))?;
        let map_a = kernels::broadcast_index_map(self.shape(a), &out_shape);
        let map_b = kernels::broadcast_index_map(self.shape(b), &out_shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = (0..map_a.len())
            .map(|i| {
                let (x, y) = (av[map_a[i]], bv[map_b[i]]);
                match which {
                    0 => x + y,
                    1 => x - y,
                    _ => x * y,
                }
            })
            .collect();
        let rg = self.requires(a) || self.requires(b);
        let value = Tensor::from_vec(&out_shape, data)?;
        let op = match which {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.requires(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.requires(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul expects [m,k]x[k,n], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        let value = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// 1-d convolution with stride 1 and symmetric zero padding.
    /// `x` is `[batch, c_in, t]`, `w` is `[c_out, c_in, kernel]`, kernel odd.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sw[2] % 2 == 0 {
            return Err(Error::shape(format!(
                "conv1d expects x [b,c,t], w [o,c,odd-k], got {sx:?} and {sw:?}"
            )));
        }
        let (b, c, t, o, k) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
        let data = kernels::conv1d(self.value(x).data(), self.value(w).data(), b, c, t, o, k);
        let rg = self.requires(x) || self.requires(w);
        let value = Tensor::from_vec(&[b, o, t], data)?;
        Ok(self.push(value, Op::Conv1d { x, w }, rg))
    }

    /// Group normalization over `[batch, channels, t]` with affine
    /// parameters `gamma`, `beta` of shape `[channels]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] % groups != 0 {
            return Err(Error::shape(format!(
                "group_norm expects [b,c,t] with c divisible by {groups}, got {sx:?}"
            )));
        }
        if self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(Error::shape("group_norm affine params must be [channels]"));
        }
        let (y, stats) = kernels::group_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            sx[0],
            sx[1],
            sx[2],
            groups,
            eps,
        );
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let value = Tensor::from_vec(&sx, y)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    // ── activations ──────────────────────────────────────────────────

    pub fn silu(&mut self, a: Var) -> Var {
        let data = kernels::silu(self.value(a).data());
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Silu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = kernels::relu(self.value(a).data());
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Relu(a), rg)
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s / n), Op::MeanAll(a), rg)
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.requires(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let base = self.shape(parts[0]).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape(format!(
                    "concat shapes differ outside axis {axis}: {base:?} vs {s:?}"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let pre: usize = base[..axis].iter().product();
        let post: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0; pre * axis_total * post];
        let mut offset = 0;
        for &p in parts {
            let ax = self.shape(p)[axis];
            let src = self.value(p).data();
            for pi in 0..pre {
                let dst_base = (pi * axis_total + offset) * post;
                let src_base = pi * ax * post;
                data[dst_base..dst_base + ax * post]
                    .copy_from_slice(&src[src_base..src_base + ax * post]);
            }
            offset += ax;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        let value = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::shape(format!(
                "slice [{start}, {start}+{len}) on axis {axis} of {s:?}"
            )));
        }
        let pre: usize = s[..axis].iter().product();
        let post: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let src = self.value(a).data();
        let mut data = vec![0.0; pre * len * post];
        for pi in 0..pre {
            let src_base = (pi * s[axis] + start) * post;
            let dst_base = pi * len * post;
            data[dst_base..dst_base + len * post]
                .copy_from_slice(&src[src_base..src_base + len * post]);
        }
        let rg = self.requires(a);
        let value = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(value, Op::Slice { x: a, axis, start }, rg))
    }

    /// Keep every second step on the trailing axis of `[b, c, t]`, t even.
    pub fn downsample2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[2] % 2 != 0 {
            return Err(Error::shape(format!("downsample2 needs [b,c,even-t], got {s:?}")));
        }
        let data = kernels::downsample2(self.value(a).data(), s[0] * s[1], s[2]);
        let rg = self.requires(a);
        let value = Tensor::from_vec(&[s[0], s[1], s[2] / 2], data)?;
        Ok(self.push(value, Op::Down2(a), rg))
    }

    /// Nearest-neighbor ×2 on the trailing axis of `[b, c, t]`.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("upsample2 needs [b,c,t], got {s:?}")));
        }
        let data = kernels::upsample2(self.value(a).data(), s[0] * s[1], s[2]);
        let rg = self.requires(a);
        let value = Tensor::from_vec(&[s[0], s[1], s[2] * 2], data)?;
        Ok(self.push(value, Op::Up2(a), rg))
    }

    // ── losses ───────────────────────────────────────────────────────

    /// Mean softmax cross-entropy of `logits [batch, classes]` against
    /// integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(format!(
                "softmax_cross_entropy expects logits [batch, classes] with one target per row, got {s:?} and {} targets",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(Error::shape(format!("target {t} out of {} classes", s[1])));
        }
        let (loss, probs) =
            kernels::softmax_cross_entropy(self.value(logits).data(), targets, s[0], s[1]);
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Backpropagate from a scalar output. Consumes the graph; gradients are
    /// returned for every grad-requiring leaf that influences `out`.
    pub fn backward(self, out: Var) -> Result<GradStore> {
        if self.value(out).numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar output; got shape {:?} (apply a reduction first)",
                self.shape(out)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[out.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let negate = matches!(node.op, Op::Sub(..));
                    let out_shape = node.value.shape();
                    for (i, v) in [*a, *b].into_iter().enumerate() {
                        if !self.requires(v) {
                            continue;
                        }
                        let mut part =
                            kernels::reduce_to_shape(&dy, out_shape, self.shape(v));
                        if i == 1 && negate {
                            for p in part.iter_mut() {
                                *p = -*p;
                            }
                        }
                        accumulate(&mut grads, v.0, part);
                    }
                }
                Op::Mul(a, b) => {
                    let out_shape = node.value.shape().to_vec();
                    let map_a = kernels::broadcast_index_map(self.shape(*a), &out_shape);
                    let map_b = kernels::broadcast_index_map(self.shape(*b), &out_shape);
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.requires(*a) {
                        let full: Vec<f64> =
                            (0..dy.len()).map(|i| dy[i] * bv[map_b[i]]).collect();
                        let part = kernels::reduce_to_shape(&full, &out_shape, self.shape(*a));
                        accumulate(&mut grads, a.0, part);
                    }
                    if self.requires(*b) {
                        let full: Vec<f64> =
                            (0..dy.len()).map(|i| dy[i] * av[map_a[i]]).collect();
                        let part = kernels::reduce_to_shape(&full, &out_shape, self.shape(*b));
                        accumulate(&mut grads, b.0, part);
                    }
                }
                Op::Scale(a, c) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, a.0, dy.iter().map(|&g| g * c).collect());
                    }
                }
                Op::AddScalar(a) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, a.0, dy.clone());
                    }
                }
                Op::Matmul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    let (da, db) = kernels::matmul_backward(
                        self.value(*a).data(),
                        self.value(*b).data(),
                        &dy,
                        m,
                        k,
                        nn,
                    );
                    if self.requires(*a) {
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::Conv1d { x, w } => {
                    let (sx, sw) = (self.shape(*x), self.shape(*w));
                    let (dx, dw) = kernels::conv1d_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &dy,
                        sx[0],
                        sx[1],
                        sx[2],
                        sw[0],
                        sw[2],
                    );
                    if self.requires(*x) {
                        accumulate(&mut grads, x.0, dx);
                    }
                    if self.requires(*w) {
                        accumulate(&mut grads, w.0, dw);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let sx = self.shape(*x);
                    let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                        self.value(*x).data(),
                        self.value(*gamma).data(),
                        &dy,
                        stats,
                        sx[0],
                        sx[1],
                        sx[2],
                        *groups,
                    );
                    if self.requires(*x) {
                        accumulate(&mut grads, x.0, dx);
                    }
                    if self.requires(*gamma) {
                        accumulate(&mut grads, gamma.0, dgamma);
                    }
                    if self.requires(*beta) {
                        accumulate(&mut grads, beta.0, dbeta);
                    }
                }
                Op::Silu(a) => {
                    if self.requires(*a) {
                        let dx = kernels::silu_backward(self.value(*a).data(), &dy);
                        accumulate(&mut grads, a.0, dx);
                    }
                }
                Op::Relu(a) => {
                    if self.requires(*a) {
                        let dx = kernels::relu_backward(self.value(*a).data(), &dy);
                        accumulate(&mut grads, a.0, dx);
                    }
                }
                Op::SumAll(a) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, a.0, vec![dy[0]; self.value(*a).numel()]);
                    }
                }
                Op::MeanAll(a) => {
                    if self.requires(*a) {
                        let n = self.value(*a).numel();
                        accumulate(&mut grads, a.0, vec![dy[0] / n as f64; n]);
                    }
                }
                Op::Reshape(a) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, a.0, dy.clone());
                    }
                }
                Op::Concat { parts, axis } => {
                    let out_shape = node.value.shape();
                    let pre: usize = out_shape[..*axis].iter().product();
                    let post: usize = out_shape[*axis + 1..].iter().product();
                    let total = out_shape[*axis];
                    let mut offset = 0;
                    for &p in parts {
                        let ax = self.shape(p)[*axis];
                        if self.requires(p) {
                            let mut part = vec![0.0; pre * ax * post];
                            for pi in 0..pre {
                                let src_base = (pi * total + offset) * post;
                                let dst_base = pi * ax * post;
                                part[dst_base..dst_base + ax * post]
                                    .copy_from_slice(&dy[src_base..src_base + ax * post]);
                            }
                            accumulate(&mut grads, p.0, part);
                        }
                        offset += ax;
                    }
                }
                Op::Slice { x, axis, start } => {
                    if self.requires(*x) {
                        let sx = self.shape(*x);
                        let len = node.value.shape()[*axis];
                        let pre: usize = sx[..*axis].iter().product();
                        let post: usize = sx[*axis + 1..].iter().product();
                        let mut dx = vec![0.0; self.value(*x).numel()];
                        for pi in 0..pre {
                            let dst_base = (pi * sx[*axis] + start) * post;
                            let src_base = pi * len * post;
                            dx[dst_base..dst_base + len * post]
                                .copy_from_slice(&dy[src_base..src_base + len * post]);
                        }
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                Op::Down2(a) => {
                    if self.requires(*a) {
                        let s = self.shape(*a);
                        let dx = kernels::downsample2_backward(&dy, s[0] * s[1], s[2]);
                        accumulate(&mut grads, a.0, dx);
                    }
                }
                Op::Up2(a) => {
                    if self.requires(*a) {
                        let s = self.shape(*a);
                        let dx = kernels::upsample2_backward(&dy, s[0] * s[1], s[2]);
                        accumulate(&mut grads, a.0, dx);
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    probs,
                } => {
                    if self.requires(*logits) {
                        let s = self.shape(*logits);
                        let dl = kernels::softmax_cross_entropy_backward(
                            probs, targets, s[0], s[1], dy[0],
                        );
                        accumulate(&mut grads, logits.0, dl);
                    }
                }
            }
        }

        let mut named = IndexMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                named.insert(name.clone(), idx);
            }
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                g.map(|data| Tensor::from_vec(node.value.shape(), data).expect("grad shape"))
            })
            .collect();
        Ok(GradStore { grads, named })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, part: Vec<f64>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, p) in existing.iter_mut().zip(part) {
                *e += p;
            }
        }
        slot @ None => *slot = Some(part),
    }
}

/// Convenience: flat index helpers used in tests.
pub fn flat_index(shape: &[usize], coords: &[usize]) -> usize {
    strides(shape)
        .iter()
        .zip(coords)
        .map(|(s, c)| s * c)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference;
    use crate::rng::RngStream;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> value 9, gradient 6
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.of(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let y = g.sum_all(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_graph_has_no_gradient_path() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let c = g.leaf(Tensor::scalar(5.0));
        let y = g.mul(c, c).unwrap();
        let z = g.sum_all(y);
        let grads = g.backward(z).unwrap();
        // x never feeds the output: no gradient recorded
        assert!(grads.of(x).is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        // [2,3] + [3] : bias gradient sums over rows
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap());
        let b = g.input(Tensor::from_vec(&[3], vec![0.0; 3]).unwrap());
        let y = g.add(x, b).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.of(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_does_not_mutate_forward_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        let snapshot: Vec<Vec<f64>> = (0..g.len())
            .map(|i| g.value(Var(i)).data().to_vec())
            .collect();
        let y_val = g.value(y).clone();
        let _ = {
            // backward consumes the graph; compare values captured before
            let g2 = {
                let mut g2 = Graph::new();
                let x2 = g2.input(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
                let y2 = g2.mul(x2, x2).unwrap();
                let _ = g2.sum_all(y2);
                g2
            };
            drop(g2);
        };
        let grads = g.backward(s).unwrap();
        assert!(grads.of(x).is_some());
        assert_eq!(y_val.data(), snapshot[y.0].as_slice());
    }

    #[test]
    fn mlp_forward_matches_loop_oracle() {
        // 2-layer MLP vs explicit loops
        let mut rng = RngStream::new(42, 0);
        let x = rng.normal_tensor(&[3, 5]);
        let w1 = rng.normal_tensor(&[5, 4]);
        let b1 = rng.normal_tensor(&[4]);
        let w2 = rng.normal_tensor(&[4, 2]);
        let b2 = rng.normal_tensor(&[2]);

        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let w1v = g.leaf(w1.clone());
        let b1v = g.leaf(b1.clone());
        let w2v = g.leaf(w2.clone());
        let b2v = g.leaf(b2.clone());
        let h = g.matmul(xv, w1v).unwrap();
        let h = g.add(h, b1v).unwrap();
        let h = g.relu(h);
        let o = g.matmul(h, w2v).unwrap();
        let o = g.add(o, b2v).unwrap();
        let got = g.value(o).clone();

        // independent loop computation
        let mut hidden = vec![0.0; 3 * 4];
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = b1.data()[j];
                for k in 0..5 {
                    acc += x.data()[i * 5 + k] * w1.data()[k * 4 + j];
                }
                hidden[i * 4 + j] = acc.max(0.0);
            }
        }
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = b2.data()[j];
                for k in 0..4 {
                    acc += hidden[i * 4 + k] * w2.data()[k * 2 + j];
                }
                assert_close(got.data()[i * 2 + j], acc, 1e-12);
            }
        }
    }

    #[test]
    fn identity_linear_layer_is_identity() {
        let v = Tensor::from_vec(&[1, 3], vec![0.3, -1.2, 2.5]).unwrap();
        let eye = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let mut g = Graph::new();
        let x = g.leaf(v.clone());
        let w = g.leaf(eye);
        let b = g.leaf(Tensor::zeros(&[3]));
        let y = g.matmul(x, w).unwrap();
        let y = g.add(y, b).unwrap();
        assert_eq!(g.value(y).data(), v.data());
    }

    #[test]
    fn three_layer_net_matches_finite_differences() {
        let mut rng = RngStream::new(7, 1);
        let x0 = rng.normal_tensor(&[2, 6]);
        let w1 = rng.normal_tensor(&[6, 5]);
        let w2 = rng.normal_tensor(&[5, 4]);
        let w3 = rng.normal_tensor(&[4, 1]);
        let inputs = vec![x0, w1, w2, w3];

        let f = |vals: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(vals[0].clone());
            let w1 = g.leaf(vals[1].clone());
            let w2 = g.leaf(vals[2].clone());
            let w3 = g.leaf(vals[3].clone());
            let h = g.matmul(x, w1).unwrap();
            let h = g.silu(h);
            let h = g.matmul(h, w2).unwrap();
            let h = g.relu(h);
            let o = g.matmul(h, w3).unwrap();
            let m = g.mean_all(o);
            g.value(m).item()
        };

        // analytic gradients
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let h = g.matmul(vars[0], vars[1]).unwrap();
        let h = g.silu(h);
        let h = g.matmul(h, vars[2]).unwrap();
        let h = g.relu(h);
        let o = g.matmul(h, vars[3]).unwrap();
        let m = g.mean_all(o);
        let grads = g.backward(m).unwrap();

        for (i, var) in vars.iter().enumerate() {
            let analytic = grads.of(*var).unwrap();
            let numeric = finite_difference(&f, &inputs, i, 1e-5);
            let mut max_rel = 0.0f64;
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-4, "input {i}: max relative error {max_rel}");
        }
    }
}
