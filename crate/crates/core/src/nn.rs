//! Trainable parameter storage, the Adam optimizer, and small building
//! blocks (linear layers, MLPs, embeddings, feature normalization).
//!
//! Parameters and optimizer moments are kept on the 32-bit float grid after
//! every update so that checkpoints round-trip bit-exactly and training can
//! resume byte-identically.

use indexmap::IndexMap;

use crate::graph::{Graph, Var};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

// ── parameter set with Adam state ────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Ordered map of named tensors plus per-parameter first/second moment
/// accumulators and a shared step counter. Shapes are fixed at insertion.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: IndexMap<String, Tensor>,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn insert(&mut self, name: &str, mut value: Tensor) {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        value.quantize_f32();
        self.m.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.v.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Replace a parameter value; the shape is fixed at insertion.
    pub fn set_value(&mut self, name: &str, mut value: Tensor) {
        let slot = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(slot.shape(), value.shape(), "shape of `{name}` is immutable");
        value.quantize_f32();
        *slot = value;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Register `name` into a graph as a grad-requiring leaf.
    pub fn var(&self, graph: &mut Graph, name: &str) -> Var {
        graph.param(name, self.get(name).clone())
    }

    /// Extend a gradient map with zeros for parameters backprop never
    /// reached, so the optimizer contract (one gradient per parameter)
    /// holds even when parts of a network are inactive for a batch.
    pub fn fill_missing_grads(&self, grads: &mut IndexMap<String, Tensor>) {
        for (name, value) in &self.params {
            grads
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
        }
    }

    /// One Adam update. `grads` must contain an entry for every parameter.
    /// Moments advance even where the gradient is zero; all state is
    /// re-quantized to the f32 grid afterwards.
    pub fn adam_step(&mut self, grads: &IndexMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        for name in self.params.keys() {
            if !grads.contains_key(name) {
                return Err(Error::Train(format!("missing gradient for `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = &grads[name];
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} for `{name}` of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                // keep all state exactly f32-representable
                m[i] = m[i] as f32 as f64;
                v[i] = v[i] as f32 as f64;
                pd[i] = pd[i] as f32 as f64;
            }
        }
        Ok(())
    }

    // checkpoint plumbing

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn moments(&self) -> (&IndexMap<String, Tensor>, &IndexMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    pub fn restore(
        params: IndexMap<String, Tensor>,
        m: IndexMap<String, Tensor>,
        v: IndexMap<String, Tensor>,
        step: u64,
    ) -> Self {
        ParameterSet { params, m, v, step }
    }
}

// ── initialization ───────────────────────────────────────────────────

/// He-style normal init scaled by fan-in.
pub fn init_weight(rng: &mut RngStream, rows: usize, cols: usize) -> Tensor {
    let scale = (2.0 / rows as f64).sqrt();
    let t = rng.normal_tensor(&[rows, cols]);
    t.map(|v| v * scale)
}

pub fn init_conv_weight(rng: &mut RngStream, c_out: usize, c_in: usize, kernel: usize) -> Tensor {
    let scale = (2.0 / (c_in * kernel) as f64).sqrt();
    let t = rng.normal_tensor(&[c_out, c_in, kernel]);
    t.map(|v| v * scale)
}

// ── multi-layer perceptron ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

/// Fully-connected network with a configurable activation between layers.
/// Parameters are named `<prefix>.l<i>.w` / `<prefix>.l<i>.b`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl Mlp {
    /// Create and initialize parameters into `params`.
    pub fn new(
        params: &mut ParameterSet,
        prefix: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut RngStream,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        for i in 0..dims.len() - 1 {
            params.insert(
                &format!("{prefix}.l{i}.w"),
                init_weight(rng, dims[i], dims[i + 1]),
            );
            params.insert(&format!("{prefix}.l{i}.b"), Tensor::zeros(&[dims[i + 1]]));
        }
        Mlp {
            prefix: prefix.to_string(),
            dims: dims.to_vec(),
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.dims.len() - 1 {
            let w = params.var(g, &format!("{}.l{i}.w", self.prefix));
            let b = params.var(g, &format!("{}.l{i}.b", self.prefix));
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if i + 2 < self.dims.len() {
                h = match self.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Silu => g.silu(h),
                };
            }
        }
        Ok(h)
    }

    /// Forward pass without building a graph.
    pub fn infer(&self, params: &ParameterSet, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dims[0] {
            return Err(Error::shape(format!(
                "mlp `{}` expects [batch, {}], got {shape:?}",
                self.prefix, self.dims[0]
            )));
        }
        let mut h = x.data().to_vec();
        let mut width = self.dims[0];
        let batch = shape[0];
        for i in 0..self.dims.len() - 1 {
            let w = params.get(&format!("{}.l{i}.w", self.prefix));
            let b = params.get(&format!("{}.l{i}.b", self.prefix));
            let next = self.dims[i + 1];
            let mut out = crate::kernels::matmul(&h, w.data(), batch, width, next);
            for bi in 0..batch {
                for j in 0..next {
                    out[bi * next + j] += b.data()[j];
                }
            }
            if i + 2 < self.dims.len() {
                out = match self.activation {
                    Activation::Relu => crate::kernels::relu(&out),
                    Activation::Silu => crate::kernels::silu(&out),
                };
            }
            h = out;
            width = next;
        }
        Tensor::from_vec(&[batch, width], h)
    }
}

// ── sinusoidal step embedding ────────────────────────────────────────

/// Transformer-style sinusoidal embedding of integer positions, shape
/// `[positions.len(), dim]`. `dim` must be even.
pub fn sinusoidal_embedding(positions: &[usize], dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut data = vec![0.0; positions.len() * dim];
    for (row, &p) in positions.iter().enumerate() {
        for j in 0..half {
            let freq = (-(j as f64) * (10_000f64).ln() / (half.max(2) - 1) as f64).exp();
            let angle = p as f64 * freq;
            data[row * dim + j] = angle.sin();
            data[row * dim + half + j] = angle.cos();
        }
    }
    Tensor::from_vec(&[positions.len(), dim], data).unwrap()
}

/// One-hot rows for categorical conditioning.
pub fn one_hot(indices: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; indices.len() * classes];
    for (row, &c) in indices.iter().enumerate() {
        assert!(c < classes, "one_hot index {c} out of {classes}");
        data[row * classes + c] = 1.0;
    }
    Tensor::from_vec(&[indices.len(), classes], data).unwrap()
}

// ── per-dimension feature normalization ──────────────────────────────

/// Min-max normalizer mapping each feature dimension into `[-1, 1]`.
/// Stored alongside checkpoints so sampling can undo it.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Normalizer {
    /// Fit from rows of width `dim` stored contiguously.
    pub fn fit(rows: &[f64], dim: usize) -> Self {
        assert!(!rows.is_empty() && rows.len() % dim == 0);
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for chunk in rows.chunks_exact(dim) {
            for (d, &v) in chunk.iter().enumerate() {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
        // degenerate dims normalize to 0
        for d in 0..dim {
            if hi[d] - lo[d] < 1e-12 {
                hi[d] = lo[d] + 1.0;
            }
            // keep the affine map exactly representable
            lo[d] = lo[d] as f32 as f64;
            hi[d] = hi[d] as f32 as f64;
        }
        Normalizer { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn encode(&self, row: &mut [f64]) {
        for (d, v) in row.iter_mut().enumerate() {
            *v = 2.0 * (*v - self.lo[d]) / (self.hi[d] - self.lo[d]) - 1.0;
        }
    }

    pub fn decode(&self, row: &mut [f64]) {
        for (d, v) in row.iter_mut().enumerate() {
            *v = (*v + 1.0) * 0.5 * (self.hi[d] - self.lo[d]) + self.lo[d];
        }
    }
}
