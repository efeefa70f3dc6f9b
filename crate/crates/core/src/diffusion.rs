//! Denoising diffusion over state windows.
//!
//! Windows are `[batch, dim, len]` tensors in a normalized model space.
//! The forward process follows a fixed variance schedule; the reverse
//! process predicts noise and can be constrained by inpainting: fixed time
//! indices are overwritten with their target values (noised to the current
//! step) after every reverse step, so they match exactly at step zero.

use indexmap::IndexMap;

use crate::checkpoint::Checkpoint;
use crate::dataset::{Trajectory, TrajectoryDataset};
use crate::graph::Graph;
use crate::nn::{AdamConfig, Normalizer, ParameterSet};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::unet::{TemporalUnet, UnetConfig};
use crate::{Error, Result};

// ── schedule ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::config("schedule", format!("unknown kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        }
    }
}

/// Noise-variance schedule: per-step `alpha_m`, cumulative products, and
/// fixed reverse variances `sigma_m^2 = (1 - abar_{m-1}) / (1 - abar_m) *
/// (1 - alpha_m)` with `sigma_1 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    /// Standard schedule of `m_steps` steps. The terminal cumulative product
    /// must land below 1e-3 (near pure noise); `Linear` needs roughly a
    /// dozen steps for that, `Cosine` works at any length.
    pub fn new(kind: ScheduleKind, m_steps: usize) -> Result<Self> {
        if m_steps == 0 {
            return Err(Error::config("m_steps", "must be >= 1"));
        }
        // Tail betas are capped at 0.97: at the short step counts used here
        // an uncapped terminal step scales the reverse update by 1/sqrt(a)
        // ~ 30x and small prediction errors explode the chain.
        const BETA_MAX: f64 = 0.98;
        let alphas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |m: f64| {
                    let v = ((m / m_steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
                    v.cos().powi(2)
                };
                let f0 = f(0.0);
                (1..=m_steps)
                    .map(|m| {
                        let beta = 1.0 - (f(m as f64) / f0) / (f((m - 1) as f64) / f0);
                        1.0 - beta.clamp(0.0, BETA_MAX)
                    })
                    .collect()
            }
            ScheduleKind::Linear => {
                // classic 1e-4..0.02 range rescaled to the step count
                let scale = 1000.0 / m_steps as f64;
                let lo = 1e-4 * scale;
                let hi = 0.02 * scale;
                (0..m_steps)
                    .map(|i| {
                        let beta = if m_steps == 1 {
                            lo
                        } else {
                            lo + (hi - lo) * i as f64 / (m_steps - 1) as f64
                        };
                        1.0 - beta.min(BETA_MAX)
                    })
                    .collect()
            }
        };
        let sched = DiffusionSchedule::from_alphas(alphas)?;
        let terminal = sched.alpha_bar(m_steps);
        if terminal >= 1e-3 {
            return Err(Error::config(
                "m_steps",
                format!("terminal cumulative product {terminal:.2e} >= 1e-3; increase the step count"),
            ));
        }
        Ok(sched)
    }

    /// Build from explicit per-step alphas. Skips the near-noise terminal
    /// requirement so degenerate test schedules are expressible.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::config("alphas", "must be non-empty"));
        }
        if alphas.iter().any(|&a| a <= 0.0 || a > 1.0) {
            return Err(Error::config("alphas", "every alpha must lie in (0, 1]"));
        }
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let mut sigmas = Vec::with_capacity(alphas.len());
        for m in 0..alphas.len() {
            if m == 0 {
                sigmas.push(0.0);
            } else {
                let var = (1.0 - alpha_bars[m - 1]) / (1.0 - alpha_bars[m]) * (1.0 - alphas[m]);
                sigmas.push(var.max(0.0).sqrt());
            }
        }
        Ok(DiffusionSchedule {
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// `alpha_m` for 1-based `m`.
    pub fn alpha(&self, m: usize) -> f64 {
        self.alphas[m - 1]
    }

    /// Cumulative product up to 1-based `m`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, m: usize) -> f64 {
        if m == 0 {
            1.0
        } else {
            self.alpha_bars[m - 1]
        }
    }

    pub fn sigma(&self, m: usize) -> f64 {
        self.sigmas[m - 1]
    }
}

// ── forward process ──────────────────────────────────────────────────

/// Closed form of the iterated forward transitions:
/// `sqrt(abar_m) x0 + sqrt(1 - abar_m) noise`.
pub fn q_sample(x0: &Tensor, m: usize, noise: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(Error::shape(format!(
            "q_sample noise shape {:?} != x0 shape {:?}",
            noise.shape(),
            x0.shape()
        )));
    }
    if m == 0 || m > sched.steps() {
        return Err(Error::config("m", format!("step {m} outside 1..={}", sched.steps())));
    }
    let ab = sched.alpha_bar(m);
    let (ca, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data: Vec<f64> = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &e)| ca * x + cn * e)
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

// ── model interface ──────────────────────────────────────────────────

/// Anything that predicts the noise content of a window batch.
pub trait NoiseModel {
    /// `x` is `[batch, dim, len]`, `steps` one diffusion step per batch row.
    fn predict(&self, x: &Tensor, steps: &[usize], level: usize) -> Result<Tensor>;
}

/// Differentiable objective used to bias sampling.
pub trait Guide {
    /// Objective value and gradient w.r.t. `x` (`[batch, dim, len]`), in
    /// model space. The gradient must have the shape of `x`.
    fn value_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;
}

/// Inpainting constraint: window time index → state vector.
/// Values are in the caller's space; normalize before sampling in model
/// space. For planning at least index 0 is pinned.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Constraint {
    pub fixed: Vec<(usize, Vec<f64>)>,
}

impl Constraint {
    pub fn pin(mut self, index: usize, state: Vec<f64>) -> Self {
        self.fixed.push((index, state));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }

    fn validate(&self, window: usize, dim: usize) -> Result<()> {
        for (idx, state) in &self.fixed {
            if *idx >= window {
                return Err(Error::config(
                    "constraint",
                    format!("index {idx} outside window of {window}"),
                ));
            }
            if state.len() != dim {
                return Err(Error::config(
                    "constraint",
                    format!("state dim {} != {dim}", state.len()),
                ));
            }
        }
        Ok(())
    }
}

// ── reverse process ──────────────────────────────────────────────────

/// One reverse step `x_m -> x_{m-1}` for a whole batch, with optional
/// gradient guidance and per-window inpainting constraints.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step(
    model: &dyn NoiseModel,
    sched: &DiffusionSchedule,
    x_m: &Tensor,
    m: usize,
    level: usize,
    constraints: &[Constraint],
    rng: &mut RngStream,
    guide: Option<&dyn Guide>,
    guide_scale: f64,
) -> Result<Tensor> {
    let shape = x_m.shape().to_vec();
    let (batch, dim, window) = (shape[0], shape[1], shape[2]);
    if constraints.len() != batch {
        return Err(Error::config(
            "constraints",
            format!("{} constraint sets for batch {batch}", constraints.len()),
        ));
    }
    let steps = vec![m; batch];
    let eps = model.predict(x_m, &steps, level)?;
    if eps.shape() != shape.as_slice() {
        return Err(Error::shape(format!(
            "model returned {:?} for input {:?}",
            eps.shape(),
            shape
        )));
    }

    let alpha = sched.alpha(m);
    let coeff = (1.0 - alpha) / (1.0 - sched.alpha_bar(m)).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = sched.sigma(m);

    let mut mean: Vec<f64> = x_m
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| inv_sqrt_alpha * (x - coeff * e))
        .collect();

    if let Some(guide) = guide {
        if guide_scale != 0.0 && sigma > 0.0 {
            let (_, grad) = guide.value_grad(x_m)?;
            if grad.shape() != shape.as_slice() {
                return Err(Error::shape("guide gradient shape mismatch"));
            }
            let s = guide_scale * sigma * sigma;
            for (mv, &g) in mean.iter_mut().zip(grad.data()) {
                *mv += s * g;
            }
        }
    }

    if sigma > 0.0 {
        for v in mean.iter_mut() {
            *v += sigma * rng.normal();
        }
    }

    // model space is normalized to [-1, 1] and healthy chain states stay
    // within a few units; clamping only reins in divergent outliers
    for v in mean.iter_mut() {
        *v = v.clamp(-3.0, 3.0);
    }

    // inpaint: overwrite constrained indices with targets noised to m-1
    let prev = m - 1;
    let (ca, cn) = (sched.alpha_bar(prev).sqrt(), (1.0 - sched.alpha_bar(prev)).sqrt());
    for (bi, cons) in constraints.iter().enumerate() {
        for (idx, state) in &cons.fixed {
            for d in 0..dim {
                let flat = (bi * dim + d) * window + idx;
                mean[flat] = if prev == 0 {
                    state[d]
                } else {
                    ca * state[d] + cn * rng.normal()
                };
            }
        }
    }
    Tensor::from_vec(&shape, mean)
}

/// Run the full reverse chain from Gaussian noise; returns the step-0
/// window batch `[batch, dim, window]`. Pure function of the model,
/// schedule, constraints, and stream state.
#[allow(clippy::too_many_arguments)]
pub fn sample_windows(
    model: &dyn NoiseModel,
    sched: &DiffusionSchedule,
    dim: usize,
    window: usize,
    level: usize,
    constraints: &[Constraint],
    rng: &mut RngStream,
    guide: Option<&dyn Guide>,
    guide_scale: f64,
) -> Result<Tensor> {
    if constraints.is_empty() {
        return Err(Error::config("constraints", "at least one window must be requested"));
    }
    for c in constraints {
        c.validate(window, dim)?;
    }
    let batch = constraints.len();
    let mut x = rng.normal_tensor(&[batch, dim, window]);
    for m in (1..=sched.steps()).rev() {
        x = denoise_step(model, sched, &x, m, level, constraints, rng, guide, guide_scale)?;
    }
    Ok(x)
}

// ── sparse views ─────────────────────────────────────────────────────

/// States at indices `offset, offset+j, ..., offset+j*k` of a trajectory,
/// time-major (`(k+1) * state_dim` values).
pub fn sparse_view(traj: &Trajectory, j: usize, k: usize, offset: usize) -> Result<Vec<f64>> {
    if j == 0 || k == 0 {
        return Err(Error::config("sparse_view", "stride and jump count must be >= 1"));
    }
    let n = traj.len();
    if offset + j * k >= n {
        return Err(Error::config(
            "sparse_view",
            format!("window [{offset}, {offset}+{j}*{k}] exceeds trajectory of {n} states"),
        ));
    }
    let mut out = Vec::with_capacity((k + 1) * traj.state_dim);
    for step in 0..=k {
        out.extend(traj.state(offset + step * j).iter().map(|&v| v as f64));
    }
    Ok(out)
}

/// Time-major window (`len * dim`) to channel-major (`dim * len`).
pub fn window_to_channels(window: &[f64], dim: usize) -> Vec<f64> {
    let len = window.len() / dim;
    let mut out = vec![0.0; window.len()];
    for t in 0..len {
        for d in 0..dim {
            out[d * len + t] = window[t * dim + d];
        }
    }
    out
}

/// Channel-major window back to time-major states.
pub fn channels_to_window(channels: &[f64], dim: usize) -> Vec<f64> {
    let len = channels.len() / dim;
    let mut out = vec![0.0; channels.len()];
    for t in 0..len {
        for d in 0..dim {
            out[t * dim + d] = channels[d * len + t];
        }
    }
    out
}

// ── trainable denoiser bundle ────────────────────────────────────────

/// A temporal U-net, its parameters, the feature normalizer, and the
/// schedule: everything needed to train and sample.
pub struct Denoiser {
    pub unet: TemporalUnet,
    pub params: ParameterSet,
    pub normalizer: Normalizer,
    pub schedule: DiffusionSchedule,
    pub schedule_kind: ScheduleKind,
}

impl NoiseModel for Denoiser {
    fn predict(&self, x: &Tensor, steps: &[usize], level: usize) -> Result<Tensor> {
        self.unet.infer(&self.params, x, steps, level)
    }
}

impl Denoiser {
    pub fn new(
        cfg: UnetConfig,
        normalizer: Normalizer,
        kind: ScheduleKind,
        m_steps: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut params = ParameterSet::new();
        let unet = TemporalUnet::new(&mut params, cfg, rng);
        Ok(Denoiser {
            unet,
            params,
            normalizer,
            schedule: DiffusionSchedule::new(kind, m_steps)?,
            schedule_kind: kind,
        })
    }

    pub fn dim(&self) -> usize {
        self.unet.cfg.in_channels
    }

    /// Normalize a raw state into model space.
    pub fn encode_state(&self, state: &[f64]) -> Vec<f64> {
        let mut s = state.to_vec();
        self.normalizer.encode(&mut s);
        s
    }

    /// Sample windows for raw-space constraints; returns one time-major
    /// raw-space window (`window * dim`) per constraint set.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        &self,
        window: usize,
        level: usize,
        constraints: &[Constraint],
        rng: &mut RngStream,
        guide: Option<&dyn Guide>,
        guide_scale: f64,
    ) -> Result<Vec<Vec<f64>>> {
        let dim = self.dim();
        let encoded: Vec<Constraint> = constraints
            .iter()
            .map(|c| Constraint {
                fixed: c
                    .fixed
                    .iter()
                    .map(|(i, s)| (*i, self.encode_state(s)))
                    .collect(),
            })
            .collect();
        let out = sample_windows(
            self,
            &self.schedule,
            dim,
            window,
            level,
            &encoded,
            rng,
            guide,
            guide_scale,
        )?;
        let mut result = Vec::with_capacity(constraints.len());
        for (bi, cons) in constraints.iter().enumerate() {
            let channels = &out.data()[bi * dim * window..(bi + 1) * dim * window];
            let mut time_major = channels_to_window(channels, dim);
            for t in 0..window {
                self.normalizer.decode(&mut time_major[t * dim..(t + 1) * dim]);
            }
            // pinned indices carry the caller's exact values, not the
            // decode of their encoding
            for (idx, state) in &cons.fixed {
                time_major[idx * dim..(idx + 1) * dim].copy_from_slice(state);
            }
            result.push(time_major);
        }
        Ok(result)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "denoiser");
        ck.set_meta("in_channels", self.unet.cfg.in_channels);
        ck.set_meta("base_width", self.unet.cfg.base_width);
        ck.set_meta("resolutions", self.unet.cfg.resolutions);
        ck.set_meta("kernel", self.unet.cfg.kernel);
        ck.set_meta("embed_dim", self.unet.cfg.embed_dim);
        ck.set_meta("levels", self.unet.cfg.levels);
        ck.set_meta("groups", self.unet.cfg.groups);
        ck.set_meta("m_steps", self.schedule.steps());
        ck.set_meta("schedule", self.schedule_kind.name());
        ck.insert(
            "norm.lo",
            Tensor::from_vec(&[self.normalizer.lo.len()], self.normalizer.lo.clone()).unwrap(),
        );
        ck.insert(
            "norm.hi",
            Tensor::from_vec(&[self.normalizer.hi.len()], self.normalizer.hi.clone()).unwrap(),
        );
        ck.put_params("model", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = UnetConfig {
            in_channels: ck.meta_parsed("in_channels")?,
            base_width: ck.meta_parsed("base_width")?,
            resolutions: ck.meta_parsed("resolutions")?,
            kernel: ck.meta_parsed("kernel")?,
            embed_dim: ck.meta_parsed("embed_dim")?,
            levels: ck.meta_parsed("levels")?,
            groups: ck.meta_parsed("groups")?,
        };
        let kind = ScheduleKind::parse(ck.meta("schedule").unwrap_or("cosine"))?;
        let m_steps: usize = ck.meta_parsed("m_steps")?;
        let normalizer = Normalizer {
            lo: ck.tensor("norm.lo")?.data().to_vec(),
            hi: ck.tensor("norm.hi")?.data().to_vec(),
        };
        // wiring must be rebuilt with the same names; parameters then come
        // from the checkpoint rather than the fresh initialization
        let mut scratch = RngStream::new(0, 0);
        let mut fresh = ParameterSet::new();
        let unet = TemporalUnet::new(&mut fresh, cfg, &mut scratch);
        let params = ck.get_params("model")?;
        for name in fresh.names() {
            params
                .params()
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        }
        Ok(Denoiser {
            unet,
            params,
            normalizer,
            schedule: DiffusionSchedule::new(kind, m_steps)?,
            schedule_kind: kind,
        })
    }
}

// ── training ─────────────────────────────────────────────────────────

/// One denoising-objective step on a batch of normalized windows
/// `[batch, dim, len]` at a fixed hierarchy level. Per-sample steps are
/// drawn uniformly, noise is Gaussian, and the squared error at
/// `constrained` time indices is zeroed. Returns the loss (sum of squared
/// errors over contributing elements, averaged over the batch).
pub fn train_step(
    unet: &TemporalUnet,
    params: &mut ParameterSet,
    sched: &DiffusionSchedule,
    batch_x0: &Tensor,
    level: usize,
    constrained: &[usize],
    adam: &AdamConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    let shape = batch_x0.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!("expected [b, d, w] windows, got {shape:?}")));
    }
    let (batch, dim, window) = (shape[0], shape[1], shape[2]);
    if batch == 0 {
        return Err(Error::Train("empty batch".into()));
    }

    let steps: Vec<usize> = (0..batch).map(|_| 1 + rng.index(sched.steps())).collect();
    let noise = rng.normal_tensor(&shape);

    // per-sample closed-form forward
    let mut x_m = vec![0.0; batch_x0.numel()];
    for bi in 0..batch {
        let ab = sched.alpha_bar(steps[bi]);
        let (ca, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in bi * dim * window..(bi + 1) * dim * window {
            x_m[i] = ca * batch_x0.data()[i] + cn * noise.data()[i];
        }
    }
    let x_m = Tensor::from_vec(&shape, x_m)?;

    let mut mask = vec![1.0; batch_x0.numel()];
    for bi in 0..batch {
        for d in 0..dim {
            for &idx in constrained {
                if idx < window {
                    mask[(bi * dim + d) * window + idx] = 0.0;
                }
            }
        }
    }

    let mut g = Graph::new();
    let x_var = g.leaf(x_m);
    let eps_hat = unet.forward(&mut g, params, x_var, &steps, level)?;
    let eps_var = g.leaf(noise);
    let mask_var = g.leaf(Tensor::from_vec(&shape, mask)?);
    let diff = g.sub(eps_var, eps_hat)?;
    let sq = g.mul(diff, diff)?;
    let masked = g.mul(sq, mask_var)?;
    let total = g.sum_all(masked);
    let loss = g.scale(total, 1.0 / batch as f64);
    let loss_value = g.value(loss).item();

    let grads = g.backward(loss)?;
    let mut named = grads.named();
    params.fill_missing_grads(&mut named);
    params.adam_step(&named, adam)?;
    Ok(loss_value)
}

/// Draw a training batch of normalized windows at stride `j` with `k`
/// jumps from trajectories long enough to hold them.
pub fn sample_window_batch(
    ds: &TrajectoryDataset,
    normalizer: &Normalizer,
    j: usize,
    k: usize,
    batch: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let eligible: Vec<usize> = (0..ds.trajectories.len())
        .filter(|&i| ds.trajectories[i].len() > j * k)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Train(format!(
            "no trajectory long enough for stride {j} x {k} windows"
        )));
    }
    let dim = ds.state_dim;
    let window = k + 1;
    let mut data = vec![0.0; batch * dim * window];
    for bi in 0..batch {
        let traj = &ds.trajectories[eligible[rng.index(eligible.len())]];
        let max_offset = traj.len() - 1 - j * k;
        let offset = rng.index(max_offset + 1);
        let mut w = sparse_view(traj, j, k, offset)?;
        for t in 0..window {
            normalizer.encode(&mut w[t * dim..(t + 1) * dim]);
        }
        let channels = window_to_channels(&w, dim);
        data[bi * dim * window..(bi + 1) * dim * window].copy_from_slice(&channels);
    }
    Tensor::from_vec(&[batch, dim, window], data)
}

/// Fit the feature normalizer over every state in a dataset.
pub fn fit_normalizer(ds: &TrajectoryDataset) -> Normalizer {
    let rows: Vec<f64> = ds
        .trajectories
        .iter()
        .flat_map(|t| t.states.iter().map(|&v| v as f64))
        .collect();
    Normalizer::fit(&rows, ds.state_dim)
}

// ── level utilities ──────────────────────────────────────────────────

/// Uniform level draw in `1..=levels`, with the per-level batch counters
/// callers use for frequency reporting.
pub fn draw_level(levels: usize, rng: &mut RngStream) -> usize {
    1 + rng.index(levels)
}

/// Counts of level draws, used by training manifests.
#[derive(Debug, Clone, Default)]
pub struct LevelCounter {
    pub counts: IndexMap<usize, u64>,
}

impl LevelCounter {
    pub fn record(&mut self, level: usize) {
        *self.counts.entry(level).or_insert(0) += 1;
    }
}
