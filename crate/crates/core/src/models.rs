//! Supervised helper models: inverse dynamics, reward, and the plan-depth
//! predictor.
//!
//! All three are small ReLU MLPs trained with Adam on pairs drawn from a
//! trajectory dataset. Inputs are min-max normalized; actions are clamped
//! to the environment bounds on the way out.

use crate::checkpoint::Checkpoint;
use crate::dataset::TrajectoryDataset;
use crate::graph::Graph;
use crate::nn::{Activation, AdamConfig, Mlp, Normalizer, ParameterSet};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Shared knobs for the helper-model training loops.
#[derive(Debug, Clone, Copy)]
pub struct AuxTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub hidden: usize,
}

impl Default for AuxTrainConfig {
    fn default() -> Self {
        AuxTrainConfig {
            epochs: 2,
            batch: 256,
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            hidden: 256,
        }
    }
}

fn batches_for(pairs: usize, cfg: &AuxTrainConfig) -> usize {
    ((pairs * cfg.epochs).div_ceil(cfg.batch)).max(1)
}

// ── inverse dynamics ─────────────────────────────────────────────────

/// MLP mapping `(s_t, s_{t+1})` to the action that connects them. The
/// network sees the pair as `[s_t, s_{t+1} - s_t]`; the difference carries
/// the action signal and makes the regression near-linear.
pub struct InverseDynModel {
    mlp: Mlp,
    params: ParameterSet,
    input_norm: Normalizer,
    pub state_dim: usize,
    pub action_dim: usize,
}

fn pair_features(s: &[f64], s_next: &[f64]) -> Vec<f64> {
    s.iter()
        .copied()
        .chain(s.iter().zip(s_next).map(|(a, b)| b - a))
        .collect()
}

/// Fit on every consecutive state pair with mean squared action error.
pub fn train_invdyn(
    ds: &TrajectoryDataset,
    cfg: &AuxTrainConfig,
    rng: &mut RngStream,
) -> Result<InverseDynModel> {
    if ds.trajectories.iter().all(|t| t.actions.is_empty()) {
        return Err(Error::Train("dataset has no actions".into()));
    }
    let (sd, ad) = (ds.state_dim, ds.action_dim);
    let pairs = transition_index(ds);
    let mut inputs = Vec::with_capacity(pairs.len() * 2 * sd);
    let mut targets = Vec::with_capacity(pairs.len() * ad);
    for &(ti, i) in &pairs {
        let t = &ds.trajectories[ti];
        inputs.extend(pair_features(&t.state_f64(i), &t.state_f64(i + 1)));
        targets.extend(t.action(i).iter().map(|&v| v as f64));
    }
    let input_norm = Normalizer::fit(&inputs, 2 * sd);

    let mut params = ParameterSet::new();
    let mlp = Mlp::new(
        &mut params,
        "invdyn",
        &[2 * sd, cfg.hidden, cfg.hidden, ad],
        Activation::Relu,
        rng,
    );
    regress(
        &mlp,
        &mut params,
        &input_norm,
        &inputs,
        2 * sd,
        &targets,
        ad,
        cfg,
        rng,
    )?;
    Ok(InverseDynModel {
        mlp,
        params,
        input_norm,
        state_dim: sd,
        action_dim: ad,
    })
}

impl InverseDynModel {
    /// Predicted action for a consecutive state pair, clamped to bounds.
    pub fn infer_action(&self, s: &[f64], s_next: &[f64]) -> Vec<f64> {
        let mut row = pair_features(s, s_next);
        self.input_norm.encode(&mut row);
        let x = Tensor::from_vec(&[1, 2 * self.state_dim], row).unwrap();
        let out = self.mlp.infer(&self.params, &x).unwrap();
        out.data().iter().map(|&v| v.clamp(-1.0, 1.0)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = mlp_checkpoint("invdyn", &self.mlp, &self.params, &self.input_norm);
        ck.set_meta("state_dim", self.state_dim);
        ck.set_meta("action_dim", self.action_dim);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (mlp, params, input_norm) = mlp_from_checkpoint(ck, "invdyn")?;
        Ok(InverseDynModel {
            mlp,
            params,
            input_norm,
            state_dim: ck.meta_parsed("state_dim")?,
            action_dim: ck.meta_parsed("action_dim")?,
        })
    }
}

// ── reward model ─────────────────────────────────────────────────────

/// MLP mapping `(s_t, a_t)` to the scalar reward.
pub struct RewardModel {
    mlp: Mlp,
    params: ParameterSet,
    input_norm: Normalizer,
    pub state_dim: usize,
    pub action_dim: usize,
}

pub fn train_reward(
    ds: &TrajectoryDataset,
    cfg: &AuxTrainConfig,
    rng: &mut RngStream,
) -> Result<RewardModel> {
    let (sd, ad) = (ds.state_dim, ds.action_dim);
    let pairs = transition_index(ds);
    if pairs.is_empty() {
        return Err(Error::Train("dataset has no transitions".into()));
    }
    let mut inputs = Vec::with_capacity(pairs.len() * (sd + ad));
    let mut targets = Vec::with_capacity(pairs.len());
    for &(ti, i) in &pairs {
        let t = &ds.trajectories[ti];
        inputs.extend(t.state(i).iter().map(|&v| v as f64));
        inputs.extend(t.action(i).iter().map(|&v| v as f64));
        targets.push(t.rewards[i] as f64);
    }
    let input_norm = Normalizer::fit(&inputs, sd + ad);
    let mut params = ParameterSet::new();
    let mlp = Mlp::new(
        &mut params,
        "reward",
        &[sd + ad, cfg.hidden, cfg.hidden, 1],
        Activation::Relu,
        rng,
    );
    regress(
        &mlp,
        &mut params,
        &input_norm,
        &inputs,
        sd + ad,
        &targets,
        1,
        cfg,
        rng,
    )?;
    Ok(RewardModel {
        mlp,
        params,
        input_norm,
        state_dim: sd,
        action_dim: ad,
    })
}

impl RewardModel {
    pub fn infer_reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let mut row: Vec<f64> = s.iter().chain(a.iter()).copied().collect();
        self.input_norm.encode(&mut row);
        let x = Tensor::from_vec(&[1, self.state_dim + self.action_dim], row).unwrap();
        self.mlp.infer(&self.params, &x).unwrap().item()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = mlp_checkpoint("reward", &self.mlp, &self.params, &self.input_norm);
        ck.set_meta("state_dim", self.state_dim);
        ck.set_meta("action_dim", self.action_dim);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (mlp, params, input_norm) = mlp_from_checkpoint(ck, "reward")?;
        Ok(RewardModel {
            mlp,
            params,
            input_norm,
            state_dim: ck.meta_parsed("state_dim")?,
            action_dim: ck.meta_parsed("action_dim")?,
        })
    }
}

// ── depth predictor ──────────────────────────────────────────────────

/// Level label for a trajectory: the smallest level whose horizon covers
/// its `len - 1` transitions, capped at the top level.
pub fn label_depth(traj_len: usize, horizons: &[usize]) -> usize {
    debug_assert!(traj_len >= 2);
    let need = traj_len - 1;
    for (i, &h) in horizons.iter().enumerate() {
        if h >= need {
            return i + 1;
        }
    }
    horizons.len()
}

/// Categorical MLP over `(s_start, s_goal)` choosing a planning level.
pub struct DepthPredictor {
    mlp: Mlp,
    params: ParameterSet,
    input_norm: Normalizer,
    pub state_dim: usize,
    pub levels: usize,
}

/// Cross-entropy training against `label_depth` labels derived from each
/// trajectory's endpoints and length.
pub fn train_depth(
    ds: &TrajectoryDataset,
    horizons: &[usize],
    cfg: &AuxTrainConfig,
    rng: &mut RngStream,
) -> Result<DepthPredictor> {
    if ds.is_empty() {
        return Err(Error::Train("empty dataset".into()));
    }
    let sd = ds.state_dim;
    let levels = horizons.len();
    let mut inputs = Vec::with_capacity(ds.len() * 2 * sd);
    let mut labels = Vec::with_capacity(ds.len());
    for t in &ds.trajectories {
        inputs.extend(t.state(0).iter().map(|&v| v as f64));
        inputs.extend(t.last_state().iter().map(|&v| v as f64));
        labels.push(label_depth(t.len(), horizons) - 1);
    }
    let distinct = {
        let mut seen = vec![false; levels];
        for &l in &labels {
            seen[l] = true;
        }
        seen.iter().filter(|&&b| b).count()
    };
    if distinct < 2 {
        log::warn!(
            "depth-predictor corpus has {distinct} distinct level label(s); training anyway"
        );
    }
    let input_norm = Normalizer::fit(&inputs, 2 * sd);

    let mut params = ParameterSet::new();
    let mlp = Mlp::new(
        &mut params,
        "depth",
        &[2 * sd, cfg.hidden, cfg.hidden, levels],
        Activation::Relu,
        rng,
    );
    let n = labels.len();
    for _ in 0..batches_for(n, cfg) {
        let mut rows = Vec::with_capacity(cfg.batch * 2 * sd);
        let mut targets = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch.min(n) {
            let i = rng.index(n);
            let mut row = inputs[i * 2 * sd..(i + 1) * 2 * sd].to_vec();
            input_norm.encode(&mut row);
            rows.extend(row);
            targets.push(labels[i]);
        }
        let x = Tensor::from_vec(&[targets.len(), 2 * sd], rows)?;
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let logits = mlp.forward(&mut g, &params, xv)?;
        let loss = g.softmax_cross_entropy(logits, &targets)?;
        let grads = g.backward(loss)?;
        let mut named = grads.named();
        params.fill_missing_grads(&mut named);
        params.adam_step(&named, &cfg.adam)?;
    }
    Ok(DepthPredictor {
        mlp,
        params,
        input_norm,
        state_dim: sd,
        levels,
    })
}

impl DepthPredictor {
    /// Most suitable planning level for a start/goal pair (argmax class).
    pub fn predict_depth(&self, s0: &[f64], s_goal: &[f64]) -> usize {
        let mut row: Vec<f64> = s0.iter().chain(s_goal.iter()).copied().collect();
        self.input_norm.encode(&mut row);
        let x = Tensor::from_vec(&[1, 2 * self.state_dim], row).unwrap();
        let logits = self.mlp.infer(&self.params, &x).unwrap();
        let mut best = 0;
        for (i, &v) in logits.data().iter().enumerate() {
            if v > logits.data()[best] {
                best = i;
            }
        }
        best + 1
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = mlp_checkpoint("depth", &self.mlp, &self.params, &self.input_norm);
        ck.set_meta("state_dim", self.state_dim);
        ck.set_meta("levels", self.levels);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (mlp, params, input_norm) = mlp_from_checkpoint(ck, "depth")?;
        Ok(DepthPredictor {
            mlp,
            params,
            input_norm,
            state_dim: ck.meta_parsed("state_dim")?,
            levels: ck.meta_parsed("levels")?,
        })
    }
}

// ── shared plumbing ──────────────────────────────────────────────────

fn transition_index(ds: &TrajectoryDataset) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(ds.transitions());
    for (ti, t) in ds.trajectories.iter().enumerate() {
        for i in 0..t.len() - 1 {
            pairs.push((ti, i));
        }
    }
    pairs
}

/// Mini-batch MSE regression over pre-flattened rows.
#[allow(clippy::too_many_arguments)]
fn regress(
    mlp: &Mlp,
    params: &mut ParameterSet,
    input_norm: &Normalizer,
    inputs: &[f64],
    in_dim: usize,
    targets: &[f64],
    out_dim: usize,
    cfg: &AuxTrainConfig,
    rng: &mut RngStream,
) -> Result<()> {
    let n = inputs.len() / in_dim;
    for _ in 0..batches_for(n, cfg) {
        let bsize = cfg.batch.min(n);
        let mut rows = Vec::with_capacity(bsize * in_dim);
        let mut ys = Vec::with_capacity(bsize * out_dim);
        for _ in 0..bsize {
            let i = rng.index(n);
            let mut row = inputs[i * in_dim..(i + 1) * in_dim].to_vec();
            input_norm.encode(&mut row);
            rows.extend(row);
            ys.extend_from_slice(&targets[i * out_dim..(i + 1) * out_dim]);
        }
        let x = Tensor::from_vec(&[bsize, in_dim], rows)?;
        let y = Tensor::from_vec(&[bsize, out_dim], ys)?;
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let yv = g.leaf(y);
        let pred = mlp.forward(&mut g, params, xv)?;
        let diff = g.sub(pred, yv)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean_all(sq);
        let grads = g.backward(loss)?;
        let mut named = grads.named();
        params.fill_missing_grads(&mut named);
        params.adam_step(&named, &cfg.adam)?;
    }
    Ok(())
}

fn mlp_checkpoint(role: &str, mlp: &Mlp, params: &ParameterSet, norm: &Normalizer) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", role);
    ck.set_meta(
        "dims",
        mlp.dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    ck.insert(
        "norm.lo",
        Tensor::from_vec(&[norm.lo.len()], norm.lo.clone()).unwrap(),
    );
    ck.insert(
        "norm.hi",
        Tensor::from_vec(&[norm.hi.len()], norm.hi.clone()).unwrap(),
    );
    ck.put_params("model", params);
    ck
}

fn mlp_from_checkpoint(ck: &Checkpoint, role: &str) -> Result<(Mlp, ParameterSet, Normalizer)> {
    if ck.meta("kind") != Some(role) {
        return Err(Error::Checkpoint(format!(
            "checkpoint kind {:?} is not `{role}`",
            ck.meta("kind")
        )));
    }
    let dims: Vec<usize> = ck
        .meta("dims")
        .ok_or_else(|| Error::Checkpoint("missing dims".into()))?
        .split(',')
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint("bad dims".into()))?;
    let mlp = Mlp {
        prefix: role.to_string(),
        dims,
        activation: Activation::Relu,
    };
    let params = ck.get_params("model")?;
    let norm = Normalizer {
        lo: ck.tensor("norm.lo")?.data().to_vec(),
        hi: ck.tensor("norm.hi")?.data().to_vec(),
    };
    Ok((mlp, params, norm))
}
