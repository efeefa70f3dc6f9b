//! Progressive trajectory extension.
//!
//! Each round grows a dataset by stitching: pick a source trajectory,
//! synthesize a bridge window from its last state with a short-horizon
//! denoiser, keep target candidates whose states come within a reachability
//! threshold of the bridge, re-sample the bridge pinned to the chosen
//! target's prefix, and splice source, bridge interior, and target tail
//! into one longer trajectory with actions and rewards infilled by the
//! inverse-dynamics and reward models.
//!
//! The linear scheduler stitches the previous round onto the base dataset
//! every round; the exponential scheduler stitches the previous round onto
//! itself.

use serde::{Deserialize, Serialize};

use crate::dataset::{Trajectory, TrajectoryDataset};
use crate::diffusion::{
    fit_normalizer, sample_window_batch, train_step, Constraint, Denoiser, ScheduleKind,
};
use crate::maze::MazeSpec;
use crate::models::{InverseDynModel, RewardModel};
use crate::nn::AdamConfig;
use crate::rng::RngStream;
use crate::unet::UnetConfig;
use crate::{Error, Result};

// ── configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
}

impl DistanceMetric {
    /// Distance over the position components (first two dims) only;
    /// velocities would otherwise dominate.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let (ax, ay, bx, by) = (a[0], a[1], b[0], b[1]);
        match self {
            DistanceMetric::Euclidean => ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt(),
            DistanceMetric::Cosine => {
                let na = (ax * ax + ay * ay).sqrt();
                let nb = (bx * bx + by * by).sqrt();
                if na < 1e-12 || nb < 1e-12 {
                    return 1.0;
                }
                1.0 - (ax * bx + ay * by) / (na * nb)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchConfig {
    /// Target candidates sampled per iteration.
    pub candidates: usize,
    /// Reachability threshold in world units.
    pub delta: f64,
    pub metric: DistanceMetric,
    /// Bridge window length in states.
    pub horizon: usize,
    /// Accepted stitches per round.
    pub iterations: usize,
    /// Per-step position continuity bound in world units.
    pub eps_dyn: f64,
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates < 1 {
            return Err(Error::config("candidates", "must be >= 1"));
        }
        if self.delta <= 0.0 {
            return Err(Error::config("delta", "must be > 0"));
        }
        if self.horizon < 3 {
            return Err(Error::config("horizon", "must be >= 3"));
        }
        if self.iterations < 1 {
            return Err(Error::config("iterations", "must be >= 1"));
        }
        if self.eps_dyn <= 0.0 {
            return Err(Error::config("eps_dyn", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Linear,
    Exponential,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Strategy::Linear),
            "exponential" => Ok(Strategy::Exponential),
            other => Err(Error::config("strategy", format!("unknown `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Linear => "linear",
            Strategy::Exponential => "exponential",
        }
    }
}

/// Source/target wiring for one extension round.
#[derive(Debug, Clone, Copy)]
pub struct RoundSpec<'a> {
    pub strategy: Strategy,
    pub round: u16,
    pub source: &'a TrajectoryDataset,
    pub target: &'a TrajectoryDataset,
}

/// Models a round depends on.
pub struct StitchModels<'a> {
    pub stitcher: &'a Denoiser,
    pub invdyn: &'a InverseDynModel,
    pub reward: &'a RewardModel,
}

// ── stitcher training ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StitcherTrainConfig {
    pub unet: UnetConfig,
    pub schedule: ScheduleKind,
    pub m_steps: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

/// Unconditional window model over `horizon` states, trained on the base
/// data only. Trajectories shorter than the horizon are skipped.
pub fn train_stitcher(
    base: &TrajectoryDataset,
    horizon: usize,
    cfg: &StitcherTrainConfig,
    rng: &mut RngStream,
) -> Result<Denoiser> {
    if base.trajectories.iter().all(|t| t.len() < horizon) {
        return Err(Error::Train(format!(
            "no trajectory holds a {horizon}-state window (max length {})",
            base.max_length()
        )));
    }
    let mut unet_cfg = cfg.unet.clone();
    unet_cfg.in_channels = base.state_dim;
    unet_cfg.levels = 1;
    let normalizer = fit_normalizer(base);
    let mut den = Denoiser::new(unet_cfg, normalizer, cfg.schedule, cfg.m_steps, rng)?;
    for step in 0..cfg.train_steps {
        let batch = sample_window_batch(base, &den.normalizer, 1, horizon - 1, cfg.batch, rng)?;
        let adam = AdamConfig {
            lr: decayed_lr(cfg.adam.lr, step, cfg.train_steps),
            ..cfg.adam
        };
        train_step(
            &den.unet,
            &mut den.params,
            &den.schedule,
            &batch,
            1,
            &[],
            &adam,
            rng,
        )?;
    }
    Ok(den)
}

/// Cosine decay to 10% of the base rate over the run.
pub fn decayed_lr(base: f64, step: usize, total: usize) -> f64 {
    let f = step as f64 / total.max(1) as f64;
    base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * f).cos()))
}

// ── stitching steps ──────────────────────────────────────────────────

/// Sample a bridge window whose first state is pinned to `s_last`.
/// Returns a time-major raw-space window of `horizon * state_dim` values.
pub fn propose_bridge(
    stitcher: &Denoiser,
    horizon: usize,
    s_last: &[f64],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let cons = vec![Constraint::default().pin(0, s_last.to_vec())];
    let mut windows = stitcher.sample(horizon, 1, &cons, rng, None, 0.0)?;
    Ok(windows.remove(0))
}

/// One stitchable candidate: the closest (target state, bridge state) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateMatch {
    /// Index into the candidate list.
    pub candidate: usize,
    pub distance: f64,
    /// Index of the closest target state (the `k` used for refinement).
    pub target_index: usize,
    /// Index of the closest bridge state.
    pub bridge_index: usize,
}

/// Keep candidates whose minimum state distance to the bridge is within
/// `delta`. Ties in the argmin break toward smaller indices.
pub fn filter_candidates(
    bridge: &[f64],
    state_dim: usize,
    candidates: &[&Trajectory],
    delta: f64,
    metric: DistanceMetric,
) -> Result<Vec<CandidateMatch>> {
    if delta <= 0.0 {
        return Err(Error::config("delta", "must be > 0"));
    }
    if candidates.is_empty() {
        return Err(Error::config("candidates", "candidate list is empty"));
    }
    let bridge_len = bridge.len() / state_dim;
    let mut out = Vec::new();
    for (ci, cand) in candidates.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_m = 0;
        let mut best_n = 0;
        for m in 0..cand.len() {
            let ts = cand.state_f64(m);
            for n in 0..bridge_len {
                let bs = &bridge[n * state_dim..(n + 1) * state_dim];
                let d = metric.eval(&ts, bs);
                if d < best {
                    best = d;
                    best_m = m;
                    best_n = n;
                }
            }
        }
        if best <= delta {
            out.push(CandidateMatch {
                candidate: ci,
                distance: best,
                target_index: best_m,
                bridge_index: best_n,
            });
        }
    }
    Ok(out)
}

/// Uniform choice among the stitchable candidates; `None` is a miss.
pub fn select_target(stitchable: &[CandidateMatch], rng: &mut RngStream) -> Option<CandidateMatch> {
    if stitchable.is_empty() {
        return None;
    }
    Some(stitchable[rng.index(stitchable.len())])
}

/// Re-sample the bridge pinned at both ends: index 0 is the source's last
/// state and the final `k + 1` indices are the target prefix.
pub fn refine_bridge(
    stitcher: &Denoiser,
    horizon: usize,
    s_last: &[f64],
    target_prefix: &[Vec<f64>],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let k = target_prefix.len() - 1;
    if k + 2 > horizon {
        return Err(Error::config(
            "target_index",
            format!("prefix of {} states does not fit a {horizon}-state window", k + 1),
        ));
    }
    let mut cons = Constraint::default().pin(0, s_last.to_vec());
    for (i, state) in target_prefix.iter().enumerate() {
        cons = cons.pin(horizon - 1 - k + i, state.clone());
    }
    let mut windows = stitcher.sample(horizon, 1, &[cons], rng, None, 0.0)?;
    Ok(windows.remove(0))
}

/// Why a stitch attempt was rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum StitchReject {
    /// A junction step moved farther than the continuity bound.
    Discontinuity { junction: usize, distance: f64 },
    /// A bridge state left the free region.
    OffGrid { index: usize },
    /// The closest target state leaves no room in the bridge window.
    PrefixTooLong { k: usize },
}

/// Splice `source ++ bridge[1 ..= H-k-2] ++ target[k ..]` into one
/// trajectory, infilling actions and rewards for the new transitions.
/// States shared through inpainting appear exactly once.
#[allow(clippy::too_many_arguments)]
pub fn stitch(
    source: &Trajectory,
    bridge: &[f64],
    target: &Trajectory,
    k: usize,
    spec: &MazeSpec,
    eps_dyn: f64,
    invdyn: &InverseDynModel,
    reward: &RewardModel,
) -> std::result::Result<Trajectory, StitchReject> {
    let sd = source.state_dim;
    let ad = source.action_dim;
    let horizon = bridge.len() / sd;
    if k + 2 > horizon {
        return Err(StitchReject::PrefixTooLong { k });
    }

    // assemble the state sequence
    let n_s = source.len();
    let bridge_states = horizon - k - 2; // indices 1 ..= H-k-2
    let mut states: Vec<f32> = Vec::with_capacity((n_s + bridge_states + target.len() - k) * sd);
    states.extend_from_slice(&source.states);
    for i in 1..=horizon - k - 2 {
        let s = &bridge[i * sd..(i + 1) * sd];
        states.extend(s.iter().map(|&v| v as f32));
    }
    states.extend_from_slice(&target.states[k * sd..]);
    let n_new = states.len() / sd;

    // junction region: transitions from source's last state through the
    // bridge interior onto the target
    let first_new = n_s - 1;
    let last_new = n_s + bridge_states; // index of target state k
    for i in first_new..last_new {
        let a = &states[i * sd..i * sd + 2];
        let b = &states[(i + 1) * sd..(i + 1) * sd + 2];
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() as f64;
        if d > eps_dyn {
            return Err(StitchReject::Discontinuity {
                junction: i,
                distance: d,
            });
        }
    }
    // bridge states must stay in free space
    for i in n_s..n_s + bridge_states {
        let s = &states[i * sd..(i + 1) * sd];
        match spec.cell_of(s[0] as f64, s[1] as f64) {
            Ok((r, c)) if !spec.is_wall(r, c) => {}
            _ => return Err(StitchReject::OffGrid { index: i }),
        }
    }

    // actions and rewards: keep the originals, infill the junction region
    let mut actions: Vec<f32> = Vec::with_capacity((n_new - 1) * ad);
    let mut rewards: Vec<f32> = Vec::with_capacity(n_new - 1);
    actions.extend_from_slice(&source.actions);
    rewards.extend_from_slice(&source.rewards);
    for i in first_new..last_new {
        let s = states[i * sd..(i + 1) * sd]
            .iter()
            .map(|&v| v as f64)
            .collect::<Vec<_>>();
        let sn = states[(i + 1) * sd..(i + 2) * sd]
            .iter()
            .map(|&v| v as f64)
            .collect::<Vec<_>>();
        let a = invdyn.infer_action(&s, &sn);
        let r = reward.infer_reward(&s, &a);
        actions.extend(a.iter().map(|&v| v as f32));
        rewards.push(r as f32);
    }
    actions.extend_from_slice(&target.actions[k * ad..]);
    rewards.extend_from_slice(&target.rewards[k..]);

    // provenance: junction endpoints plus shifted inherited boundaries
    let mut boundaries: Vec<u32> = source.boundaries.clone();
    boundaries.push(first_new as u32);
    boundaries.push(last_new as u32);
    let target_offset = last_new as i64 - k as i64;
    for &b in &target.boundaries {
        if (b as usize) > k {
            boundaries.push((b as i64 + target_offset) as u32);
        }
    }
    boundaries.dedup();

    Trajectory::new(
        states,
        actions,
        rewards,
        source.round + 1,
        boundaries,
        sd,
        ad,
    )
    .map_err(|_| StitchReject::PrefixTooLong { k })
}

// ── round driver ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundManifest {
    pub strategy: String,
    pub round: u16,
    pub iterations: usize,
    pub candidates: usize,
    pub delta: f64,
    pub seed: u64,
    pub accepted: usize,
    pub misses: usize,
    pub rejects: usize,
    pub rejects_discontinuity: usize,
    pub rejects_offgrid: usize,
    pub rejects_prefix: usize,
    pub mean_length: f64,
    pub min_length: usize,
    pub max_length: usize,
    pub coverage: f64,
    /// Wall-clock stamp; the only field exempt from reproducibility.
    pub timestamp: String,
}

/// Run one extension round: `iterations` accepted stitches, with misses and
/// rejects retried and counted. Aborts when the acceptance rate stays below
/// 1% after a warm-up of attempts.
pub fn run_round(
    spec: &RoundSpec,
    cfg: &StitchConfig,
    maze: &MazeSpec,
    models: &StitchModels,
    rng: &mut RngStream,
) -> Result<(TrajectoryDataset, RoundManifest)> {
    cfg.validate()?;
    if spec.source.is_empty() || spec.target.is_empty() {
        return Err(Error::PteAbort("source or target dataset is empty".into()));
    }
    let mut out = TrajectoryDataset::new(
        &spec.source.layout,
        spec.source.state_dim,
        spec.source.action_dim,
        crate::dataset::DatasetMeta {
            seed: rng.seed(),
            generator: format!("pte-{}-r{}", spec.strategy.name(), spec.round),
        },
    );
    let mut misses = 0usize;
    let mut rejects = 0usize;
    let mut rej_disc = 0usize;
    let mut rej_grid = 0usize;
    let mut rej_prefix = 0usize;
    let mut attempts = 0usize;
    let max_attempts = (cfg.iterations * 200).max(2000);

    while out.len() < cfg.iterations {
        attempts += 1;
        if attempts > max_attempts
            || (attempts >= 200 && (out.len() as f64) < 0.01 * attempts as f64)
        {
            return Err(Error::PteAbort(format!(
                "acceptance rate below floor: {} accepted / {attempts} attempts ({misses} misses, {rejects} rejects)",
                out.len()
            )));
        }
        let source = &spec.source.trajectories[rng.index(spec.source.len())];
        let s_last: Vec<f64> = source.last_state().iter().map(|&v| v as f64).collect();
        let bridge = propose_bridge(models.stitcher, cfg.horizon, &s_last, rng)?;

        let picks = rng.sample_indices(spec.target.len(), cfg.candidates);
        let candidates: Vec<&Trajectory> =
            picks.iter().map(|&i| &spec.target.trajectories[i]).collect();
        let stitchable = filter_candidates(
            &bridge,
            spec.source.state_dim,
            &candidates,
            cfg.delta,
            cfg.metric,
        )?;
        let Some(chosen) = select_target(&stitchable, rng) else {
            misses += 1;
            continue;
        };
        let target = candidates[chosen.candidate];
        let k = chosen.target_index;
        if k + 2 > cfg.horizon {
            rejects += 1;
            rej_prefix += 1;
            continue;
        }
        let prefix: Vec<Vec<f64>> = (0..=k).map(|i| target.state_f64(i)).collect();
        let refined = refine_bridge(models.stitcher, cfg.horizon, &s_last, &prefix, rng)?;
        match stitch(
            source,
            &refined,
            target,
            k,
            maze,
            cfg.eps_dyn,
            models.invdyn,
            models.reward,
        ) {
            Ok(traj) => out.push(traj)?,
            Err(reason) => {
                rejects += 1;
                match reason {
                    StitchReject::Discontinuity { .. } => rej_disc += 1,
                    StitchReject::OffGrid { .. } => rej_grid += 1,
                    StitchReject::PrefixTooLong { .. } => rej_prefix += 1,
                }
            }
        }
    }

    let manifest = RoundManifest {
        strategy: spec.strategy.name().to_string(),
        round: spec.round,
        iterations: cfg.iterations,
        candidates: cfg.candidates,
        delta: cfg.delta,
        seed: rng.seed(),
        accepted: out.len(),
        misses,
        rejects,
        rejects_discontinuity: rej_disc,
        rejects_offgrid: rej_grid,
        rejects_prefix: rej_prefix,
        mean_length: crate::dataset::mean_length(&out)?,
        min_length: out.min_length(),
        max_length: out.max_length(),
        coverage: crate::dataset::start_goal_coverage(&out, maze)?,
        timestamp: String::new(),
    };
    Ok((out, manifest))
}

/// Linear extension: round r stitches `D_{r-1}` onto the base dataset.
pub fn linear_pte(
    base: &TrajectoryDataset,
    rounds: usize,
    cfg: &StitchConfig,
    maze: &MazeSpec,
    models: &StitchModels,
    rng: &mut RngStream,
) -> Result<Vec<(TrajectoryDataset, RoundManifest)>> {
    let mut out: Vec<(TrajectoryDataset, RoundManifest)> = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let mut round_rng = rng.substream(r as u64);
        let result = {
            let source = if r == 1 { base } else { &out[r - 2].0 };
            let spec = RoundSpec {
                strategy: Strategy::Linear,
                round: r as u16,
                source,
                target: base,
            };
            run_round(&spec, cfg, maze, models, &mut round_rng)?
        };
        out.push(result);
    }
    Ok(out)
}

/// Exponential extension: round r stitches `D_{r-1}` onto itself.
pub fn exponential_pte(
    base: &TrajectoryDataset,
    rounds: usize,
    cfg: &StitchConfig,
    maze: &MazeSpec,
    models: &StitchModels,
    rng: &mut RngStream,
) -> Result<Vec<(TrajectoryDataset, RoundManifest)>> {
    let mut out: Vec<(TrajectoryDataset, RoundManifest)> = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let mut round_rng = rng.substream(r as u64);
        let result = {
            let prev = if r == 1 { base } else { &out[r - 2].0 };
            let spec = RoundSpec {
                strategy: Strategy::Exponential,
                round: r as u16,
                source: prev,
                target: prev,
            };
            run_round(&spec, cfg, maze, models, &mut round_rng)?
        };
        out.push(result);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::collect_base;
    use crate::maze::{load_layout, DynamicsConfig};
    use crate::models::{train_invdyn, train_reward, AuxTrainConfig};
    use crate::nn::Normalizer;

    fn metric_line_trajectory(xs: &[f32]) -> Trajectory {
        let states: Vec<f32> = xs.iter().flat_map(|&x| [x, 3.0, 0.0, 0.0]).collect();
        Trajectory::new(
            states,
            vec![0.0; (xs.len() - 1) * 2],
            vec![0.0; xs.len() - 1],
            0,
            vec![],
            4,
            2,
        )
        .unwrap()
    }

    #[test]
    fn filtering_matches_brute_force_distances() {
        // bridge sits at x in [0, 1]; candidates at offsets 0.1, 0.5, 2.0
        let bridge: Vec<f64> = (0..5)
            .flat_map(|i| vec![i as f64 * 0.25, 3.0, 0.0, 0.0])
            .collect();
        let c1 = metric_line_trajectory(&[1.1, 1.3]);
        let c2 = metric_line_trajectory(&[1.5, 1.7]);
        let c3 = metric_line_trajectory(&[3.0, 3.2]);
        let cands = vec![&c1, &c2, &c3];

        let got =
            filter_candidates(&bridge, 4, &cands, 0.6, DistanceMetric::Euclidean).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].candidate, 0);
        assert!((got[0].distance - 0.1).abs() < 1e-6);
        assert_eq!(got[0].target_index, 0, "ties break to the smaller index");
        assert_eq!(got[0].bridge_index, 4);
        assert_eq!(got[1].candidate, 1);
        assert!((got[1].distance - 0.5).abs() < 1e-6);

        // a candidate sharing a state with the bridge always passes
        let shared = metric_line_trajectory(&[0.5, 9.0]);
        let got = filter_candidates(&bridge, 4, &[&shared], 1e-12, DistanceMetric::Euclidean)
            .unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].distance, 0.0);

        // huge threshold keeps everything
        let got =
            filter_candidates(&bridge, 4, &cands, f64::INFINITY, DistanceMetric::Euclidean)
                .unwrap();
        assert_eq!(got.len(), 3);

        assert!(filter_candidates(&bridge, 4, &cands, 0.0, DistanceMetric::Euclidean).is_err());
        assert!(filter_candidates(&bridge, 4, &[], 1.0, DistanceMetric::Euclidean).is_err());
    }

    #[test]
    fn selection_is_uniform() {
        let matches: Vec<CandidateMatch> = (0..4)
            .map(|i| CandidateMatch {
                candidate: i,
                distance: 0.1,
                target_index: 0,
                bridge_index: 0,
            })
            .collect();
        let mut rng = RngStream::new(66, 0);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[select_target(&matches, &mut rng).unwrap().candidate] += 1;
        }
        for &c in &counts {
            let frac = c as f64 / 10_000.0;
            assert!((frac - 0.25).abs() < 0.02, "{counts:?}");
        }
        assert!(select_target(&[], &mut rng).is_none());
        let single = [matches[2]];
        assert_eq!(select_target(&single, &mut rng).unwrap().candidate, 2);
    }

    use std::sync::OnceLock;

    /// Shared fixture: a tiny trained pipeline on the mini layout.
    struct Fixture {
        spec: MazeSpec,
        base: TrajectoryDataset,
        stitcher: Denoiser,
        invdyn: crate::models::InverseDynModel,
        reward: crate::models::RewardModel,
        cfg: StitchConfig,
    }

    fn fixture() -> &'static Fixture {
        static FIXTURE: OnceLock<Fixture> = OnceLock::new();
        FIXTURE.get_or_init(build_fixture)
    }

    fn build_fixture() -> Fixture {
        let spec = load_layout("mini").unwrap();
        let dc = DynamicsConfig::default();
        let mut rng = RngStream::new(500, 0);
        let base = collect_base(&spec, &dc, 6000, 1, &mut rng).unwrap();
        let aux_cfg = AuxTrainConfig {
            epochs: 3,
            batch: 128,
            hidden: 64,
            ..Default::default()
        };
        let invdyn = train_invdyn(&base, &aux_cfg, &mut rng.substream(1)).unwrap();
        let reward = train_reward(&base, &aux_cfg, &mut rng.substream(2)).unwrap();
        let cfg = StitchConfig {
            candidates: 32,
            delta: spec.cell_size,
            metric: DistanceMetric::Euclidean,
            horizon: 12,
            iterations: 60,
            eps_dyn: 0.3,
        };
        let train_cfg = StitcherTrainConfig {
            unet: UnetConfig {
                in_channels: 4,
                base_width: 32,
                resolutions: 2,
                kernel: 3,
                embed_dim: 16,
                levels: 1,
                groups: 8,
            },
            schedule: ScheduleKind::Cosine,
            m_steps: 64,
            train_steps: 2500,
            batch: 48,
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
        };
        let stitcher =
            train_stitcher(&base, cfg.horizon, &train_cfg, &mut rng.substream(3)).unwrap();
        Fixture {
            spec,
            base,
            stitcher,
            invdyn,
            reward,
            cfg,
        }
    }

    #[test]
    fn stitcher_requires_long_enough_trajectories() {
        let spec = load_layout("mini").unwrap();
        let dc = DynamicsConfig::default();
        let mut rng = RngStream::new(501, 0);
        let base = collect_base(&spec, &dc, 300, 1, &mut rng).unwrap();
        let train_cfg = StitcherTrainConfig {
            unet: UnetConfig {
                in_channels: 4,
                base_width: 8,
                resolutions: 1,
                kernel: 3,
                embed_dim: 8,
                levels: 1,
                groups: 4,
            },
            schedule: ScheduleKind::Cosine,
            m_steps: 16,
            train_steps: 1,
            batch: 4,
            adam: AdamConfig::default(),
        };
        // horizon longer than every collected trajectory
        let err = train_stitcher(&base, 500, &train_cfg, &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn full_stitch_pipeline_on_mini() {
        let fx = fixture();
        let mut rng = RngStream::new(510, 0);

        // bridges start exactly at the requested state and stay smooth
        let source = &fx.base.trajectories[0];
        let s_last: Vec<f64> = source.last_state().iter().map(|&v| v as f64).collect();
        let bridge = propose_bridge(&fx.stitcher, fx.cfg.horizon, &s_last, &mut rng).unwrap();
        assert_eq!(&bridge[..4], &s_last[..], "pinned first state is exact");

        let mut rng_b = RngStream::new(510, 0);
        let again = propose_bridge(&fx.stitcher, fx.cfg.horizon, &s_last, &mut rng_b).unwrap();
        assert_eq!(bridge, again, "same stream, same bridge");

        // continuity of proposed bridges after training: most steps small
        let mut small = 0usize;
        let mut total = 0usize;
        for t in 0..30 {
            let src = &fx.base.trajectories[t % fx.base.len()];
            let sl: Vec<f64> = src.last_state().iter().map(|&v| v as f64).collect();
            let b = propose_bridge(&fx.stitcher, fx.cfg.horizon, &sl, &mut rng).unwrap();
            for i in 0..fx.cfg.horizon - 1 {
                let d = ((b[i * 4] - b[(i + 1) * 4]).powi(2)
                    + (b[i * 4 + 1] - b[(i + 1) * 4 + 1]).powi(2))
                .sqrt();
                if d <= fx.cfg.eps_dyn {
                    small += 1;
                }
                total += 1;
            }
        }
        assert!(
            small as f64 >= 0.95 * total as f64,
            "bridge continuity {small}/{total}"
        );

        // refined bridges hit the pinned prefix exactly
        let target = &fx.base.trajectories[1];
        let k = 2usize;
        let prefix: Vec<Vec<f64>> = (0..=k).map(|i| target.state_f64(i)).collect();
        let refined =
            refine_bridge(&fx.stitcher, fx.cfg.horizon, &s_last, &prefix, &mut rng).unwrap();
        assert_eq!(&refined[..4], &s_last[..]);
        for i in 0..=k {
            let idx = fx.cfg.horizon - 1 - k + i;
            assert_eq!(&refined[idx * 4..(idx + 1) * 4], &prefix[i][..], "pin {i}");
        }
        // k = 0 pins the endpoints only
        let prefix0: Vec<Vec<f64>> = vec![target.state_f64(0)];
        let r0 = refine_bridge(&fx.stitcher, fx.cfg.horizon, &s_last, &prefix0, &mut rng).unwrap();
        assert_eq!(&r0[..4], &s_last[..]);
        assert_eq!(
            &r0[(fx.cfg.horizon - 1) * 4..],
            &prefix0[0][..],
            "last index pinned"
        );
        // an over-long prefix is rejected
        let long: Vec<Vec<f64>> = (0..fx.cfg.horizon).map(|_| s_last.clone()).collect();
        assert!(refine_bridge(&fx.stitcher, fx.cfg.horizon, &s_last, &long, &mut rng).is_err());
    }

    #[test]
    fn stitch_length_formula_and_replay() {
        let fx = fixture();
        let mut rng = RngStream::new(511, 0);
        let models = StitchModels {
            stitcher: &fx.stitcher,
            invdyn: &fx.invdyn,
            reward: &fx.reward,
        };
        let spec = RoundSpec {
            strategy: Strategy::Linear,
            round: 1,
            source: &fx.base,
            target: &fx.base,
        };
        let mut cfg = fx.cfg.clone();
        cfg.iterations = 40;
        let (out, manifest) = run_round(&spec, &cfg, &fx.spec, &models, &mut rng).unwrap();
        assert_eq!(out.len(), 40);
        assert_eq!(manifest.accepted, 40);
        assert!(crate::dataset::mean_length(&out).unwrap()
            > crate::dataset::mean_length(&fx.base).unwrap());

        let dc = DynamicsConfig::default();
        let mut replay_ok = 0usize;
        let mut replay_total = 0usize;
        for t in &out.trajectories {
            assert_eq!(t.round, 1);
            assert_eq!(t.boundaries.len(), 2);
            // no duplicated consecutive states at the junctions
            let (b0, b1) = (t.boundaries[0] as usize, t.boundaries[1] as usize);
            for j in [b0, b1] {
                if j + 1 < t.len() {
                    assert_ne!(t.state(j), t.state(j + 1), "duplicate state at junction");
                }
            }
            // infilled actions replayed through the dynamics land close
            for i in b0..b1 {
                let s = crate::maze::PointState::from_slice(&t.state_f64(i));
                let a = t.action(i);
                let (next, _, _) = crate::maze::step(
                    &fx.spec,
                    &dc,
                    &s,
                    crate::maze::Action2D::new(a[0] as f64, a[1] as f64),
                    (0.0, 0.0),
                );
                let want = t.state_f64(i + 1);
                let d = ((next.x - want[0]).powi(2) + (next.y - want[1]).powi(2)).sqrt();
                replay_total += 1;
                if d <= cfg.eps_dyn {
                    replay_ok += 1;
                }
            }
            // every stitched trajectory stays in free space
        }
        out.validate_against(&fx.spec).unwrap();
        assert!(
            replay_ok as f64 >= 0.9 * replay_total as f64,
            "junction replay {replay_ok}/{replay_total}"
        );

        // length bookkeeping: recompute from a fresh accepted stitch
        let source = &fx.base.trajectories[3];
        let target = &fx.base.trajectories[4];
        let k = 1usize;
        let s_last: Vec<f64> = source.last_state().iter().map(|&v| v as f64).collect();
        let prefix: Vec<Vec<f64>> = (0..=k).map(|i| target.state_f64(i)).collect();
        // build a synthetic perfectly-smooth bridge so the stitch accepts
        let mut bridge = vec![0.0f64; cfg.horizon * 4];
        for i in 0..cfg.horizon {
            let f = i as f64 / (cfg.horizon - 1) as f64;
            let a = &s_last;
            let b = &prefix[0];
            bridge[i * 4] = a[0] + (b[0] - a[0]) * f * 0.0; // stay at source; dedup still applies
            bridge[i * 4 + 1] = a[1];
            bridge[i * 4 + 2] = 0.0;
            bridge[i * 4 + 3] = 0.0;
        }
        bridge[..4].copy_from_slice(&s_last);
        for (i, p) in prefix.iter().enumerate() {
            let idx = cfg.horizon - 1 - k + i;
            bridge[idx * 4..(idx + 1) * 4].copy_from_slice(p);
        }
        match stitch(
            source,
            &bridge,
            target,
            k,
            &fx.spec,
            f64::INFINITY, // accept regardless of continuity for the formula check
            &fx.invdyn,
            &fx.reward,
        ) {
            Ok(t) => {
                assert_eq!(
                    t.len(),
                    source.len() + (cfg.horizon - k - 2) + (target.len() - k),
                    "dedup length formula"
                );
            }
            Err(e) => panic!("formula stitch rejected: {e:?}"),
        }
    }

    #[test]
    fn linear_and_exponential_schedulers() {
        let fx = fixture();
        let models = StitchModels {
            stitcher: &fx.stitcher,
            invdyn: &fx.invdyn,
            reward: &fx.reward,
        };
        let mut cfg = fx.cfg.clone();
        cfg.iterations = 50;

        let mut rng = RngStream::new(512, 0);
        let linear = linear_pte(&fx.base, 2, &cfg, &fx.spec, &models, &mut rng).unwrap();
        assert_eq!(linear.len(), 2);
        let base_mean = crate::dataset::mean_length(&fx.base).unwrap();
        let m1 = crate::dataset::mean_length(&linear[0].0).unwrap();
        let m2 = crate::dataset::mean_length(&linear[1].0).unwrap();
        assert!(m1 > base_mean && m2 > m1, "{base_mean} -> {m1} -> {m2}");
        // linear rounds never shrink the minimum length
        assert!(linear[0].0.min_length() >= fx.base.min_length());
        assert!(linear[1].0.min_length() >= linear[0].0.min_length());

        // determinism: same seeds, same outputs
        let mut rng_b = RngStream::new(512, 0);
        let again = linear_pte(&fx.base, 2, &cfg, &fx.spec, &models, &mut rng_b).unwrap();
        assert_eq!(again[1].0.trajectories, linear[1].0.trajectories);

        let mut rng_e = RngStream::new(513, 0);
        let expo = exponential_pte(&fx.base, 2, &cfg, &fx.spec, &models, &mut rng_e).unwrap();
        let e2 = crate::dataset::mean_length(&expo[1].0).unwrap();
        assert!(
            e2 > m2,
            "exponential round 2 ({e2:.1}) should outgrow linear round 2 ({m2:.1})"
        );
    }

    #[test]
    fn hopeless_threshold_aborts_with_diagnostics() {
        let fx = fixture();
        let models = StitchModels {
            stitcher: &fx.stitcher,
            invdyn: &fx.invdyn,
            reward: &fx.reward,
        };
        let mut cfg = fx.cfg.clone();
        cfg.delta = 1e-9; // nothing is ever stitchable
        cfg.iterations = 5;
        let spec = RoundSpec {
            strategy: Strategy::Linear,
            round: 1,
            source: &fx.base,
            target: &fx.base,
        };
        let mut rng = RngStream::new(514, 0);
        match run_round(&spec, &cfg, &fx.spec, &models, &mut rng) {
            Err(Error::PteAbort(msg)) => assert!(msg.contains("misses"), "{msg}"),
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn refined_bridges_are_no_rougher_than_proposals() {
        let fx = fixture();
        let mut rng = RngStream::new(515, 0);
        let mut improved = 0usize;
        let mut trials = 0usize;
        for t in 0..40 {
            let source = &fx.base.trajectories[t % fx.base.len()];
            let target = &fx.base.trajectories[(t * 7 + 1) % fx.base.len()];
            let s_last: Vec<f64> = source.last_state().iter().map(|&v| v as f64).collect();
            let initial =
                propose_bridge(&fx.stitcher, fx.cfg.horizon, &s_last, &mut rng).unwrap();
            let k = 1usize;
            let prefix: Vec<Vec<f64>> = (0..=k).map(|i| target.state_f64(i)).collect();
            let refined =
                refine_bridge(&fx.stitcher, fx.cfg.horizon, &s_last, &prefix, &mut rng).unwrap();
            let max_step = |w: &[f64]| {
                (0..fx.cfg.horizon - 1)
                    .map(|i| {
                        ((w[i * 4] - w[(i + 1) * 4]).powi(2)
                            + (w[i * 4 + 1] - w[(i + 1) * 4 + 1]).powi(2))
                        .sqrt()
                    })
                    .fold(0.0f64, f64::max)
            };
            trials += 1;
            if max_step(&refined) <= max_step(&initial) + 1e-9 {
                improved += 1;
            }
        }
        // the target prefix gives the sampler a second anchor; most of the
        // time the refined bridge is at least as smooth
        assert!(
            improved * 100 >= trials * 50,
            "refined smoother on only {improved}/{trials}"
        );
    }

    #[test]
    fn normalizer_fit_covers_dataset_extents() {
        let fx = fixture();
        let norm = fit_normalizer(&fx.base);
        assert_eq!(norm.dim(), 4);
        for t in fx.base.trajectories.iter().take(5) {
            for i in 0..t.len() {
                let mut s = t.state_f64(i);
                norm.encode(&mut s);
                assert!(s.iter().all(|v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(v)));
            }
        }
        let _ = Normalizer::fit(&[0.0, 1.0], 2); // degenerate dims tolerated
    }
}
