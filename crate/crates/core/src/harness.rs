//! Experiment orchestration: configuration, the collect → stitch → train →
//! evaluate pipeline, metric aggregation, and report emission.
//!
//! A single master seed fans out to fixed per-component streams, so every
//! artifact a pipeline writes is reproducible byte for byte (timestamps
//! live only in the designated manifest fields).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{self, TrajectoryDataset};
use crate::diffusion::{
    draw_level, fit_normalizer, sample_window_batch, train_step, Denoiser, LevelCounter,
    ScheduleKind,
};
use crate::maze::{self, DynamicsConfig, MazeSpec, PointState};
use crate::models::{
    train_depth, train_invdyn, train_reward, AuxTrainConfig, DepthPredictor, InverseDynModel,
    RewardModel,
};
use crate::nn::AdamConfig;
use crate::planner::{control_episode, ControlConfig, HierarchySpec, PlannerBundle};
use crate::pte::{self, DistanceMetric, StitchConfig, StitchModels, StitcherTrainConfig, Strategy};
use crate::rng::RngStream;
use crate::unet::UnetConfig;
use crate::{Error, Result};

// fixed stream ids per component
pub const STREAM_COLLECT: u64 = 1;
pub const STREAM_AUX: u64 = 2;
pub const STREAM_STITCHER: u64 = 3;
pub const STREAM_PTE_LINEAR: u64 = 4;
pub const STREAM_PTE_EXPONENTIAL: u64 = 5;
pub const STREAM_PLANNER: u64 = 6;
pub const STREAM_EVAL: u64 = 7;
pub const STREAM_DEPTH: u64 = 8;

// ── configuration ────────────────────────────────────────────────────

/// Everything a pipeline run needs, parsed from a `key = value` text file.
/// Dotted keys group related fields; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub layout: String,
    pub master_seed: u64,
    pub out_dir: PathBuf,

    pub collect_transitions: usize,
    pub collect_max_cell_dist: usize,

    pub env: DynamicsConfig,

    pub stitch_candidates: usize,
    pub stitch_delta_cells: f64,
    pub stitch_metric: DistanceMetric,
    pub stitch_horizon: usize,
    pub stitch_iterations: usize,
    /// Junction continuity bound; default 1.5 * v_max * dt.
    pub stitch_eps_dyn: Option<f64>,

    pub hierarchy_jumps: Vec<usize>,
    pub hierarchy_top_count: usize,
    pub hierarchy_strict: bool,

    pub diffusion_m_steps: usize,
    pub diffusion_schedule: ScheduleKind,
    pub diffusion_base_width: usize,
    pub diffusion_resolutions: usize,
    pub diffusion_kernel: usize,
    pub diffusion_embed_dim: usize,
    pub diffusion_groups: usize,

    pub train_stitcher_steps: usize,
    pub train_planner_steps: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    /// Dataset for planner/depth training: `base`, `union`, or a path.
    pub train_dataset: String,
    /// File stem of the planner checkpoint this config trains/evaluates.
    pub train_planner_name: String,

    pub aux_epochs: usize,
    pub aux_hidden: usize,
    pub aux_lr: f64,

    pub eval_seeds: usize,
    pub eval_replan_period: usize,
    pub eval_gate_radius_cells: f64,
    /// Restrict multi-task start/goal pairs to at least this BFS distance
    /// in cells (0 = unrestricted).
    pub eval_min_task_cells: usize,
    pub eval_guide_scale: f64,
    /// Optional reference-returns file for normalized scores.
    pub eval_reference_returns: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            layout: "mini".into(),
            master_seed: 7,
            out_dir: PathBuf::from("runs/default"),
            collect_transitions: 50_000,
            collect_max_cell_dist: 1,
            env: DynamicsConfig::default(),
            stitch_candidates: 32,
            stitch_delta_cells: 1.0,
            stitch_metric: DistanceMetric::Euclidean,
            stitch_horizon: 12,
            stitch_iterations: 500,
            stitch_eps_dyn: None,
            hierarchy_jumps: vec![1, 5, 25],
            hierarchy_top_count: 2,
            hierarchy_strict: true,
            diffusion_m_steps: 64,
            diffusion_schedule: ScheduleKind::Cosine,
            diffusion_base_width: 16,
            diffusion_resolutions: 2,
            diffusion_kernel: 3,
            diffusion_embed_dim: 16,
            diffusion_groups: 8,
            train_stitcher_steps: 1200,
            train_planner_steps: 3000,
            train_batch: 32,
            train_lr: 8e-4,
            train_dataset: "union".into(),
            train_planner_name: "planner".into(),
            aux_epochs: 3,
            aux_hidden: 256,
            aux_lr: 1e-3,
            eval_seeds: 50,
            eval_replan_period: 5,
            eval_gate_radius_cells: 1.0,
            eval_min_task_cells: 0,
            eval_guide_scale: 0.0,
            eval_reference_returns: None,
        }
    }
}

impl ExperimentConfig {
    /// Parse a config file: `key = value` per line, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), "expected `key = value`")
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::config("config", format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        ExperimentConfig::parse(&text)
    }

    /// Apply one override; used both by the parser and the CLI flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
        }
        match key {
            "layout" => self.layout = value.to_string(),
            "master_seed" => self.master_seed = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "collect.transitions" => self.collect_transitions = num(key, value)?,
            "collect.max_cell_dist" => self.collect_max_cell_dist = num(key, value)?,
            "env.dt" => self.env.dt = num(key, value)?,
            "env.v_max" => self.env.v_max = num(key, value)?,
            "env.kp" => self.env.kp = num(key, value)?,
            "env.kd" => self.env.kd = num(key, value)?,
            "env.gate_radius_cells" => self.env.gate_radius_cells = num(key, value)?,
            "stitch.candidates" => self.stitch_candidates = num(key, value)?,
            "stitch.delta_cells" => self.stitch_delta_cells = num(key, value)?,
            "stitch.metric" => {
                self.stitch_metric = match value {
                    "euclidean" => DistanceMetric::Euclidean,
                    "cosine" => DistanceMetric::Cosine,
                    other => {
                        return Err(Error::config(key, format!("unknown metric `{other}`")))
                    }
                }
            }
            "stitch.horizon" => self.stitch_horizon = num(key, value)?,
            "stitch.iterations" => self.stitch_iterations = num(key, value)?,
            "stitch.eps_dyn" => self.stitch_eps_dyn = Some(num(key, value)?),
            "hierarchy.jumps" => {
                self.hierarchy_jumps = value
                    .split(',')
                    .map(|v| num("hierarchy.jumps", v.trim()))
                    .collect::<Result<_>>()?
            }
            "hierarchy.top_count" => self.hierarchy_top_count = num(key, value)?,
            "hierarchy.strict" => self.hierarchy_strict = num(key, value)?,
            "diffusion.m_steps" => self.diffusion_m_steps = num(key, value)?,
            "diffusion.schedule" => self.diffusion_schedule = ScheduleKind::parse(value)?,
            "diffusion.base_width" => self.diffusion_base_width = num(key, value)?,
            "diffusion.resolutions" => self.diffusion_resolutions = num(key, value)?,
            "diffusion.kernel" => self.diffusion_kernel = num(key, value)?,
            "diffusion.embed_dim" => self.diffusion_embed_dim = num(key, value)?,
            "diffusion.groups" => self.diffusion_groups = num(key, value)?,
            "train.stitcher_steps" => self.train_stitcher_steps = num(key, value)?,
            "train.planner_steps" => self.train_planner_steps = num(key, value)?,
            "train.batch" => self.train_batch = num(key, value)?,
            "train.lr" => self.train_lr = num(key, value)?,
            "train.dataset" => self.train_dataset = value.to_string(),
            "train.planner_name" => self.train_planner_name = value.to_string(),
            "aux.epochs" => self.aux_epochs = num(key, value)?,
            "aux.hidden" => self.aux_hidden = num(key, value)?,
            "aux.lr" => self.aux_lr = num(key, value)?,
            "eval.seeds" => self.eval_seeds = num(key, value)?,
            "eval.replan_period" => self.eval_replan_period = num(key, value)?,
            "eval.gate_radius_cells" => self.eval_gate_radius_cells = num(key, value)?,
            "eval.min_task_cells" => self.eval_min_task_cells = num(key, value)?,
            "eval.guide_scale" => self.eval_guide_scale = num(key, value)?,
            "eval.reference_returns" => {
                self.eval_reference_returns = Some(PathBuf::from(value))
            }
            other => return Err(Error::config(other, "unknown configuration key")),
        }
        Ok(())
    }

    /// Validate every field against the preconditions of the modules it
    /// feeds, before any work starts.
    pub fn validate(&self) -> Result<(MazeSpec, HierarchySpec)> {
        let spec = maze::load_layout(&self.layout)
            .map_err(|e| Error::config("layout", e.to_string()))?;
        if self.collect_transitions == 0 {
            return Err(Error::config("collect.transitions", "must be >= 1"));
        }
        if self.collect_max_cell_dist == 0 {
            return Err(Error::config("collect.max_cell_dist", "must be >= 1"));
        }
        if self.env.dt <= 0.0 || self.env.v_max <= 0.0 {
            return Err(Error::config("env.dt", "dt and v_max must be positive"));
        }
        if self.env.kp <= 0.0 || self.env.kd < 0.0 {
            return Err(Error::config("env.kp", "controller gains must be positive"));
        }
        let hierarchy = if self.hierarchy_strict {
            HierarchySpec::strict(&self.hierarchy_jumps, self.hierarchy_top_count)
        } else {
            HierarchySpec::new(
                self.hierarchy_jumps.clone(),
                vec![self.hierarchy_top_count; self.hierarchy_jumps.len()],
                false,
            )
        }
        .map_err(|e| Error::config("hierarchy.jumps", e.to_string()))?;
        self.stitch_config(&spec)?.validate()?;
        crate::diffusion::DiffusionSchedule::new(self.diffusion_schedule, self.diffusion_m_steps)
            .map_err(|e| Error::config("diffusion.m_steps", e.to_string()))?;
        if self.diffusion_kernel % 2 == 0 {
            return Err(Error::config("diffusion.kernel", "must be odd"));
        }
        if self.diffusion_base_width % self.diffusion_groups != 0 {
            return Err(Error::config(
                "diffusion.base_width",
                "must be divisible by diffusion.groups",
            ));
        }
        if self.train_batch == 0 || self.train_lr <= 0.0 {
            return Err(Error::config("train.batch", "batch and lr must be positive"));
        }
        if self.eval_seeds == 0 {
            return Err(Error::config("eval.seeds", "must be >= 1"));
        }
        if self.eval_replan_period == 0 {
            return Err(Error::config("eval.replan_period", "must be >= 1"));
        }
        if self.eval_gate_radius_cells <= 0.0 {
            return Err(Error::config("eval.gate_radius_cells", "must be > 0"));
        }
        Ok((spec, hierarchy))
    }

    pub fn stitch_config(&self, spec: &MazeSpec) -> Result<StitchConfig> {
        Ok(StitchConfig {
            candidates: self.stitch_candidates,
            delta: self.stitch_delta_cells * spec.cell_size,
            metric: self.stitch_metric,
            horizon: self.stitch_horizon,
            iterations: self.stitch_iterations,
            eps_dyn: self
                .stitch_eps_dyn
                .unwrap_or(1.5 * self.env.v_max * self.env.dt),
        })
    }

    fn unet_config(&self, levels: usize) -> UnetConfig {
        UnetConfig {
            in_channels: 4,
            base_width: self.diffusion_base_width,
            resolutions: self.diffusion_resolutions,
            kernel: self.diffusion_kernel,
            embed_dim: self.diffusion_embed_dim,
            levels,
            groups: self.diffusion_groups,
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }

    fn aux_config(&self) -> AuxTrainConfig {
        AuxTrainConfig {
            epochs: self.aux_epochs,
            batch: 256,
            adam: self.adam(self.aux_lr),
            hidden: self.aux_hidden,
        }
    }
}

// ── pipeline ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Stitcher,
    Planner,
    InvDyn,
    Reward,
    Depth,
}

impl TrainTarget {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stitcher" => Ok(TrainTarget::Stitcher),
            "planner" => Ok(TrainTarget::Planner),
            "invdyn" => Ok(TrainTarget::InvDyn),
            "reward" => Ok(TrainTarget::Reward),
            "depth" => Ok(TrainTarget::Depth),
            other => Err(Error::config("train", format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannerKind {
    Flat,
    Hd,
    Hmd,
}

impl PlannerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(PlannerKind::Flat),
            "hd" => Ok(PlannerKind::Hd),
            "hmd" => Ok(PlannerKind::Hmd),
            other => Err(Error::config("planner", format!("unknown planner `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PlannerKind::Flat => "flat",
            PlannerKind::Hd => "hd",
            PlannerKind::Hmd => "hmd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Single,
    Multi,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(TaskKind::Single),
            "multi" => Ok(TaskKind::Multi),
            other => Err(Error::config("task", format!("unknown task `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Single => "single",
            TaskKind::Multi => "multi",
        }
    }
}

/// A validated configuration bound to its maze and output directory.
#[derive(Debug)]
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub spec: MazeSpec,
    pub hierarchy: HierarchySpec,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let (spec, hierarchy) = cfg.validate()?;
        Ok(Pipeline {
            cfg,
            spec,
            hierarchy,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.out_dir)?;
        Ok(())
    }

    fn rng(&self, stream: u64) -> RngStream {
        RngStream::new(self.cfg.master_seed, stream)
    }

    // ── collect ──────────────────────────────────────────────────────

    pub fn collect(&self) -> Result<PathBuf> {
        self.ensure_out_dir()?;
        let mut rng = self.rng(STREAM_COLLECT);
        let ds = dataset::collect_base(
            &self.spec,
            &self.cfg.env,
            self.cfg.collect_transitions,
            self.cfg.collect_max_cell_dist,
            &mut rng,
        )?;
        let path = self.path("d0.pets");
        ds.save(&path)?;
        Ok(path)
    }

    pub fn load_base(&self) -> Result<TrajectoryDataset> {
        TrajectoryDataset::load(self.path("d0.pets"))
    }

    // ── extension rounds ─────────────────────────────────────────────

    /// Run `rounds` of extension, writing per-round datasets and manifests;
    /// optionally also writes the union of the base and all rounds.
    pub fn pte(&self, strategy: Strategy, rounds: usize, aggregate: bool) -> Result<Vec<PathBuf>> {
        self.ensure_out_dir()?;
        let base = self.load_base()?;
        let stitcher = self.load_stitcher()?;
        let invdyn = InverseDynModel::from_checkpoint(&Checkpoint::load(self.path("invdyn.ckpt"))?)?;
        let reward = RewardModel::from_checkpoint(&Checkpoint::load(self.path("reward.ckpt"))?)?;
        let models = StitchModels {
            stitcher: &stitcher,
            invdyn: &invdyn,
            reward: &reward,
        };
        let cfg = self.cfg.stitch_config(&self.spec)?;
        let stream = match strategy {
            Strategy::Linear => STREAM_PTE_LINEAR,
            Strategy::Exponential => STREAM_PTE_EXPONENTIAL,
        };
        let mut rng = self.rng(stream);
        let results = match strategy {
            Strategy::Linear => {
                pte::linear_pte(&base, rounds, &cfg, &self.spec, &models, &mut rng)?
            }
            Strategy::Exponential => {
                pte::exponential_pte(&base, rounds, &cfg, &self.spec, &models, &mut rng)?
            }
        };
        let mut paths = Vec::new();
        for (r, (ds, mut manifest)) in results.iter().cloned().enumerate() {
            let name = format!("d{}_{}", r + 1, strategy.name());
            let path = self.path(&format!("{name}.pets"));
            ds.save(&path)?;
            manifest.timestamp = timestamp();
            std::fs::write(
                self.path(&format!("round_{}_{}.json", r + 1, strategy.name())),
                serde_json::to_string_pretty(&manifest).unwrap(),
            )?;
            paths.push(path);
        }
        if aggregate {
            let mut parts: Vec<&TrajectoryDataset> = vec![&base];
            for (ds, _) in &results {
                parts.push(ds);
            }
            let union = dataset::concat(&parts)?;
            let path = self.path(&format!("d_union_{}.pets", strategy.name()));
            union.save(&path)?;
            paths.push(path);
        }
        Ok(paths)
    }

    // ── training ─────────────────────────────────────────────────────

    fn training_dataset(&self) -> Result<TrajectoryDataset> {
        match self.cfg.train_dataset.as_str() {
            "base" => self.load_base(),
            "union" => TrajectoryDataset::load(self.path("d_union_linear.pets")),
            path => TrajectoryDataset::load(path),
        }
    }

    pub fn train(&self, target: TrainTarget, resume: bool) -> Result<PathBuf> {
        self.ensure_out_dir()?;
        match target {
            TrainTarget::Stitcher => self.train_stitcher(),
            TrainTarget::Planner => self.train_planner(resume),
            TrainTarget::InvDyn => {
                let base = self.load_base()?;
                let mut rng = self.rng(STREAM_AUX).substream(1);
                let model = train_invdyn(&base, &self.cfg.aux_config(), &mut rng)?;
                let path = self.path("invdyn.ckpt");
                model.to_checkpoint().save(&path)?;
                Ok(path)
            }
            TrainTarget::Reward => {
                let base = self.load_base()?;
                let mut rng = self.rng(STREAM_AUX).substream(2);
                let model = train_reward(&base, &self.cfg.aux_config(), &mut rng)?;
                let path = self.path("reward.ckpt");
                model.to_checkpoint().save(&path)?;
                Ok(path)
            }
            TrainTarget::Depth => {
                let ds = self.training_dataset()?;
                let mut rng = self.rng(STREAM_DEPTH);
                let model =
                    train_depth(&ds, &self.hierarchy.horizons(), &self.cfg.aux_config(), &mut rng)?;
                let path = self.path("depth.ckpt");
                model.to_checkpoint().save(&path)?;
                Ok(path)
            }
        }
    }

    fn train_stitcher(&self) -> Result<PathBuf> {
        let base = self.load_base()?;
        let cfg = StitcherTrainConfig {
            unet: self.cfg.unet_config(1),
            schedule: self.cfg.diffusion_schedule,
            m_steps: self.cfg.diffusion_m_steps,
            train_steps: self.cfg.train_stitcher_steps,
            batch: self.cfg.train_batch,
            adam: self.cfg.adam(self.cfg.train_lr),
        };
        let mut rng = self.rng(STREAM_STITCHER);
        let den = pte::train_stitcher(&base, self.cfg.stitch_horizon, &cfg, &mut rng)?;
        let mut ck = den.to_checkpoint();
        ck.set_meta("window", self.cfg.stitch_horizon);
        let path = self.path("stitcher.ckpt");
        ck.save(&path)?;
        Ok(path)
    }

    pub fn load_stitcher(&self) -> Result<Denoiser> {
        Denoiser::from_checkpoint(&Checkpoint::load(self.path("stitcher.ckpt"))?)
    }

    /// Train (or resume) the level-conditioned planner model. Each batch
    /// draws a level uniformly and a window batch at that level's stride;
    /// the level draw counts land in the training manifest.
    fn train_planner(&self, resume: bool) -> Result<PathBuf> {
        let ds = self.training_dataset()?;
        let levels = self.hierarchy.levels();
        let path = self.path(&format!("{}.ckpt", self.cfg.train_planner_name));

        let (mut den, mut rng, done_steps, mut counter) = if resume && path.exists() {
            let ck = Checkpoint::load(&path)?;
            let den = Denoiser::from_checkpoint(&ck)?;
            let counter_pos: u128 = ck.meta_parsed("train.rng_counter")?;
            let done: usize = ck.meta_parsed("train.steps_done")?;
            let rng = RngStream::with_counter(self.cfg.master_seed, STREAM_PLANNER, counter_pos);
            let mut counts = LevelCounter::default();
            if let Some(text) = ck.meta("train.level_counts") {
                for part in text.split(',').filter(|p| !p.is_empty()) {
                    let (l, c) = part.split_once(':').ok_or_else(|| {
                        Error::Checkpoint("bad level counts".into())
                    })?;
                    counts.counts.insert(
                        l.parse().map_err(|_| Error::Checkpoint("bad level".into()))?,
                        c.parse().map_err(|_| Error::Checkpoint("bad count".into()))?,
                    );
                }
            }
            (den, rng, done, counts)
        } else {
            let mut rng = self.rng(STREAM_PLANNER);
            let normalizer = fit_normalizer(&ds);
            let den = Denoiser::new(
                self.cfg.unet_config(levels),
                normalizer,
                self.cfg.diffusion_schedule,
                self.cfg.diffusion_m_steps,
                &mut rng,
            )?;
            (den, rng, 0usize, LevelCounter::default())
        };

        // endpoints carry the conditioning; their loss is masked out
        let adam = self.cfg.adam(self.cfg.train_lr);
        for _ in done_steps..self.cfg.train_planner_steps {
            let level = draw_level(levels, &mut rng);
            counter.record(level);
            let j = self.hierarchy.jumps[level - 1];
            let k = self.hierarchy.counts[level - 1];
            let batch =
                sample_window_batch(&ds, &den.normalizer, j, k, self.cfg.train_batch, &mut rng)?;
            let constrained = [0usize, k];
            train_step(
                &den.unet,
                &mut den.params,
                &den.schedule,
                &batch,
                level,
                &constrained,
                &adam,
                &mut rng,
            )?;
        }

        let mut ck = den.to_checkpoint();
        ck.set_meta("train.rng_counter", rng.counter());
        ck.set_meta("train.steps_done", self.cfg.train_planner_steps);
        ck.set_meta(
            "train.level_counts",
            counter
                .counts
                .iter()
                .map(|(l, c)| format!("{l}:{c}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        ck.set_meta(
            "hierarchy.jumps",
            self.hierarchy
                .jumps
                .iter()
                .map(|j| j.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        ck.set_meta(
            "hierarchy.counts",
            self.hierarchy
                .counts
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        ck.set_meta("hierarchy.strict", self.hierarchy.strict);
        ck.save(&path)?;

        // level-frequency manifest beside the checkpoint
        let manifest = serde_json::json!({
            "steps": self.cfg.train_planner_steps,
            "levels": levels,
            "level_counts": counter.counts,
            "timestamp": timestamp(),
        });
        std::fs::write(
            self.path(&format!("{}_train.json", self.cfg.train_planner_name)),
            serde_json::to_string_pretty(&manifest).unwrap(),
        )?;
        Ok(path)
    }

    pub fn load_planner(&self, name: &str) -> Result<(Denoiser, HierarchySpec)> {
        let ck = Checkpoint::load(self.path(&format!("{name}.ckpt")))?;
        let den = Denoiser::from_checkpoint(&ck)?;
        let jumps: Vec<usize> = ck
            .meta("hierarchy.jumps")
            .ok_or_else(|| Error::Checkpoint("missing hierarchy".into()))?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Checkpoint("bad jumps".into())))
            .collect::<Result<_>>()?;
        let counts: Vec<usize> = ck
            .meta("hierarchy.counts")
            .ok_or_else(|| Error::Checkpoint("missing hierarchy".into()))?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Checkpoint("bad counts".into())))
            .collect::<Result<_>>()?;
        let strict: bool = ck.meta_parsed("hierarchy.strict")?;
        Ok((den, HierarchySpec::new(jumps, counts, strict)?))
    }

    // ── evaluation ───────────────────────────────────────────────────

    pub fn eval(&self, planner: PlannerKind, task: TaskKind, seeds: usize) -> Result<EvalReport> {
        let start = Instant::now();
        let name = match planner {
            PlannerKind::Flat => "flat",
            _ => self.cfg.train_planner_name.as_str(),
        };
        let (den, hierarchy) = self.load_planner(name)?;
        let invdyn =
            InverseDynModel::from_checkpoint(&Checkpoint::load(self.path("invdyn.ckpt"))?)?;
        let depth = if planner == PlannerKind::Hmd {
            Some(DepthPredictor::from_checkpoint(&Checkpoint::load(
                self.path("depth.ckpt"),
            )?)?)
        } else {
            None
        };
        let refs = match &self.cfg.eval_reference_returns {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                Some(maze::parse_reference_file(&text, &self.spec.name)?)
            }
            None => None,
        };

        let control = ControlConfig {
            replan_period: self.cfg.eval_replan_period,
            gate_radius: self.cfg.eval_gate_radius_cells * self.spec.cell_size,
            adaptive: planner == PlannerKind::Hmd,
            guide_scale: self.cfg.eval_guide_scale,
        };
        let goal_fixed = match task {
            TaskKind::Single => Some(self.bottom_right_goal()),
            TaskKind::Multi => None,
        };
        let eval_rng = self.rng(STREAM_EVAL);

        let per_seed: Result<Vec<SeedResult>> = (0..seeds)
            .into_par_iter()
            .map(|i| {
                let mut rng = eval_rng.substream(i as u64);
                let (start_state, goal) = match goal_fixed {
                    Some(goal) => {
                        // randomize the start only
                        let free = self.spec.free_cells();
                        let goal_cell = self.spec.cell_of(goal.0, goal.1).unwrap();
                        let (s, _) = loop {
                            let cell = free[rng.index(free.len())];
                            if cell != goal_cell {
                                let (cx, cy) = self.spec.cell_center(cell);
                                let jx = rng.uniform_range(-0.3, 0.3) * self.spec.cell_size;
                                let jy = rng.uniform_range(-0.3, 0.3) * self.spec.cell_size;
                                break (PointState::at(cx + jx, cy + jy), goal);
                            }
                        };
                        (s, goal)
                    }
                    None => maze::sample_task(&self.spec, &mut rng, self.cfg.eval_min_task_cells),
                };
                let bundle = PlannerBundle {
                    den: &den,
                    hierarchy: hierarchy.clone(),
                    invdyn: &invdyn,
                    depth: depth.as_ref(),
                };
                let episode = control_episode(
                    &self.spec,
                    &self.cfg.env,
                    &bundle,
                    &control,
                    start_state,
                    goal,
                    &mut rng,
                )?;
                // gate discipline: the controller only ever acts inside the
                // gate; a violation here is a planner bug, not task failure
                for t in &episode.trace {
                    if t.gate {
                        debug_assert_eq!(t.level, 0);
                    }
                }
                let score = refs
                    .as_ref()
                    .map(|r| maze::normalized_score(episode.total_return, r))
                    .transpose()?;
                Ok(SeedResult {
                    seed: i as u64,
                    total_return: episode.total_return,
                    steps: episode.steps,
                    reached: episode.reached,
                    replans: episode.replans,
                    windows_sampled: episode.windows_sampled,
                    score,
                })
            })
            .collect();
        let per_seed = per_seed?;

        let returns: Vec<f64> = per_seed.iter().map(|s| s.total_return).collect();
        let (mean_return, stderr_return) = mean_stderr(&returns);
        let reach_rate =
            per_seed.iter().filter(|s| s.reached).count() as f64 / per_seed.len() as f64;
        let scores: Vec<f64> = per_seed.iter().filter_map(|s| s.score).collect();
        let (mean_score, stderr_score) = if scores.len() == per_seed.len() {
            let (m, s) = mean_stderr(&scores);
            (Some(m), Some(s))
        } else {
            (None, None)
        };

        let report = EvalReport {
            layout: self.spec.name.clone(),
            planner: planner.name().to_string(),
            task: task.name().to_string(),
            seeds: per_seed.len(),
            mean_return,
            stderr_return,
            reach_rate,
            mean_score,
            stderr_score,
            per_seed,
            wall_clock_s: start.elapsed().as_secs_f64(),
            timestamp: timestamp(),
        };
        self.ensure_out_dir()?;
        std::fs::write(
            self.path(&format!("eval_{}_{}.json", planner.name(), task.name())),
            serde_json::to_string_pretty(&report).unwrap(),
        )?;
        Ok(report)
    }

    fn bottom_right_goal(&self) -> (f64, f64) {
        let cell = self
            .spec
            .free_cells()
            .into_iter()
            .max_by_key(|&(r, c)| (r, c))
            .expect("layouts have free cells");
        self.spec.cell_center(cell)
    }

    // ── metrics and reports ──────────────────────────────────────────

    /// CSV of dataset metrics: one row per file plus a fixed-bin length
    /// histogram (width 25, up to 500).
    pub fn metrics(&self, paths: &[PathBuf]) -> Result<String> {
        let mut out = String::from("dataset,trajectories,transitions,mean_length,min_length,max_length,coverage");
        let bins: Vec<usize> = (0..20).map(|i| i * 25).collect();
        for b in &bins {
            let _ = write!(out, ",len_{}_{}", b, b + 25);
        }
        out.push('\n');
        for path in paths {
            let ds = TrajectoryDataset::load(path)?;
            let coverage = dataset::start_goal_coverage(&ds, &self.spec)?;
            let mut hist = vec![0usize; bins.len()];
            for t in &ds.trajectories {
                let b = (t.len() / 25).min(bins.len() - 1);
                hist[b] += 1;
            }
            let _ = write!(
                out,
                "{},{},{},{:.4},{},{},{:.6}",
                path.file_name().and_then(|n| n.to_str()).unwrap_or("?"),
                ds.len(),
                ds.transitions(),
                dataset::mean_length(&ds)?,
                ds.min_length(),
                ds.max_length(),
                coverage
            );
            for h in hist {
                let _ = write!(out, ",{h}");
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Combined CSV over every eval report in the output directory.
    pub fn report(&self) -> Result<String> {
        let mut rows = Vec::new();
        for entry in std::fs::read_dir(&self.cfg.out_dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if name.starts_with("eval_") && name.ends_with(".json") {
                let text = std::fs::read_to_string(entry.path())?;
                let report: EvalReport = serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("bad eval report {name}: {e}")))?;
                rows.push(report);
            }
        }
        rows.sort_by(|a, b| (a.planner.clone(), a.task.clone()).cmp(&(b.planner.clone(), b.task.clone())));
        let mut out = String::from(
            "planner,task,layout,seeds,mean_return,stderr_return,reach_rate,mean_score,stderr_score\n",
        );
        for r in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4},{:.4},{:.4},{},{}",
                r.planner,
                r.task,
                r.layout,
                r.seeds,
                r.mean_return,
                r.stderr_return,
                r.reach_rate,
                r.mean_score.map(|v| format!("{v:.3}")).unwrap_or_default(),
                r.stderr_score.map(|v| format!("{v:.3}")).unwrap_or_default(),
            );
        }
        Ok(out)
    }
}

// ── reports ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub total_return: f64,
    pub steps: usize,
    pub reached: bool,
    pub replans: usize,
    pub windows_sampled: usize,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub layout: String,
    pub planner: String,
    pub task: String,
    pub seeds: usize,
    pub mean_return: f64,
    /// Sample standard deviation divided by sqrt(seeds).
    pub stderr_return: f64,
    pub reach_rate: f64,
    pub mean_score: Option<f64>,
    pub stderr_score: Option<f64>,
    pub per_seed: Vec<SeedResult>,
    /// Designated non-reproducible fields.
    pub wall_clock_s: f64,
    pub timestamp: String,
}

/// Mean and standard error (sample stddev / sqrt(n)).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn timestamp() -> String {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{now}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_defaults_and_overrides() {
        let cfg = ExperimentConfig::parse(
            "# comment\nlayout = mini\nmaster_seed = 11\nstitch.horizon = 10\nhierarchy.jumps = 1, 4, 16\n",
        )
        .unwrap();
        assert_eq!(cfg.layout, "mini");
        assert_eq!(cfg.master_seed, 11);
        assert_eq!(cfg.stitch_horizon, 10);
        assert_eq!(cfg.hierarchy_jumps, vec![1, 4, 16]);
        // unchanged defaults
        assert_eq!(cfg.stitch_candidates, 32);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_field() {
        let err = ExperimentConfig::parse("nonsense.key = 1\n").unwrap_err();
        assert!(err.to_string().contains("nonsense.key"), "{err}");
        let err = ExperimentConfig::parse("master_seed = banana\n").unwrap_err();
        assert!(err.to_string().contains("master_seed"), "{err}");
        let err = ExperimentConfig::parse("no equals sign\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn validation_names_offending_fields() {
        let mut cfg = ExperimentConfig::default();
        cfg.layout = "missing".into();
        let err = Pipeline::new(cfg).unwrap_err();
        assert!(err.to_string().contains("layout"), "{err}");

        let mut cfg = ExperimentConfig::default();
        cfg.hierarchy_jumps = vec![1, 8, 12];
        let err = Pipeline::new(cfg).unwrap_err();
        assert!(err.to_string().contains("hierarchy.jumps"), "{err}");

        let mut cfg = ExperimentConfig::default();
        cfg.collect_transitions = 0;
        let err = Pipeline::new(cfg).unwrap_err();
        assert!(err.to_string().contains("collect.transitions"), "{err}");

        let mut cfg = ExperimentConfig::default();
        cfg.stitch_horizon = 2;
        let err = Pipeline::new(cfg).unwrap_err();
        assert!(err.to_string().contains("horizon"), "{err}");

        let mut cfg = ExperimentConfig::default();
        cfg.diffusion_kernel = 4;
        let err = Pipeline::new(cfg).unwrap_err();
        assert!(err.to_string().contains("diffusion.kernel"), "{err}");

        assert!(Pipeline::new(ExperimentConfig::default()).is_ok());
    }

    #[test]
    fn stderr_matches_hand_computation() {
        // five values, stddev / sqrt(5) by hand
        let vals = [1.0f64, 2.0, 3.0, 4.0, 10.0];
        let mean = 4.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let want = (var / 5.0).sqrt();
        let (m, s) = mean_stderr(&vals);
        assert_eq!(m, mean);
        assert!((s - want).abs() < 1e-12);
        assert_eq!(mean_stderr(&[3.0]), (3.0, 0.0));
    }
}
