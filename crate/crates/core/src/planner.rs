//! Hierarchical planning and the replanning control loop.
//!
//! One level-conditioned denoiser serves every level of the hierarchy: the
//! top level samples a sparse subgoal window pinned to the start and goal,
//! then every consecutive subgoal pair is recursively refined one level
//! down until the dense level-1 plan emerges. An adaptive start level is
//! chosen per plan by the depth predictor, so near goals skip the coarse
//! levels entirely.

use serde::Serialize;

use crate::diffusion::{Constraint, Denoiser, Guide};
use crate::maze::{self, Action2D, DynamicsConfig, MazeSpec, PointState};
use crate::models::{DepthPredictor, InverseDynModel};
use crate::rng::RngStream;
use crate::{Error, Result};

// ── hierarchy geometry ───────────────────────────────────────────────

/// Jump lengths and jump counts per level. In the default strict-alignment
/// mode each level's horizon equals the next level's jump length, so every
/// higher-level jump decomposes into exactly one lower-level window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HierarchySpec {
    pub jumps: Vec<usize>,
    pub counts: Vec<usize>,
    pub strict: bool,
}

impl HierarchySpec {
    /// Build a strict hierarchy from jump lengths; the jump counts of all
    /// but the top level are forced by alignment, the top count is free.
    pub fn strict(jumps: &[usize], top_count: usize) -> Result<Self> {
        let mut counts = Vec::with_capacity(jumps.len());
        for i in 0..jumps.len() {
            if i + 1 < jumps.len() {
                if jumps[i + 1] % jumps[i] != 0 {
                    return Err(Error::config(
                        "jumps",
                        format!(
                            "strict alignment needs {} | {}",
                            jumps[i],
                            jumps[i + 1]
                        ),
                    ));
                }
                counts.push(jumps[i + 1] / jumps[i]);
            } else {
                counts.push(top_count);
            }
        }
        HierarchySpec::new(jumps.to_vec(), counts, true)
    }

    pub fn new(jumps: Vec<usize>, counts: Vec<usize>, strict: bool) -> Result<Self> {
        let spec = HierarchySpec {
            jumps,
            counts,
            strict,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.jumps.is_empty() || self.jumps.len() != self.counts.len() {
            return Err(Error::config("jumps", "jump lengths and counts must align"));
        }
        if self.jumps[0] != 1 {
            return Err(Error::config("jumps", "the lowest level must have jump length 1"));
        }
        if self.jumps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("jumps", "jump lengths must be strictly increasing"));
        }
        if self.counts.iter().any(|&k| k == 0) {
            return Err(Error::config("counts", "jump counts must be >= 1"));
        }
        for l in 0..self.levels() - 1 {
            let pin = self.pin_index(l + 1);
            if pin == 0 || pin > self.counts[l] {
                return Err(Error::config(
                    "counts",
                    format!(
                        "level {} cannot span one level-{} jump (pin {pin} of {} jumps)",
                        l + 1,
                        l + 2,
                        self.counts[l]
                    ),
                ));
            }
            if self.strict && self.horizon(l + 1) != self.jumps[l + 1] {
                return Err(Error::config(
                    "counts",
                    format!(
                        "strict alignment requires horizon({}) == jump({}); got {} vs {}",
                        l + 1,
                        l + 2,
                        self.horizon(l + 1),
                        self.jumps[l + 1]
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.jumps.len()
    }

    /// Effective horizon `H_l = j_l * k_l` for 1-based `level`.
    pub fn horizon(&self, level: usize) -> usize {
        self.jumps[level - 1] * self.counts[level - 1]
    }

    pub fn horizons(&self) -> Vec<usize> {
        (1..=self.levels()).map(|l| self.horizon(l)).collect()
    }

    /// States per window at a level.
    pub fn window(&self, level: usize) -> usize {
        self.counts[level - 1] + 1
    }

    /// Window index where a refined child is pinned to its parent's next
    /// subgoal: the full window end under strict alignment, the ceiling of
    /// the jump ratio otherwise (the tail beyond it is truncated).
    pub fn pin_index(&self, level: usize) -> usize {
        if level >= self.levels() || self.strict {
            return self.counts[level - 1];
        }
        self.jumps[level].div_ceil(self.jumps[level - 1])
    }
}

// ── plans ────────────────────────────────────────────────────────────

/// One sampled window per subgoal pair at a level, coarse to fine.
#[derive(Debug, Clone)]
pub struct LevelPlan {
    pub level: usize,
    /// Raw-space time-major windows (`window_len * state_dim` each).
    pub windows: Vec<Vec<f64>>,
    /// Pin index used when splicing consecutive windows.
    pub pin: usize,
}

/// The full recursive plan: one [`LevelPlan`] per visited level plus the
/// assembled dense state sequence.
#[derive(Debug, Clone)]
pub struct PlanTree {
    pub start_level: usize,
    pub levels: Vec<LevelPlan>,
    /// Dense plan states, start first.
    pub dense: Vec<Vec<f64>>,
}

impl PlanTree {
    /// Total windows sampled while building this plan.
    pub fn windows_sampled(&self) -> usize {
        self.levels.iter().map(|l| l.windows.len()).sum()
    }
}

/// Coarse-to-fine recursive planning: sample the start level pinned to
/// `(start, goal)`, then refine every consecutive subgoal pair one level
/// down with both ends pinned, until level 1.
pub fn plan_recursive(
    den: &Denoiser,
    hierarchy: &HierarchySpec,
    start_level: usize,
    start: &[f64],
    goal: &[f64],
    rng: &mut RngStream,
    guide: Option<&dyn Guide>,
    guide_scale: f64,
) -> Result<PlanTree> {
    if start_level == 0 || start_level > hierarchy.levels() {
        return Err(Error::Plan(format!(
            "start level {start_level} outside 1..={}",
            hierarchy.levels()
        )));
    }
    let mut levels: Vec<LevelPlan> = Vec::new();

    // top window: endpoints pinned to the task
    let top_window = hierarchy.window(start_level);
    let top_pin = hierarchy.counts[start_level - 1];
    let cons =
        vec![Constraint::default().pin(0, start.to_vec()).pin(top_pin, goal.to_vec())];
    let windows = den.sample(top_window, start_level, &cons, rng, guide, guide_scale)?;
    levels.push(LevelPlan {
        level: start_level,
        windows,
        pin: top_pin,
    });

    // refine downwards
    let dim = den.dim();
    for level in (1..start_level).rev() {
        let parent = levels.last().unwrap();
        let mut pairs: Vec<Constraint> = Vec::new();
        for w in &parent.windows {
            for t in 0..parent.pin {
                let a = w[t * dim..(t + 1) * dim].to_vec();
                let b = w[(t + 1) * dim..(t + 2) * dim].to_vec();
                let pin = hierarchy.pin_index(level);
                pairs.push(Constraint::default().pin(0, a).pin(pin, b));
            }
        }
        let window = hierarchy.window(level);
        let pin = hierarchy.pin_index(level);
        let windows = den.sample(window, level, &pairs, rng, guide, guide_scale)?;
        levels.push(LevelPlan {
            level,
            windows,
            pin,
        });
    }

    // dense plan: splice the finest level, dropping duplicated junctions
    let finest = levels.last().unwrap();
    let mut dense: Vec<Vec<f64>> = Vec::new();
    for w in &finest.windows {
        let from = if dense.is_empty() { 0 } else { 1 };
        for t in from..=finest.pin {
            dense.push(w[t * dim..(t + 1) * dim].to_vec());
        }
    }
    Ok(PlanTree {
        start_level,
        levels,
        dense,
    })
}

/// Flat planning: a single dense window over `horizon` steps. Identical to
/// [`plan_recursive`] with a one-level hierarchy.
pub fn plan_flat(
    den: &Denoiser,
    horizon: usize,
    start: &[f64],
    goal: &[f64],
    rng: &mut RngStream,
) -> Result<PlanTree> {
    let hierarchy = HierarchySpec::strict(&[1], horizon)?;
    plan_recursive(den, &hierarchy, 1, start, goal, rng, None, 0.0)
}

/// Fixed-hierarchy planning: always start from the top level.
pub fn plan_fixed(
    den: &Denoiser,
    hierarchy: &HierarchySpec,
    start: &[f64],
    goal: &[f64],
    rng: &mut RngStream,
) -> Result<PlanTree> {
    plan_recursive(den, hierarchy, hierarchy.levels(), start, goal, rng, None, 0.0)
}

/// Start level for a task: the depth predictor's choice, or the top level
/// when adaptive selection is disabled.
pub fn select_start_level(
    depth: Option<&DepthPredictor>,
    hierarchy: &HierarchySpec,
    start: &[f64],
    goal: &[f64],
) -> usize {
    match depth {
        Some(model) => model.predict_depth(start, goal).min(hierarchy.levels()),
        None => hierarchy.levels(),
    }
}

// ── control loop ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct ControlConfig {
    /// Steps between replans (1 = replan every step).
    pub replan_period: usize,
    /// PD controller gate radius in world units.
    pub gate_radius: f64,
    /// Query the depth predictor per replan; otherwise always start at the
    /// top level.
    pub adaptive: bool,
    pub guide_scale: f64,
}

/// Per-step record kept for audit and export.
#[derive(Debug, Clone, Serialize)]
pub struct StepTrace {
    pub state: [f64; 4],
    pub action: [f64; 2],
    /// Whether the PD gate was open (and the controller therefore used).
    pub gate: bool,
    pub replanned: bool,
    /// Active plan's start level; 0 while the controller is in charge.
    pub level: u8,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub total_return: f64,
    pub steps: usize,
    pub reached: bool,
    pub replans: usize,
    pub windows_sampled: usize,
    pub level_switches: usize,
    pub trace: Vec<StepTrace>,
}

impl EpisodeResult {
    /// JSON-lines export: one object per step.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.trace {
            out.push_str(&serde_json::to_string(t).unwrap());
            out.push('\n');
        }
        out
    }
}

/// Models the control loop needs.
pub struct PlannerBundle<'a> {
    pub den: &'a Denoiser,
    pub hierarchy: HierarchySpec,
    pub invdyn: &'a InverseDynModel,
    pub depth: Option<&'a DepthPredictor>,
}

/// Run one goal-reaching episode: the PD controller acts inside the gate
/// radius, the planner drives everything else by following the dense plan
/// and replanning every `replan_period` steps.
pub fn control_episode(
    spec: &MazeSpec,
    dyncfg: &DynamicsConfig,
    bundle: &PlannerBundle,
    cfg: &ControlConfig,
    start: PointState,
    goal: (f64, f64),
    rng: &mut RngStream,
) -> Result<EpisodeResult> {
    let goal_state = vec![goal.0, goal.1, 0.0, 0.0];
    let mut s = start;
    let mut total_return = 0.0;
    let mut reached = false;
    let mut trace = Vec::with_capacity(spec.max_steps);
    let mut replans = 0usize;
    let mut windows_sampled = 0usize;
    let mut level_switches = 0usize;

    let mut plan: Option<PlanTree> = None;
    let mut plan_pos = 0usize;
    let mut since_replan = 0usize;
    let mut last_level = 0usize;

    for _ in 0..spec.max_steps {
        let gate = maze::pd_gate(&s, goal, cfg.gate_radius);
        let (action, replanned, level) = if gate {
            (maze::pd_control(dyncfg, &s, goal), false, 0u8)
        } else {
            let state_vec = s.to_vec().to_vec();
            let need_replan = match &plan {
                None => true,
                Some(p) => since_replan >= cfg.replan_period || plan_pos + 1 >= p.dense.len(),
            };
            let mut replanned = false;
            if need_replan {
                let level = if cfg.adaptive {
                    select_start_level(bundle.depth, &bundle.hierarchy, &state_vec, &goal_state)
                } else {
                    bundle.hierarchy.levels()
                };
                if last_level != 0 && level != last_level {
                    level_switches += 1;
                }
                last_level = level;
                let tree = plan_recursive(
                    bundle.den,
                    &bundle.hierarchy,
                    level,
                    &state_vec,
                    &goal_state,
                    rng,
                    None,
                    cfg.guide_scale,
                )?;
                windows_sampled += tree.windows_sampled();
                replans += 1;
                plan = Some(tree);
                plan_pos = 0;
                since_replan = 0;
                replanned = true;
            }
            let tree = plan.as_ref().unwrap();
            let next_idx = (plan_pos + 1).min(tree.dense.len() - 1);
            let target = &tree.dense[next_idx];
            let a = bundle.invdyn.infer_action(&state_vec, target);
            plan_pos += 1;
            since_replan += 1;
            (
                Action2D::new(a[0], a[1]),
                replanned,
                tree.start_level as u8,
            )
        };

        let (next, r, done) = maze::step(spec, dyncfg, &s, action, goal);
        trace.push(StepTrace {
            state: s.to_vec(),
            action: [action.ax, action.ay],
            gate,
            replanned,
            level,
        });
        total_return += r;
        s = next;
        if done {
            reached = true;
            break;
        }
    }
    Ok(EpisodeResult {
        total_return,
        steps: trace.len(),
        reached,
        replans,
        windows_sampled,
        level_switches,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::nn::Normalizer;
    use crate::unet::UnetConfig;

    fn toy_denoiser(levels: usize, seed: u64) -> Denoiser {
        let cfg = UnetConfig {
            in_channels: 4,
            base_width: 8,
            resolutions: 1,
            kernel: 3,
            embed_dim: 8,
            levels,
            groups: 4,
        };
        let norm = Normalizer {
            lo: vec![0.0, 0.0, -2.0, -2.0],
            hi: vec![14.0, 10.0, 2.0, 2.0],
        };
        let mut rng = RngStream::new(seed, 0);
        Denoiser::new(cfg, norm, ScheduleKind::Cosine, 8, &mut rng).unwrap()
    }

    #[test]
    fn hierarchy_validation() {
        // strict (1, 5, 25) with free top count
        let h = HierarchySpec::strict(&[1, 5, 25], 5).unwrap();
        assert_eq!(h.counts, vec![5, 5, 5]);
        assert_eq!(h.horizons(), vec![5, 25, 125]);
        assert_eq!(h.window(2), 6);

        // (1, 8, 12, 15) violates divisibility in strict mode
        assert!(HierarchySpec::strict(&[1, 8, 12, 15], 26).is_err());
        // but is accepted in relaxed mode with explicit counts
        let relaxed =
            HierarchySpec::new(vec![1, 8, 12, 15], vec![26, 26, 26, 26], false).unwrap();
        assert_eq!(relaxed.pin_index(1), 8); // ceil(8/1)
        assert_eq!(relaxed.pin_index(2), 2); // ceil(12/8)
        assert_eq!(relaxed.pin_index(3), 2); // ceil(15/12)
        assert_eq!(relaxed.pin_index(4), 26); // top window end

        // degenerate single level
        let flat = HierarchySpec::strict(&[1], 16).unwrap();
        assert_eq!(flat.levels(), 1);

        // basic invariants
        assert!(HierarchySpec::new(vec![2, 4], vec![2, 2], true).is_err(), "j1 != 1");
        assert!(HierarchySpec::new(vec![1, 1], vec![1, 1], true).is_err(), "non-increasing");
        assert!(HierarchySpec::new(vec![1, 5], vec![0, 2], true).is_err(), "zero count");
        // strict mismatch: k1 * j1 != j2
        assert!(HierarchySpec::new(vec![1, 5], vec![4, 2], true).is_err());
    }

    #[test]
    fn recursion_produces_consistent_endpoints_and_sizes() {
        let h = HierarchySpec::strict(&[1, 5, 25], 5).unwrap();
        let den = toy_denoiser(3, 7);
        let start = vec![1.0, 3.0, 0.0, 0.0];
        let goal = vec![11.0, 3.0, 0.0, 0.0];
        let mut rng = RngStream::new(70, 0);
        let tree = plan_recursive(&den, &h, 3, &start, &goal, &mut rng, None, 0.0).unwrap();

        // window counts per level: 1, k3, k3*k2
        assert_eq!(tree.levels[0].windows.len(), 1);
        assert_eq!(tree.levels[1].windows.len(), 5);
        assert_eq!(tree.levels[2].windows.len(), 25);
        // dense plan spans the full top horizon
        assert_eq!(tree.dense.len(), h.horizon(3) + 1);

        // top endpoints equal the task exactly
        let dim = 4;
        let top = &tree.levels[0].windows[0];
        assert_eq!(&top[..dim], &start[..]);
        assert_eq!(&top[5 * dim..6 * dim], &goal[..]);

        // every child window's endpoints equal its parent pair exactly
        for li in 1..tree.levels.len() {
            let parent = &tree.levels[li - 1];
            let child = &tree.levels[li];
            let mut ci = 0;
            for pw in &parent.windows {
                for t in 0..parent.pin {
                    let a = &pw[t * dim..(t + 1) * dim];
                    let b = &pw[(t + 1) * dim..(t + 2) * dim];
                    let cw = &child.windows[ci];
                    assert_eq!(&cw[..dim], a, "child start");
                    let pin = child.pin;
                    assert_eq!(&cw[pin * dim..(pin + 1) * dim], b, "child end");
                    ci += 1;
                }
            }
            assert_eq!(ci, child.windows.len());
        }

        // dense junction bookkeeping against a loop oracle
        let finest = tree.levels.last().unwrap();
        let mut oracle: Vec<Vec<f64>> = Vec::new();
        for (wi, w) in finest.windows.iter().enumerate() {
            for t in 0..=finest.pin {
                if wi > 0 && t == 0 {
                    continue; // shared junction
                }
                oracle.push(w[t * dim..(t + 1) * dim].to_vec());
            }
        }
        assert_eq!(tree.dense, oracle);
        // dense plan over one level-3 pair has j2 * k1 + 1 = 26 states
        // before junction dedup (25 fresh states per level-2 jump)
        assert_eq!(oracle.len(), 25 * 5 + 1);
    }

    #[test]
    fn single_level_recursion_is_bitwise_flat() {
        let den = toy_denoiser(1, 9);
        let start = vec![1.0, 3.0, 0.0, 0.0];
        let goal = vec![9.0, 3.0, 0.0, 0.0];
        let h = HierarchySpec::strict(&[1], 15).unwrap();
        for seed in 0..100u64 {
            let mut r1 = RngStream::new(seed, 1);
            let mut r2 = RngStream::new(seed, 1);
            let rec = plan_recursive(&den, &h, 1, &start, &goal, &mut r1, None, 0.0).unwrap();
            let flat = plan_flat(&den, 15, &start, &goal, &mut r2).unwrap();
            assert_eq!(rec.dense, flat.dense, "seed {seed}");
        }
    }

    #[test]
    fn invalid_start_level_is_rejected() {
        let den = toy_denoiser(3, 10);
        let h = HierarchySpec::strict(&[1, 5, 25], 2).unwrap();
        let s = vec![1.0, 3.0, 0.0, 0.0];
        let mut rng = RngStream::new(1, 1);
        assert!(plan_recursive(&den, &h, 0, &s, &s, &mut rng, None, 0.0).is_err());
        assert!(plan_recursive(&den, &h, 4, &s, &s, &mut rng, None, 0.0).is_err());
    }

    #[test]
    fn fixed_equals_recursive_from_top() {
        let den = toy_denoiser(2, 11);
        let h = HierarchySpec::strict(&[1, 4], 3).unwrap();
        let start = vec![1.0, 3.0, 0.0, 0.0];
        let goal = vec![5.0, 3.0, 0.0, 0.0];
        let mut r1 = RngStream::new(4, 4);
        let mut r2 = RngStream::new(4, 4);
        let a = plan_fixed(&den, &h, &start, &goal, &mut r1).unwrap();
        let b = plan_recursive(&den, &h, 2, &start, &goal, &mut r2, None, 0.0).unwrap();
        assert_eq!(a.dense, b.dense);
    }

    #[test]
    fn lower_start_levels_sample_fewer_windows() {
        let den = toy_denoiser(3, 12);
        let h = HierarchySpec::strict(&[1, 5, 25], 5).unwrap();
        let start = vec![1.0, 3.0, 0.0, 0.0];
        let goal = vec![2.0, 3.0, 0.0, 0.0];
        let mut rng = RngStream::new(5, 5);
        let full = plan_recursive(&den, &h, 3, &start, &goal, &mut rng, None, 0.0).unwrap();
        let mid = plan_recursive(&den, &h, 2, &start, &goal, &mut rng, None, 0.0).unwrap();
        let low = plan_recursive(&den, &h, 1, &start, &goal, &mut rng, None, 0.0).unwrap();
        assert!(full.windows_sampled() > mid.windows_sampled());
        assert!(mid.windows_sampled() > low.windows_sampled());
        // shallower starts give shorter dense plans: the detour contrast
        assert!(low.dense.len() < mid.dense.len());
        assert!(mid.dense.len() < full.dense.len());
    }

    #[test]
    fn control_episode_respects_the_gate_contract() {
        let spec = crate::maze::load_layout("mini").unwrap();
        let dc = DynamicsConfig::default();
        let den = toy_denoiser(2, 13);
        let invdyn = {
            // quick inverse-dynamics model from a small base set
            let mut rng = RngStream::new(40, 0);
            let ds = crate::dataset::collect_base(&spec, &dc, 600, 1, &mut rng).unwrap();
            crate::models::train_invdyn(
                &ds,
                &crate::models::AuxTrainConfig {
                    epochs: 2,
                    batch: 128,
                    hidden: 32,
                    ..Default::default()
                },
                &mut rng,
            )
            .unwrap()
        };
        let bundle = PlannerBundle {
            den: &den,
            hierarchy: HierarchySpec::strict(&[1, 4], 4).unwrap(),
            invdyn: &invdyn,
            depth: None,
        };
        let cfg = ControlConfig {
            replan_period: 4,
            gate_radius: 2.0,
            adaptive: false,
            guide_scale: 0.0,
        };

        // start within the goal radius: immediate success, no planner calls
        let goal = spec.cell_center((1, 1));
        let at_goal = PointState::at(goal.0 + 0.1, goal.1);
        let mut rng = RngStream::new(41, 0);
        let res =
            control_episode(&spec, &dc, &bundle, &cfg, at_goal, goal, &mut rng).unwrap();
        assert!(res.reached);
        assert_eq!(res.replans, 0, "gate handles the whole episode");
        assert_eq!(res.steps, 1);

        // far start: planner drives outside the gate, PD only inside
        let far = PointState::at(3.0, 3.0);
        let goal = spec.cell_center((3, 1));
        let res = control_episode(&spec, &dc, &bundle, &cfg, far, goal, &mut rng).unwrap();
        for t in &res.trace {
            let s = PointState {
                x: t.state[0],
                y: t.state[1],
                vx: t.state[2],
                vy: t.state[3],
            };
            let open = maze::pd_gate(&s, goal, cfg.gate_radius);
            assert_eq!(t.gate, open, "trace gate flag mirrors the geometry");
            if !open {
                assert!(t.level > 0, "planner action outside the gate");
            }
        }
        // trace exports as one JSON object per step
        let jsonl = res.trace_jsonl();
        assert_eq!(jsonl.lines().count(), res.steps);
        let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert!(first.get("gate").is_some());
    }
}
