//! Point-mass maze environments.
//!
//! A maze is a boolean occupancy grid (true = wall) in world units of
//! `cell_size` per cell. The agent is a 2-d point mass with per-axis
//! acceleration actions in `[-1, 1]`; velocity and position integrate with a
//! fixed `dt`, walls zero the colliding velocity component and clip the
//! position to the wall face. Reward is sparse: 1 within `goal_radius` of
//! the goal, 0 otherwise.

use std::collections::VecDeque;
use std::fmt;

use crate::rng::RngStream;
use crate::{Error, Result};

// ── types ────────────────────────────────────────────────────────────

/// Validated maze layout plus episode constants.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    walls: Vec<bool>,
    /// World units per grid cell.
    pub cell_size: f64,
    /// Goal acceptance radius in world units.
    pub goal_radius: f64,
    /// Episode step budget.
    pub max_steps: usize,
}

/// Position and velocity in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl PointState {
    pub fn at(x: f64, y: f64) -> Self {
        PointState { x, y, vx: 0.0, vy: 0.0 }
    }

    pub fn to_vec(self) -> [f64; 4] {
        [self.x, self.y, self.vx, self.vy]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        PointState {
            x: v[0],
            y: v[1],
            vx: v[2],
            vy: v[3],
        }
    }
}

/// Per-axis acceleration, clamped to `[-1, 1]` on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action2D {
    pub ax: f64,
    pub ay: f64,
}

impl Action2D {
    pub fn new(ax: f64, ay: f64) -> Self {
        let sanitize = |v: f64| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
        Action2D {
            ax: sanitize(ax),
            ay: sanitize(ay),
        }
    }
}

/// Dynamics and controller constants. All tunable; these defaults give
/// stable PD tracking at desk scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsConfig {
    pub dt: f64,
    pub v_max: f64,
    pub kp: f64,
    pub kd: f64,
    /// PD controller gate radius, in cell sizes.
    pub gate_radius_cells: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            dt: 0.1,
            v_max: 2.0,
            kp: 10.0,
            kd: 2.0,
            gate_radius_cells: 2.0,
        }
    }
}

/// Reference returns used by the normalized score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceReturns {
    pub random: f64,
    pub expert: f64,
}

// safety margin keeping clipped positions strictly on the free side of a face
const WALL_EPS: f64 = 1e-9;

// ── layouts ──────────────────────────────────────────────────────────

const MINI: &str = "\
#######
#.....#
#####.#
#.....#
#######";

const LARGE: &str = "\
############
#....#.....#
#.##.#.###.#
#.#..#...#.#
#.#.###.##.#
#.#...#..#.#
#.###.##.#.#
#........#.#
############";

const GIANT: &str = "\
################
#......#.......#
#.####.#.#####.#
#.#..#...#...#.#
#.#.##.###.#.#.#
#.#..#...#.#.#.#
#.##.###.#.#.#.#
#..#...#.#.#...#
##.#.#.#.#.###.#
#..#.#.#.#...#.#
#..............#
################";

const XXLARGE: &str = "\
########################
#......................#
###########.##########.#
#......................#
#.##########.###########
#......................#
###########.##########.#
#......................#
#.##########.###########
#......................#
###########.##########.#
#......................#
#.##########.###########
#......................#
###########.##########.#
#......................#
#.##########.###########
########################";

/// Load a built-in layout (`mini`, `large`, `giant`, `xxlarge`) or a custom
/// text grid via `custom:<path>` ('#' wall, '.' free, one row per line).
pub fn load_layout(name: &str) -> Result<MazeSpec> {
    match name {
        "mini" => MazeSpec::parse("mini", MINI, 2.0, 0.5, 300),
        "large" => MazeSpec::parse("large", LARGE, 1.0, 0.5, 800),
        "giant" => MazeSpec::parse("giant", GIANT, 1.0, 0.5, 1000),
        "xxlarge" => MazeSpec::parse("xxlarge", XXLARGE, 1.0, 0.5, 1300),
        other => {
            if let Some(path) = other.strip_prefix("custom:") {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Layout(format!("cannot read `{path}`: {e}")))?;
                let spec_name = std::path::Path::new(path)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("custom");
                let rows = text.lines().count().max(1);
                let cols = text.lines().next().map(|l| l.len()).unwrap_or(0).max(1);
                let steps = (5 * rows * cols).max(200);
                MazeSpec::parse(spec_name, text.trim_end(), 1.0, 0.5, steps)
            } else {
                Err(Error::Layout(format!("unknown layout `{name}`")))
            }
        }
    }
}

impl MazeSpec {
    /// Parse and validate a text grid.
    pub fn parse(
        name: &str,
        text: &str,
        cell_size: f64,
        goal_radius: f64,
        max_steps: usize,
    ) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let rows = lines.len();
        if rows < 3 {
            return Err(Error::Layout(format!("grid needs at least 3 rows, got {rows}")));
        }
        let cols = lines[0].len();
        let mut walls = Vec::with_capacity(rows * cols);
        for (r, line) in lines.iter().enumerate() {
            if line.len() != cols {
                return Err(Error::Layout(format!(
                    "ragged grid: row {r} has {} columns, expected {cols}",
                    line.len()
                )));
            }
            for ch in line.chars() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    other => {
                        return Err(Error::Layout(format!("unexpected character `{other}`")))
                    }
                }
            }
        }
        let spec = MazeSpec {
            name: name.to_string(),
            rows,
            cols,
            walls,
            cell_size,
            goal_radius,
            max_steps,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        for c in 0..self.cols {
            if !self.is_wall(0, c) || !self.is_wall(self.rows - 1, c) {
                return Err(Error::Layout("outer boundary must be walls".into()));
            }
        }
        for r in 0..self.rows {
            if !self.is_wall(r, 0) || !self.is_wall(r, self.cols - 1) {
                return Err(Error::Layout("outer boundary must be walls".into()));
            }
        }
        let free = self.free_cells();
        if free.len() < 2 {
            return Err(Error::Layout(format!(
                "need at least 2 free cells, found {}",
                free.len()
            )));
        }
        // all free cells must be mutually reachable
        let dist = self.bfs_distances(free[0]);
        for &cell in &free {
            if dist[self.cell_index(cell)].is_none() {
                return Err(Error::Layout(format!(
                    "free region is disconnected at cell {cell:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_wall(&self, row: usize, col: usize) -> bool {
        self.walls[row * self.cols + col]
    }

    fn cell_index(&self, (r, c): (usize, usize)) -> usize {
        r * self.cols + c
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.is_wall(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn cell_center(&self, (r, c): (usize, usize)) -> (f64, f64) {
        (
            (c as f64 + 0.5) * self.cell_size,
            (r as f64 + 0.5) * self.cell_size,
        )
    }

    /// Integer cell containing a position. Positions exactly on a cell
    /// boundary belong to the lower-index cell.
    pub fn cell_of(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        let col = axis_cell(x, self.cell_size, self.cols)?;
        let row = axis_cell(y, self.cell_size, self.rows)?;
        Ok((row, col))
    }

    /// BFS distance (in cells) from `start` to every cell; walls are `None`.
    pub fn bfs_distances(&self, start: (usize, usize)) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.rows * self.cols];
        if self.is_wall(start.0, start.1) {
            return dist;
        }
        let mut queue = VecDeque::new();
        dist[self.cell_index(start)] = Some(0);
        queue.push_back(start);
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[self.cell_index((r, c))].unwrap();
            for (nr, nc) in self.neighbors(r, c) {
                let idx = self.cell_index((nr, nc));
                if dist[idx].is_none() {
                    dist[idx] = Some(d + 1);
                    queue.push_back((nr, nc));
                }
            }
        }
        dist
    }

    fn neighbors(&self, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let deltas = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
        deltas.into_iter().filter_map(move |(dr, dc)| {
            let nr = r as i64 + dr;
            let nc = c as i64 + dc;
            if nr < 0 || nc < 0 || nr as usize >= self.rows || nc as usize >= self.cols {
                return None;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            (!self.is_wall(nr, nc)).then_some((nr, nc))
        })
    }

    /// Shortest cell path between two free cells, endpoints included.
    pub fn bfs_path(&self, from: (usize, usize), to: (usize, usize)) -> Option<Vec<(usize, usize)>> {
        let dist = self.bfs_distances(to);
        dist[self.cell_index(from)]?;
        let mut path = vec![from];
        let mut cur = from;
        while cur != to {
            let d = dist[self.cell_index(cur)].unwrap();
            let next = self
                .neighbors(cur.0, cur.1)
                .find(|&n| dist[self.cell_index(n)] == Some(d - 1))
                .expect("bfs distance field must decrease toward the target");
            path.push(next);
            cur = next;
        }
        Some(path)
    }

    /// Steps needed to cross one cell at top speed.
    pub fn steps_per_cell(&self, dyncfg: &DynamicsConfig) -> usize {
        (self.cell_size / (dyncfg.v_max * dyncfg.dt)).ceil() as usize
    }
}

impl fmt::Display for MazeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.rows {
            for c in 0..self.cols {
                write!(f, "{}", if self.is_wall(r, c) { '#' } else { '.' })?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn axis_cell(pos: f64, cell: f64, n: usize) -> Result<usize> {
    if pos < 0.0 || pos > n as f64 * cell {
        return Err(Error::Layout(format!("position {pos} outside grid extent")));
    }
    let mut idx = (pos / cell).floor() as usize;
    // exact boundary goes to the lower-index cell
    if idx > 0 && pos == idx as f64 * cell {
        idx -= 1;
    }
    Ok(idx.min(n - 1))
}

// ── dynamics ─────────────────────────────────────────────────────────

/// Advance one step: accelerate, clamp speed, move, resolve wall contact
/// axis by axis. Returns the new state, the sparse reward, and whether the
/// goal was reached.
pub fn step(
    spec: &MazeSpec,
    dyncfg: &DynamicsConfig,
    s: &PointState,
    a: Action2D,
    goal: (f64, f64),
) -> (PointState, f64, bool) {
    let mut vx = (s.vx + a.ax * dyncfg.dt).clamp(-dyncfg.v_max, dyncfg.v_max);
    let mut vy = (s.vy + a.ay * dyncfg.dt).clamp(-dyncfg.v_max, dyncfg.v_max);

    // x axis first, then y, each clipped at the first wall face crossed
    let (nx, hit_x) = move_axis(spec, s.x, s.y, vx * dyncfg.dt, true);
    if hit_x {
        vx = 0.0;
    }
    let (ny, hit_y) = move_axis(spec, nx, s.y, vy * dyncfg.dt, false);
    if hit_y {
        vy = 0.0;
    }

    let next = PointState { x: nx, y: ny, vx, vy };
    let dx = next.x - goal.0;
    let dy = next.y - goal.1;
    let reached = (dx * dx + dy * dy).sqrt() <= spec.goal_radius;
    (next, if reached { 1.0 } else { 0.0 }, reached)
}

/// Move along one axis, stopping at the first wall face. The fixed
/// coordinate is `other`. Returns (new coordinate, hit flag).
fn move_axis(spec: &MazeSpec, x: f64, y: f64, delta: f64, horizontal: bool) -> (f64, bool) {
    let (moving, other) = if horizontal { (x, y) } else { (y, x) };
    if delta == 0.0 {
        return (moving, false);
    }
    let cell = spec.cell_size;
    let target = moving + delta;
    let step_dir = delta.signum();
    let mut cur_cell = axis_cell(moving, cell, if horizontal { spec.cols } else { spec.rows })
        .unwrap_or(0);
    let other_cell = axis_cell(other, cell, if horizontal { spec.rows } else { spec.cols })
        .unwrap_or(0);
    loop {
        // face between cur_cell and the next cell in the travel direction
        let next_cell = if step_dir > 0.0 {
            cur_cell + 1
        } else if cur_cell == 0 {
            return (clamp_to_extent(target, spec, horizontal), true);
        } else {
            cur_cell - 1
        };
        let limit = if horizontal { spec.cols } else { spec.rows };
        if step_dir > 0.0 && next_cell >= limit {
            return (clamp_to_extent(target, spec, horizontal), true);
        }
        let face = if step_dir > 0.0 {
            next_cell as f64 * cell
        } else {
            cur_cell as f64 * cell
        };
        let crosses = if step_dir > 0.0 { target > face } else { target < face };
        if !crosses {
            return (target, false);
        }
        let blocked = if horizontal {
            spec.is_wall(other_cell, next_cell)
        } else {
            spec.is_wall(next_cell, other_cell)
        };
        if blocked {
            return (face - step_dir * WALL_EPS, true);
        }
        cur_cell = next_cell;
    }
}

fn clamp_to_extent(v: f64, spec: &MazeSpec, horizontal: bool) -> f64 {
    let hi = if horizontal {
        spec.cols as f64 * spec.cell_size
    } else {
        spec.rows as f64 * spec.cell_size
    };
    v.clamp(WALL_EPS, hi - WALL_EPS)
}

// ── controller ───────────────────────────────────────────────────────

/// Proportional-derivative action toward a waypoint.
pub fn pd_control(dyncfg: &DynamicsConfig, s: &PointState, waypoint: (f64, f64)) -> Action2D {
    pd_control_with(s, waypoint, dyncfg.kp, dyncfg.kd)
}

pub fn pd_control_with(s: &PointState, waypoint: (f64, f64), kp: f64, kd: f64) -> Action2D {
    Action2D::new(
        kp * (waypoint.0 - s.x) - kd * s.vx,
        kp * (waypoint.1 - s.y) - kd * s.vy,
    )
}

/// Whether the controller may act: inside the closed ball of `radius`
/// around the goal.
pub fn pd_gate(s: &PointState, goal: (f64, f64), radius: f64) -> bool {
    debug_assert!(radius > 0.0);
    let dx = s.x - goal.0;
    let dy = s.y - goal.1;
    (dx * dx + dy * dy).sqrt() <= radius
}

// ── scoring ──────────────────────────────────────────────────────────

/// 100 · (return − random) / (expert − random).
pub fn normalized_score(total_return: f64, refs: &ReferenceReturns) -> Result<f64> {
    if refs.expert <= refs.random {
        return Err(Error::config(
            "reference_returns",
            format!(
                "expert return {} must exceed random return {}",
                refs.expert, refs.random
            ),
        ));
    }
    Ok(100.0 * (total_return - refs.random) / (refs.expert - refs.random))
}

// ── scripted policies ────────────────────────────────────────────────

/// One expert episode: follow BFS cell-center waypoints with the PD
/// controller. Returns the visited states, the actions taken, and the
/// rewards observed; stops at the goal or after `budget` steps.
pub fn expert_rollout(
    spec: &MazeSpec,
    dyncfg: &DynamicsConfig,
    start: PointState,
    goal: (f64, f64),
    budget: usize,
) -> (Vec<PointState>, Vec<Action2D>, Vec<f64>, bool) {
    let start_cell = spec
        .cell_of(start.x, start.y)
        .expect("start inside the grid");
    let goal_cell = spec.cell_of(goal.0, goal.1).expect("goal inside the grid");
    let path = spec
        .bfs_path(start_cell, goal_cell)
        .expect("free cells are connected");
    let mut waypoints: Vec<(f64, f64)> = path.iter().map(|&c| spec.cell_center(c)).collect();
    waypoints.push(goal);

    let switch_radius = 0.35 * spec.cell_size;
    let mut states = vec![start];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut s = start;
    let mut wp = 0usize;
    let mut reached = false;
    for _ in 0..budget {
        while wp + 1 < waypoints.len() {
            let (wx, wy) = waypoints[wp];
            if ((s.x - wx).powi(2) + (s.y - wy).powi(2)).sqrt() < switch_radius {
                wp += 1;
            } else {
                break;
            }
        }
        let a = pd_control(dyncfg, &s, waypoints[wp]);
        let (next, r, done) = step(spec, dyncfg, &s, a, goal);
        states.push(next);
        actions.push(a);
        rewards.push(r);
        s = next;
        if done {
            reached = true;
            break;
        }
    }
    (states, actions, rewards, reached)
}

/// Episode return of a uniformly random policy.
pub fn random_rollout_return(
    spec: &MazeSpec,
    dyncfg: &DynamicsConfig,
    start: PointState,
    goal: (f64, f64),
    budget: usize,
    rng: &mut RngStream,
) -> f64 {
    let mut s = start;
    let mut total = 0.0;
    for _ in 0..budget {
        let a = Action2D::new(rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0));
        let (next, r, done) = step(spec, dyncfg, &s, a, goal);
        total += r;
        s = next;
        if done {
            break;
        }
    }
    total
}

/// Sample a random free-cell pair and starting state. Positions are drawn
/// uniformly inside the chosen cells with zero velocity.
pub fn sample_task(
    spec: &MazeSpec,
    rng: &mut RngStream,
    min_bfs_cells: usize,
) -> (PointState, (f64, f64)) {
    let free = spec.free_cells();
    loop {
        let a = free[rng.index(free.len())];
        let b = free[rng.index(free.len())];
        if a == b {
            continue;
        }
        let d = spec.bfs_distances(a)[b.0 * spec.cols + b.1].expect("connected");
        if d < min_bfs_cells {
            continue;
        }
        let (ax, ay) = jitter_in_cell(spec, a, rng);
        let (gx, gy) = spec.cell_center(b);
        return (PointState::at(ax, ay), (gx, gy));
    }
}

fn jitter_in_cell(spec: &MazeSpec, cell: (usize, usize), rng: &mut RngStream) -> (f64, f64) {
    let (cx, cy) = spec.cell_center(cell);
    let r = 0.3 * spec.cell_size;
    (
        cx + rng.uniform_range(-r, r),
        cy + rng.uniform_range(-r, r),
    )
}

/// Monte-Carlo reference returns: a uniform-random policy and the BFS
/// waypoint expert, each averaged over `episodes` random tasks.
pub fn reference_returns(
    spec: &MazeSpec,
    dyncfg: &DynamicsConfig,
    episodes: usize,
    rng: &mut RngStream,
) -> ReferenceReturns {
    let mut rand_sum = 0.0;
    let mut exp_sum = 0.0;
    for _ in 0..episodes {
        let (start, goal) = sample_task(spec, rng, 1);
        rand_sum += random_rollout_return(spec, dyncfg, start, goal, spec.max_steps, rng);
        let (_, _, rewards, _) = expert_rollout(spec, dyncfg, start, goal, spec.max_steps);
        exp_sum += rewards.iter().sum::<f64>();
    }
    ReferenceReturns {
        random: rand_sum / episodes as f64,
        expert: exp_sum / episodes as f64,
    }
}

/// Parse a reference-returns file: one `<layout> <random> <expert>` triple
/// per line.
pub fn parse_reference_file(text: &str, layout: &str) -> Result<ReferenceReturns> {
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!("bad reference line `{line}`")));
        }
        if fields[0] == layout {
            let random = fields[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad number in `{line}`")))?;
            let expert = fields[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad number in `{line}`")))?;
            return Ok(ReferenceReturns { random, expert });
        }
    }
    Err(Error::Format(format!("no reference entry for `{layout}`")))
}

pub fn format_reference_file(entries: &[(String, ReferenceReturns)]) -> String {
    let mut out = String::from("# layout random expert\n");
    for (name, refs) in entries {
        out.push_str(&format!("{name} {} {}\n", refs.random, refs.expert));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini() -> MazeSpec {
        load_layout("mini").unwrap()
    }

    #[test]
    fn builtin_layouts_validate() {
        let large = load_layout("large").unwrap();
        assert_eq!((large.rows, large.cols), (9, 12));
        assert_eq!(large.max_steps, 800);
        let giant = load_layout("giant").unwrap();
        assert_eq!((giant.rows, giant.cols), (12, 16));
        assert_eq!(giant.max_steps, 1000);
        let xxl = load_layout("xxlarge").unwrap();
        assert_eq!((xxl.rows, xxl.cols), (18, 24));
        assert_eq!(xxl.max_steps, 1300);
        let mini = mini();
        assert_eq!((mini.rows, mini.cols), (5, 7));
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        assert!(MazeSpec::parse("t", "###\n###\n###", 1.0, 0.5, 10).is_err()); // no free
        assert!(MazeSpec::parse("t", "###\n#.#\n###", 1.0, 0.5, 10).is_err()); // one free
        assert!(MazeSpec::parse("t", "###\n..#\n###", 1.0, 0.5, 10).is_err()); // open boundary
        assert!(MazeSpec::parse("t", "#####\n#.#.#\n#####", 1.0, 0.5, 10).is_err()); // split
        assert!(MazeSpec::parse("t", "#####\n#..#\n#####", 1.0, 0.5, 10).is_err()); // ragged
        assert!(load_layout("nope").is_err());
    }

    #[test]
    fn zero_action_zero_velocity_is_a_fixed_point() {
        let spec = mini();
        let dc = DynamicsConfig::default();
        let s = PointState::at(3.0, 3.0);
        let (next, r, done) = step(&spec, &dc, &s, Action2D::new(0.0, 0.0), (9.0, 7.0));
        assert_eq!(next, s);
        assert_eq!(r, 0.0);
        assert!(!done);
    }

    #[test]
    fn at_goal_center_reward_and_done() {
        let spec = mini();
        let dc = DynamicsConfig::default();
        let s = PointState::at(3.0, 3.0);
        let (_, r, done) = step(&spec, &dc, &s, Action2D::new(0.0, 0.0), (3.0, 3.0));
        assert_eq!(r, 1.0);
        assert!(done);
    }

    #[test]
    fn free_flight_velocity_update_is_exact() {
        let spec = mini();
        let dc = DynamicsConfig::default();
        let s = PointState {
            x: 3.0,
            y: 3.0,
            vx: 0.5,
            vy: -0.25,
        };
        let a = Action2D::new(0.3, -0.6);
        let (next, _, _) = step(&spec, &dc, &s, a, (9.0, 9.0));
        assert!((next.vx - s.vx - a.ax * dc.dt).abs() < 1e-15);
        assert!((next.vy - s.vy - a.ay * dc.dt).abs() < 1e-15);
        assert!((next.x - (s.x + next.vx * dc.dt)).abs() < 1e-15);
    }

    /// Brute-force integrator: same velocity update, position advanced in
    /// many micro-steps with per-axis face clipping.
    fn substep_oracle(
        spec: &MazeSpec,
        dc: &DynamicsConfig,
        s: &PointState,
        a: Action2D,
    ) -> PointState {
        let vx = (s.vx + a.ax * dc.dt).clamp(-dc.v_max, dc.v_max);
        let vy = (s.vy + a.ay * dc.dt).clamp(-dc.v_max, dc.v_max);
        let n = 100_000;
        let (mut x, mut y) = (s.x, s.y);
        let (mut vvx, mut vvy) = (vx, vy);
        for _ in 0..n {
            let cand_x = x + vvx * dc.dt / n as f64;
            match spec.cell_of(cand_x, y) {
                Ok((r, c)) if !spec.is_wall(r, c) => x = cand_x,
                _ => vvx = 0.0,
            }
            let cand_y = y + vvy * dc.dt / n as f64;
            match spec.cell_of(x, cand_y) {
                Ok((r, c)) if !spec.is_wall(r, c) => y = cand_y,
                _ => vvy = 0.0,
            }
        }
        PointState { x, y, vx: vvx, vy: vvy }
    }

    #[test]
    fn head_on_collision_matches_substepped_integrator() {
        let spec = mini();
        let dc = DynamicsConfig::default();
        // moving straight at the wall face x = 12.0 inside row 1 at top speed
        let s = PointState {
            x: 11.9,
            y: 3.0,
            vx: dc.v_max,
            vy: 0.0,
        };
        let a = Action2D::new(1.0, 0.0);
        let (next, _, _) = step(&spec, &dc, &s, a, (1.0, 1.0));
        let oracle = substep_oracle(&spec, &dc, &s, a);
        assert_eq!(next.vx, 0.0, "colliding component is zeroed");
        assert!(next.x < 12.0, "stays on the free side");
        assert!((next.x - oracle.x).abs() < 1e-3, "{} vs {}", next.x, oracle.x);
        assert!((next.y - oracle.y).abs() < 1e-9);
        let cell = spec.cell_of(next.x, next.y).unwrap();
        assert!(!spec.is_wall(cell.0, cell.1));
    }

    #[test]
    fn diagonal_collision_matches_substepped_integrator() {
        let spec = mini();
        let dc = DynamicsConfig::default();
        let s = PointState {
            x: 11.8,
            y: 2.1,
            vx: 1.5,
            vy: -1.5,
        };
        let a = Action2D::new(1.0, -1.0);
        let (next, _, _) = step(&spec, &dc, &s, a, (1.0, 1.0));
        let oracle = substep_oracle(&spec, &dc, &s, a);
        assert!((next.x - oracle.x).abs() < 1e-3);
        assert!((next.y - oracle.y).abs() < 1e-3);
    }

    #[test]
    fn rollouts_never_enter_walls() {
        let spec = mini();
        let dc = DynamicsConfig::default();
        let mut rng = RngStream::new(99, 0);
        let mut s = PointState::at(3.0, 3.0);
        for i in 0..100_000 {
            let a = Action2D::new(rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0));
            let (next, _, _) = step(&spec, &dc, &s, a, (11.0, 7.0));
            let (r, c) = spec.cell_of(next.x, next.y).unwrap();
            assert!(!spec.is_wall(r, c), "step {i}: {next:?} is inside a wall");
            s = next;
        }
    }

    #[test]
    fn step_is_deterministic() {
        let spec = mini();
        let dc = DynamicsConfig::default();
        let s = PointState {
            x: 4.2,
            y: 5.3,
            vx: 0.7,
            vy: -0.2,
        };
        let a = Action2D::new(0.2, 0.9);
        let once = step(&spec, &dc, &s, a, (9.0, 3.0));
        let twice = step(&spec, &dc, &s, a, (9.0, 3.0));
        assert_eq!(once, twice);
    }

    #[test]
    fn pd_controller_basics() {
        let s = PointState::at(1.0, 1.0);
        // at the waypoint with zero velocity: zero action
        let a = pd_control_with(&s, (1.0, 1.0), 1.0, 0.0);
        assert_eq!((a.ax, a.ay), (0.0, 0.0));
        // unit error, kp = 1, kd = 0: unit action
        let a = pd_control_with(&s, (2.0, 1.0), 1.0, 0.0);
        assert_eq!((a.ax, a.ay), (1.0, 0.0));
        // error 2, kp = 1: saturates at 1
        let a = pd_control_with(&s, (3.0, 1.0), 1.0, 0.0);
        assert_eq!((a.ax, a.ay), (1.0, 0.0));
    }

    #[test]
    fn gate_is_a_closed_ball() {
        let s = PointState::at(0.0, 0.0);
        assert!(pd_gate(&s, (0.0, 0.0), 1.0));
        assert!(pd_gate(&s, (1.0, 0.0), 1.0));
        assert!(!pd_gate(&s, (1.0 + 1e-9, 0.0), 1.0));
    }

    #[test]
    fn normalized_score_is_affine() {
        let refs = ReferenceReturns {
            random: 10.0,
            expert: 110.0,
        };
        assert_eq!(normalized_score(10.0, &refs).unwrap(), 0.0);
        assert_eq!(normalized_score(110.0, &refs).unwrap(), 100.0);
        let a = normalized_score(30.0, &refs).unwrap();
        let b = normalized_score(50.0, &refs).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12, "doubling the excess doubles the score");
        let bad = ReferenceReturns {
            random: 5.0,
            expert: 5.0,
        };
        assert!(normalized_score(1.0, &bad).is_err());
    }

    #[test]
    fn cell_of_conventions() {
        let spec = mini(); // cell size 2.0
        assert_eq!(spec.cell_of(5.0, 3.0).unwrap(), (1, 2));
        // exact boundary goes to the lower-index cell
        assert_eq!(spec.cell_of(4.0, 3.0).unwrap(), (1, 1));
        assert_eq!(spec.cell_of(0.0, 0.0).unwrap(), (0, 0));
        assert!(spec.cell_of(-0.1, 3.0).is_err());
        assert!(spec.cell_of(3.0, 10.1).is_err());
    }

    #[test]
    fn cell_of_matches_floor_oracle() {
        let spec = mini();
        let mut rng = RngStream::new(4, 4);
        for _ in 0..1000 {
            let x = rng.uniform_range(0.001, spec.cols as f64 * spec.cell_size - 0.001);
            let y = rng.uniform_range(0.001, spec.rows as f64 * spec.cell_size - 0.001);
            let (r, c) = spec.cell_of(x, y).unwrap();
            assert_eq!(r, (y / spec.cell_size).floor() as usize);
            assert_eq!(c, (x / spec.cell_size).floor() as usize);
        }
    }

    #[test]
    fn expert_reaches_adjacent_goals() {
        let spec = mini();
        let dc = DynamicsConfig::default();
        let start = PointState::at(3.0, 3.0); // center of (1,1)
        let goal = spec.cell_center((1, 2));
        let (states, actions, rewards, reached) =
            expert_rollout(&spec, &dc, start, goal, spec.max_steps);
        assert!(reached);
        assert_eq!(states.len(), actions.len() + 1);
        assert_eq!(rewards.last().copied(), Some(1.0));
    }

    #[test]
    fn expert_beats_random_on_mini() {
        let spec = mini();
        let dc = DynamicsConfig::default();
        let mut rng = RngStream::new(7, 3);
        let refs = reference_returns(&spec, &dc, 40, &mut rng);
        assert!(
            refs.expert > refs.random,
            "expert {} vs random {}",
            refs.expert,
            refs.random
        );
    }

    #[test]
    fn reference_file_round_trip() {
        let entries = vec![(
            "mini".to_string(),
            ReferenceReturns {
                random: 0.05,
                expert: 0.97,
            },
        )];
        let text = format_reference_file(&entries);
        let back = parse_reference_file(&text, "mini").unwrap();
        assert_eq!(back, entries[0].1);
        assert!(parse_reference_file(&text, "large").is_err());
    }
}
