//! Deterministic, invertible grid-tabletop environment.
//!
//! Plays the role of the ground-truth simulator: a gripper moves over a small
//! grid, picks up a goal object and places it on a target cell. Observations
//! are rendered as single-code-per-cell grids so that they double as discrete
//! visual tokens. Every legal action has an exact inverse, which the
//! round-trip consistency protocol relies on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Color-code layout of rendered cells. With `PALETTE = 16` up to four
/// objects fit: object `i` occupies codes `3+3i` (plain), `4+3i` (gripper
/// hovering over it) and `5+3i` (held by the gripper).
pub const PALETTE: u8 = 16;
pub const CODE_BACKGROUND: u8 = 0;
pub const CODE_TARGET_MARKER: u8 = 1;
pub const CODE_GRIPPER: u8 = 2;
pub const OBJECT_CODE_BASE: u8 = 3;
pub const MAX_OBJECTS: usize = 4;

pub fn object_plain_code(idx: usize) -> u8 {
    OBJECT_CODE_BASE + 3 * idx as u8
}
pub fn object_hover_code(idx: usize) -> u8 {
    OBJECT_CODE_BASE + 3 * idx as u8 + 1
}
pub fn object_held_code(idx: usize) -> u8 {
    OBJECT_CODE_BASE + 3 * idx as u8 + 2
}

/// Static description of the tabletop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub n_objects: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { width: 12, height: 12, n_objects: 2 }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 3 || self.height < 3 {
            return Err(Error::Config("grid must be at least 3x3".into()));
        }
        if self.n_objects == 0 || self.n_objects > MAX_OBJECTS {
            return Err(Error::Config(format!(
                "n_objects must be in 1..={MAX_OBJECTS}"
            )));
        }
        Ok(())
    }
}

pub type Cell = (i32, i32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: usize,
    pub color: u8,
    /// While held this stays at the pickup cell; the object renders at the
    /// gripper instead. Release updates it to the drop cell.
    pub pos: Cell,
}

/// Full symbolic state of the tabletop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectState>,
    pub gripper: Cell,
    pub held: Option<usize>,
    /// (goal object id, target cell)
    pub goal: (usize, Cell),
    pub step_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Grip {
    None,
    Grasp,
    Release,
}

impl Grip {
    pub fn code(self) -> u8 {
        match self {
            Grip::None => 0,
            Grip::Grasp => 1,
            Grip::Release => 2,
        }
    }
    pub fn from_code(c: u8) -> Option<Grip> {
        match c {
            0 => Some(Grip::None),
            1 => Some(Grip::Grasp),
            2 => Some(Grip::Release),
            _ => None,
        }
    }
}

/// One primitive command: a unit move plus an optional grip change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub dx: i8,
    pub dy: i8,
    pub grip: Grip,
}

impl Action {
    pub const NOOP: Action = Action { dx: 0, dy: 0, grip: Grip::None };

    pub fn new(dx: i8, dy: i8, grip: Grip) -> Action {
        debug_assert!(dx.abs() <= 1 && dy.abs() <= 1);
        Action { dx, dy, grip }
    }

    /// Exact inverse: negated move, grasp <-> release. `step(step(s, a),
    /// a.inverse())` restores `s` (modulo step_count) whenever `a` was legal
    /// when applied and does not combine a move with a grip change.
    pub fn inverse(self) -> Action {
        let grip = match self.grip {
            Grip::None => Grip::None,
            Grip::Grasp => Grip::Release,
            Grip::Release => Grip::Grasp,
        };
        Action { dx: -self.dx, dy: -self.dy, grip }
    }
}

/// Fixed-length group of actions executed between world-model predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk(pub Vec<Action>);

impl ActionChunk {
    pub fn noops(len: usize) -> ActionChunk {
        ActionChunk(vec![Action::NOOP; len])
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Rendered grid: one color code per cell, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<u8>,
}

impl Observation {
    pub fn get(&self, x: i32, y: i32) -> u8 {
        self.cells[y as usize * self.width + x as usize]
    }
}

/// Discrete task-progress phase, one of {0.0, 0.2, ..., 1.0}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Progress(u8);

impl Progress {
    pub const LEVELS: [Progress; 6] =
        [Progress(0), Progress(1), Progress(2), Progress(3), Progress(4), Progress(5)];
    pub const COMPLETE: Progress = Progress(5);

    pub fn from_fifths(f: u8) -> Option<Progress> {
        (f <= 5).then_some(Progress(f))
    }
    pub fn from_value(v: f64) -> Option<Progress> {
        let f = (v * 5.0).round();
        if (f * 0.2 - v).abs() > 1e-9 || !(0.0..=5.0).contains(&f) {
            return None;
        }
        Some(Progress(f as u8))
    }
    pub fn fifths(self) -> u8 {
        self.0
    }
    pub fn value(self) -> f64 {
        self.0 as f64 * 0.2
    }
    pub fn label(self) -> &'static str {
        ["0.0", "0.2", "0.4", "0.6", "0.8", "1.0"][self.0 as usize]
    }
}

fn manhattan(a: Cell, b: Cell) -> i32 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

fn chebyshev(a: Cell, b: Cell) -> i32 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// Deterministic initial state for a task seed: distinct cells for objects,
/// gripper and target; the gripper starts at Chebyshev distance >= 2 from the
/// goal object so the initial progress phase is 0.0.
pub fn reset(config: &GridConfig, task_seed: u64) -> WorldState {
    config.validate().expect("invalid grid config");
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let w = config.width as i32;
    let h = config.height as i32;
    loop {
        let mut used: Vec<Cell> = Vec::new();
        let draw = |rng: &mut ChaCha8Rng, used: &mut Vec<Cell>| -> Cell {
            loop {
                let c = (rng.gen_range(0..w), rng.gen_range(0..h));
                if !used.contains(&c) {
                    used.push(c);
                    return c;
                }
            }
        };
        let objects: Vec<ObjectState> = (0..config.n_objects)
            .map(|id| ObjectState { id, color: object_plain_code(id), pos: draw(&mut rng, &mut used) })
            .collect();
        let target = draw(&mut rng, &mut used);
        let gripper = draw(&mut rng, &mut used);
        if chebyshev(gripper, objects[0].pos) < 2 {
            continue;
        }
        return WorldState {
            width: config.width,
            height: config.height,
            objects,
            gripper,
            held: None,
            goal: (0, target),
            step_count: 0,
        };
    }
}

/// Instruction text for a task (fixed five-word template).
pub fn instruction_for(state: &WorldState) -> String {
    format!("place object {} on target", state.goal.0)
}

/// Deterministic transition. Moves are clipped at walls; a grasp succeeds
/// only when the gripper sits on an un-held object's cell; release drops the
/// held object at the gripper cell unless another object occupies it.
/// Infeasible grip commands degrade to no-ops, mirroring hardware that
/// ignores impossible commands.
pub fn step(state: &WorldState, action: &Action) -> WorldState {
    let mut s = state.clone();
    let w = s.width as i32;
    let h = s.height as i32;
    s.gripper.0 = (s.gripper.0 + action.dx as i32).clamp(0, w - 1);
    s.gripper.1 = (s.gripper.1 + action.dy as i32).clamp(0, h - 1);
    match action.grip {
        Grip::None => {}
        Grip::Grasp => {
            if s.held.is_none() {
                if let Some(obj) = s
                    .objects
                    .iter()
                    .find(|o| o.pos == s.gripper && Some(o.id) != s.held)
                {
                    s.held = Some(obj.id);
                }
            }
        }
        Grip::Release => {
            if let Some(id) = s.held {
                let occupied = s
                    .objects
                    .iter()
                    .any(|o| o.id != id && o.pos == s.gripper);
                if !occupied {
                    s.objects[id].pos = s.gripper;
                    s.held = None;
                }
            }
        }
    }
    s.step_count += 1;
    s
}

/// Whether `action` executes without clipping or degraded grips in `state`.
pub fn action_is_legal(state: &WorldState, action: &Action) -> bool {
    let w = state.width as i32;
    let h = state.height as i32;
    let nx = state.gripper.0 + action.dx as i32;
    let ny = state.gripper.1 + action.dy as i32;
    if nx < 0 || nx >= w || ny < 0 || ny >= h {
        return false;
    }
    match action.grip {
        Grip::None => true,
        Grip::Grasp => {
            state.held.is_none() && state.objects.iter().any(|o| o.pos == (nx, ny))
        }
        Grip::Release => match state.held {
            Some(id) => !state
                .objects
                .iter()
                .any(|o| o.id != id && o.pos == (nx, ny)),
            None => false,
        },
    }
}

/// All legal pure actions in `state`: unclipped moves plus an in-place grasp
/// or release when feasible. Pure actions never combine a move with a grip
/// change, which keeps them exactly invertible.
pub fn legal_actions(state: &WorldState) -> Vec<Action> {
    let mut out = Vec::with_capacity(11);
    for dy in -1i8..=1 {
        for dx in -1i8..=1 {
            let a = Action::new(dx, dy, Grip::None);
            if action_is_legal(state, &a) {
                out.push(a);
            }
        }
    }
    for grip in [Grip::Grasp, Grip::Release] {
        let a = Action::new(0, 0, grip);
        if action_is_legal(state, &a) {
            out.push(a);
        }
    }
    out
}

/// Render the state to a single-code-per-cell grid. The rendering is a
/// bijection on (object positions, gripper, held) so observations can be
/// parsed back exactly; the target marker is hidden when covered.
pub fn render(state: &WorldState) -> Observation {
    let mut cells = vec![CODE_BACKGROUND; state.width * state.height];
    let at = |c: Cell| c.1 as usize * state.width + c.0 as usize;
    cells[at(state.goal.1)] = CODE_TARGET_MARKER;
    for obj in &state.objects {
        if Some(obj.id) != state.held {
            cells[at(obj.pos)] = object_plain_code(obj.id);
        }
    }
    let g = at(state.gripper);
    cells[g] = match state.held {
        Some(id) => object_held_code(id),
        None => match state
            .objects
            .iter()
            .find(|o| Some(o.id) != state.held && o.pos == state.gripper)
        {
            Some(o) => object_hover_code(o.id),
            None => CODE_GRIPPER,
        },
    };
    Observation { width: state.width, height: state.height, cells }
}

/// Best-effort inverse of [`render`]. Returns `None` on frames that do not
/// depict a coherent state (missing gripper, duplicated objects, unknown
/// codes). The held object's pickup cell is not recoverable from pixels, so
/// a parsed held object sits at the gripper.
pub fn parse_observation(
    obs: &Observation,
    goal: (usize, Cell),
    n_objects: usize,
) -> Option<WorldState> {
    let mut objects: Vec<Option<Cell>> = vec![None; n_objects];
    let mut gripper: Option<Cell> = None;
    let mut held: Option<usize> = None;
    for y in 0..obs.height as i32 {
        for x in 0..obs.width as i32 {
            let code = obs.get(x, y);
            match code {
                CODE_BACKGROUND | CODE_TARGET_MARKER => {}
                CODE_GRIPPER => {
                    if gripper.replace((x, y)).is_some() {
                        return None;
                    }
                }
                _ => {
                    let rel = code.checked_sub(OBJECT_CODE_BASE)?;
                    let idx = (rel / 3) as usize;
                    let kind = rel % 3;
                    if idx >= n_objects {
                        return None;
                    }
                    if objects[idx].replace((x, y)).is_some() {
                        return None;
                    }
                    if kind > 0 {
                        if gripper.replace((x, y)).is_some() {
                            return None;
                        }
                    }
                    if kind == 2 {
                        held = Some(idx);
                    }
                }
            }
        }
    }
    let gripper = gripper?;
    let objects: Option<Vec<ObjectState>> = objects
        .into_iter()
        .enumerate()
        .map(|(id, pos)| pos.map(|p| ObjectState { id, color: object_plain_code(id), pos: p }))
        .collect();
    Some(WorldState {
        width: obs.width,
        height: obs.height,
        objects: objects?,
        gripper,
        held,
        goal,
        step_count: 0,
    })
}

/// Six-phase progress rubric mapped onto exact symbolic predicates:
/// 0.0 idle, 0.2 gripper at or next to the goal object, 0.4 just lifted,
/// 0.6 in transit (strictly closer to the target than the pickup cell),
/// 0.8 hovering over the target while holding, 1.0 released on the target.
pub fn oracle_progress(state: &WorldState) -> Progress {
    let (goal_id, target) = state.goal;
    let obj = &state.objects[goal_id];
    if state.held != Some(goal_id) {
        if obj.pos == target {
            return Progress(5);
        }
        if chebyshev(state.gripper, obj.pos) <= 1 {
            return Progress(1);
        }
        return Progress(0);
    }
    // Held: obj.pos still records the pickup cell.
    if state.gripper == target {
        return Progress(4);
    }
    if manhattan(state.gripper, target) < manhattan(obj.pos, target) {
        return Progress(3);
    }
    Progress(2)
}

pub fn is_success(state: &WorldState) -> bool {
    oracle_progress(state) == Progress::COMPLETE
}

/// Scripted policy family spanning a spectrum of success rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicyKind {
    Expert,
    EpsilonNoisy,
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    /// Probability of replacing the expert action with a random legal one.
    pub epsilon: f64,
    /// Probability of acting expert (mixture policies).
    pub mix_weight: f64,
}

impl PolicySpec {
    pub fn expert() -> PolicySpec {
        PolicySpec { kind: PolicyKind::Expert, epsilon: 0.0, mix_weight: 1.0 }
    }
    pub fn epsilon_noisy(epsilon: f64) -> PolicySpec {
        PolicySpec { kind: PolicyKind::EpsilonNoisy, epsilon, mix_weight: 1.0 }
    }
    pub fn mixture(mix_weight: f64) -> PolicySpec {
        PolicySpec { kind: PolicyKind::Mixture, epsilon: 0.0, mix_weight }
    }
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) || !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(Error::Config("epsilon and mix_weight must be in [0,1]".into()));
        }
        Ok(())
    }
}

pub fn expert_action(state: &WorldState) -> Action {
    let (goal_id, target) = state.goal;
    let obj = &state.objects[goal_id];
    let toward = |from: Cell, to: Cell| {
        Action::new((to.0 - from.0).signum() as i8, (to.1 - from.1).signum() as i8, Grip::None)
    };
    if state.held == Some(goal_id) {
        if state.gripper == target {
            Action::new(0, 0, Grip::Release)
        } else {
            toward(state.gripper, target)
        }
    } else if is_success(state) {
        Action::NOOP
    } else if state.gripper == obj.pos {
        Action::new(0, 0, Grip::Grasp)
    } else {
        toward(state.gripper, obj.pos)
    }
}

/// Deterministic Manhattan-greedy expert, epsilon-noised variant, or
/// expert/random mixture, all seeded through the caller's RNG.
pub fn policy_act<R: Rng>(spec: &PolicySpec, state: &WorldState, rng: &mut R) -> Action {
    let random_legal = |rng: &mut R| {
        let legal = legal_actions(state);
        legal[rng.gen_range(0..legal.len())]
    };
    match spec.kind {
        PolicyKind::Expert => expert_action(state),
        PolicyKind::EpsilonNoisy => {
            // Draw in fixed order so traces are reproducible.
            let noisy = rng.gen_bool(spec.epsilon);
            if noisy {
                random_legal(rng)
            } else {
                expert_action(state)
            }
        }
        PolicyKind::Mixture => {
            let expert = rng.gen_bool(spec.mix_weight);
            if expert {
                expert_action(state)
            } else {
                random_legal(rng)
            }
        }
    }
}

/// One recorded episode: frames at every step, actions grouped into
/// stride-length chunks, oracle progress per frame, terminal success flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_seed: u64,
    pub instruction: String,
    pub frames: Vec<Observation>,
    pub chunks: Vec<ActionChunk>,
    pub progress: Vec<Progress>,
    pub success: bool,
}

pub const CHUNK_SIZE_RANGE: std::ops::RangeInclusive<usize> = 2..=8;

/// Roll one seeded episode to success or `max_steps`.
pub fn collect_episode(
    config: &GridConfig,
    spec: &PolicySpec,
    task_seed: u64,
    policy_seed: u64,
    chunk_size: usize,
    max_steps: usize,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
    let mut state = reset(config, task_seed);
    let instruction = instruction_for(&state);
    let mut frames = vec![render(&state)];
    let mut progress = vec![oracle_progress(&state)];
    let mut actions = Vec::new();
    for _ in 0..max_steps {
        if is_success(&state) {
            break;
        }
        let action = policy_act(spec, &state, &mut rng);
        state = step(&state, &action);
        actions.push(action);
        frames.push(render(&state));
        progress.push(oracle_progress(&state));
    }
    // Pad so every chunk has exactly `chunk_size` actions; padded no-ops get
    // matching frames so frame/chunk alignment stays exact.
    while actions.len() % chunk_size != 0 || actions.is_empty() {
        actions.push(Action::NOOP);
        state = step(&state, &Action::NOOP);
        frames.push(render(&state));
        progress.push(oracle_progress(&state));
    }
    let chunks = actions
        .chunks(chunk_size)
        .map(|c| ActionChunk(c.to_vec()))
        .collect();
    Trajectory {
        task_seed,
        instruction,
        frames,
        chunks,
        progress,
        success: is_success(&state),
    }
}

/// Roll an expert episode `h` chunks forward (padding with no-ops past
/// success), then replay the element-wise inverse chunks in reverse order,
/// recording real frames and progress throughout. This covers the "return
/// leg" distribution — progress regressing, the object lifted back off the
/// goal — which forward episodes never contain.
pub fn collect_roundtrip_episode(
    config: &GridConfig,
    task_seed: u64,
    policy_seed: u64,
    chunk_size: usize,
    h: usize,
) -> Trajectory {
    let forward = collect_episode(
        config,
        &PolicySpec::expert(),
        task_seed,
        policy_seed,
        chunk_size,
        h * chunk_size,
    );
    let mut chunks = forward.chunks;
    while chunks.len() < h {
        chunks.push(ActionChunk::noops(chunk_size));
    }
    chunks.truncate(h);
    let inverse: Vec<ActionChunk> = chunks
        .iter()
        .rev()
        .map(|c| ActionChunk(c.0.iter().rev().map(|a| a.inverse()).collect()))
        .collect();
    chunks.extend(inverse);

    let mut state = reset(config, task_seed);
    let instruction = instruction_for(&state);
    let mut frames = vec![render(&state)];
    let mut progress = vec![oracle_progress(&state)];
    for chunk in &chunks {
        for a in &chunk.0 {
            state = step(&state, a);
            frames.push(render(&state));
            progress.push(oracle_progress(&state));
        }
    }
    Trajectory {
        task_seed,
        instruction,
        frames,
        chunks,
        progress,
        success: is_success(&state),
    }
}

/// Collect `n_episodes` seeded episodes. Rejects chunk sizes outside the
/// supported stride range.
pub fn collect_trajectories(
    config: &GridConfig,
    spec: &PolicySpec,
    n_episodes: usize,
    chunk_size: usize,
    max_steps: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if !CHUNK_SIZE_RANGE.contains(&chunk_size) {
        return Err(Error::Config(format!(
            "chunk size {chunk_size} outside supported range {:?}",
            CHUNK_SIZE_RANGE
        )));
    }
    spec.validate()?;
    use rayon::prelude::*;
    Ok((0..n_episodes)
        .into_par_iter()
        .map(|ep| {
            let task_seed = seed.wrapping_add(ep as u64);
            let policy_seed = seed ^ 0xa5a5_a5a5_0000_0000 ^ (ep as u64).wrapping_mul(0x517c_c1b7_2722_0a95);
            collect_episode(config, spec, task_seed, policy_seed, chunk_size, max_steps)
        })
        .collect())
}

/// Upper bound on expert episode length used by tests and the harness.
pub fn expert_step_budget(config: &GridConfig) -> usize {
    4 * (config.width + config.height)
}

// ---------------------------------------------------------------------------
// Line-delimited JSON dataset records.
// ---------------------------------------------------------------------------

/// On-disk record; field names are part of the dataset file format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task_seed: u64,
    pub instruction: String,
    pub frames: Vec<Vec<u8>>,
    pub chunks: Vec<Vec<(i8, i8, u8)>>,
    pub progress: Vec<f64>,
    pub success: bool,
}

impl TrajectoryRecord {
    pub fn from_trajectory(t: &Trajectory) -> TrajectoryRecord {
        TrajectoryRecord {
            task_seed: t.task_seed,
            instruction: t.instruction.clone(),
            frames: t.frames.iter().map(|f| f.cells.clone()).collect(),
            chunks: t
                .chunks
                .iter()
                .map(|c| c.0.iter().map(|a| (a.dx, a.dy, a.grip.code())).collect())
                .collect(),
            progress: t.progress.iter().map(|p| p.value()).collect(),
            success: t.success,
        }
    }

    pub fn into_trajectory(self, width: usize, height: usize) -> Result<Trajectory> {
        let frames = self
            .frames
            .into_iter()
            .map(|cells| {
                if cells.len() != width * height {
                    return Err(Error::Config(format!(
                        "frame has {} cells, expected {}",
                        cells.len(),
                        width * height
                    )));
                }
                Ok(Observation { width, height, cells })
            })
            .collect::<Result<Vec<_>>>()?;
        let chunks = self
            .chunks
            .into_iter()
            .map(|c| {
                c.into_iter()
                    .map(|(dx, dy, g)| {
                        let grip = Grip::from_code(g)
                            .ok_or_else(|| Error::Config(format!("bad grip code {g}")))?;
                        Ok(Action::new(dx, dy, grip))
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(ActionChunk)
            })
            .collect::<Result<Vec<_>>>()?;
        let progress = self
            .progress
            .into_iter()
            .map(|v| {
                Progress::from_value(v)
                    .ok_or_else(|| Error::Config(format!("bad progress value {v}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory {
            task_seed: self.task_seed,
            instruction: self.instruction,
            frames,
            chunks,
            progress,
            success: self.success,
        })
    }
}

/// Write trajectories as line-delimited JSON.
pub fn write_dataset<W: std::io::Write>(w: &mut W, trajectories: &[Trajectory]) -> Result<()> {
    for t in trajectories {
        let record = TrajectoryRecord::from_trajectory(t);
        serde_json::to_writer(&mut *w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a line-delimited JSON dataset.
pub fn read_dataset<R: std::io::BufRead>(
    r: R,
    width: usize,
    height: usize,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrajectoryRecord = serde_json::from_str(&line)?;
        out.push(record.into_trajectory(width, height)?);
    }
    Ok(out)
}
