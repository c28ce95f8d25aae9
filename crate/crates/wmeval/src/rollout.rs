//! Closed-loop imagined rollouts (policy against world model), success-rate
//! estimation, and the evaluation protocols: teacher-forced
//! controllability, variable-horizon round trips, and action shuffling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{memory_before_chunk, predict_transition, DecodeConfig, Prediction};
use crate::env::{
    self, ActionChunk, GridConfig, Observation, PolicySpec, Progress, Trajectory, WorldState,
};
use crate::metrics::{delta_dist, frame_dist, FrameDistance};
use crate::nn::{Float, Model};
use crate::tokens::{KeyframeMemory, SequenceLayout, Vocabulary};
use crate::{Error, Result};

/// Anything that can predict the next keyframe and progress from the
/// tokenized context. The task seed is plumbing for the simulator-backed
/// oracle variant (it identifies the goal); the learned model ignores it.
pub trait WorldModel: Sync {
    fn predict(
        &self,
        task_seed: u64,
        memory: &KeyframeMemory,
        instruction: &str,
        current: &Observation,
        chunk: &ActionChunk,
    ) -> Result<Prediction>;
}

/// The trained network behind the [`WorldModel`] interface.
pub struct LearnedWorldModel<'a> {
    pub model: &'a Model<Float>,
    pub vocab: &'a Vocabulary,
    pub layout: std::sync::Arc<SequenceLayout>,
    pub decode: DecodeConfig,
}

impl WorldModel for LearnedWorldModel<'_> {
    fn predict(
        &self,
        _task_seed: u64,
        memory: &KeyframeMemory,
        instruction: &str,
        current: &Observation,
        chunk: &ActionChunk,
    ) -> Result<Prediction> {
        predict_transition(
            self.model,
            self.vocab,
            &self.layout,
            memory,
            instruction,
            current,
            chunk,
            &self.decode,
        )
    }
}

/// Ground-truth stand-in: parse the frame back to a symbolic state, run the
/// real simulator, re-render. Used by oracle tests and the oracle CLI path.
pub struct OracleWorldModel {
    pub config: GridConfig,
}

impl WorldModel for OracleWorldModel {
    fn predict(
        &self,
        task_seed: u64,
        _memory: &KeyframeMemory,
        _instruction: &str,
        current: &Observation,
        chunk: &ActionChunk,
    ) -> Result<Prediction> {
        let goal = env::reset(&self.config, task_seed).goal;
        let mut state = env::parse_observation(current, goal, self.config.n_objects)
            .ok_or_else(|| Error::Rollout("oracle could not parse the current frame".into()))?;
        for a in &chunk.0 {
            state = env::step(&state, a);
        }
        Ok(Prediction {
            observation: env::render(&state),
            progress: Some(env::oracle_progress(&state)),
            diagnostics: Default::default(),
        })
    }
}

/// Shared knobs for every protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSettings {
    pub k_keyframes: usize,
    pub stride: usize,
    pub max_chunks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImaginedRollout {
    pub task_seed: u64,
    pub frames: Vec<Observation>,
    pub progress: Vec<Option<Progress>>,
    pub actions: Vec<ActionChunk>,
    pub terminal_success: bool,
    /// Populated when the rollout was aborted (unparseable frame for the
    /// policy, model failure); aborts count as failures.
    pub abort_cause: Option<String>,
}

/// The policy reads only the latest imagined frame: parse it to a symbolic
/// state, then dead-reckon one chunk of actions through an internal copy of
/// the dynamics.
fn policy_chunk<R: Rng>(
    spec: &PolicySpec,
    state: &WorldState,
    stride: usize,
    rng: &mut R,
) -> ActionChunk {
    let mut s = state.clone();
    let mut actions = Vec::with_capacity(stride);
    for _ in 0..stride {
        // Idle once the task looks done, like the dataset collector: no rng
        // is consumed past success.
        let a = if env::is_success(&s) {
            env::Action::NOOP
        } else {
            env::policy_act(spec, &s, rng)
        };
        s = env::step(&s, &a);
        actions.push(a);
    }
    ActionChunk(actions)
}

/// Run one closed-loop imagined episode. After the initial reset frame, the
/// policy and world model exchange only observations and actions; the true
/// simulator state is never consulted.
pub fn imagined_rollout<W: WorldModel>(
    world: &W,
    config: &GridConfig,
    vocab: &Vocabulary,
    policy: &PolicySpec,
    task_seed: u64,
    policy_seed: u64,
    settings: &RolloutSettings,
) -> Result<ImaginedRollout> {
    let init = env::reset(config, task_seed);
    let goal = init.goal;
    let instruction = env::instruction_for(&init);
    let initial_progress = env::oracle_progress(&init);
    let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
    let mut memory = KeyframeMemory::new(settings.k_keyframes, settings.stride);
    let mut frames = vec![env::render(&init)];
    let mut progress: Vec<Option<Progress>> = Vec::new();
    let mut actions: Vec<ActionChunk> = Vec::new();
    let mut abort_cause = None;

    for chunk_idx in 0..settings.max_chunks {
        if chunk_idx == 0 && initial_progress == Progress::COMPLETE {
            break;
        }
        let current = frames.last().unwrap().clone();
        let state = match env::parse_observation(&current, goal, config.n_objects) {
            Some(s) => s,
            None => {
                abort_cause = Some(format!(
                    "policy could not parse imagined frame at chunk {chunk_idx}"
                ));
                break;
            }
        };
        let chunk = policy_chunk(policy, &state, settings.stride, &mut rng);
        let pred = match world.predict(task_seed, &memory, &instruction, &current, &chunk) {
            Ok(p) => p,
            Err(e) => {
                abort_cause = Some(format!("world model failed at chunk {chunk_idx}: {e}"));
                break;
            }
        };
        memory.push_keyframe(vocab, (chunk_idx * settings.stride) as u64, &current)?;
        actions.push(chunk);
        frames.push(pred.observation);
        progress.push(pred.progress);
        if pred.progress == Some(Progress::COMPLETE) {
            break;
        }
    }

    let terminal_success = if abort_cause.is_some() {
        false
    } else {
        match progress.last() {
            Some(p) => *p == Some(Progress::COMPLETE),
            None => initial_progress == Progress::COMPLETE,
        }
    };
    Ok(ImaginedRollout {
        task_seed,
        frames,
        progress,
        actions,
        terminal_success,
        abort_cause,
    })
}

/// Mean terminal success over seeded imagined rollouts; seeds follow the
/// same derivation as the real dataset collector so real and imagined arms
/// cover identical tasks.
pub fn imagined_success_rate<W: WorldModel>(
    world: &W,
    config: &GridConfig,
    policy: &PolicySpec,
    n_episodes: usize,
    seed: u64,
    settings: &RolloutSettings,
) -> Result<f64> {
    if n_episodes == 0 {
        return Err(Error::Config("success rate over zero episodes".into()));
    }
    use rayon::prelude::*;
    let vocab = Vocabulary::default();
    let successes: Vec<Result<bool>> = (0..n_episodes)
        .into_par_iter()
        .map(|ep| {
            let task_seed = seed.wrapping_add(ep as u64);
            let policy_seed =
                seed ^ 0xa5a5_a5a5_0000_0000 ^ (ep as u64).wrapping_mul(0x517c_c1b7_2722_0a95);
            imagined_rollout(world, config, &vocab, policy, task_seed, policy_seed, settings)
                .map(|r| r.terminal_success)
        })
        .collect();
    let mut count = 0usize;
    for s in successes {
        if s? {
            count += 1;
        }
    }
    Ok(count as f64 / n_episodes as f64)
}

/// One teacher-forced transition sample drawn from a recorded trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub task_seed: u64,
    pub instruction: String,
    pub memory: KeyframeMemory,
    pub current: Observation,
    pub chunk: ActionChunk,
    pub target: Observation,
}

/// Every chunk boundary of a trajectory as a teacher-forced sample.
pub fn transitions_from(
    vocab: &Vocabulary,
    settings: &RolloutSettings,
    traj: &Trajectory,
) -> Result<Vec<Transition>> {
    let stride = settings.stride;
    (0..traj.chunks.len())
        .map(|c| {
            let target = (c + 1) * stride;
            if target >= traj.frames.len() {
                return Err(Error::Contract(format!(
                    "trajectory has {} frames, chunk {c} needs frame {target}",
                    traj.frames.len()
                )));
            }
            Ok(Transition {
                task_seed: traj.task_seed,
                instruction: traj.instruction.clone(),
                memory: memory_before_chunk(vocab, settings.k_keyframes, stride, traj, c)?,
                current: traj.frames[c * stride].clone(),
                chunk: traj.chunks[c].clone(),
                target: traj.frames[target].clone(),
            })
        })
        .collect()
}

fn predict_sample<W: WorldModel>(world: &W, t: &Transition) -> Result<Observation> {
    world
        .predict(t.task_seed, &t.memory, &t.instruction, &t.current, &t.chunk)
        .map(|p| p.observation)
}

/// Per-subset summary of teacher-forced prediction quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    /// Mean exact cell-mismatch fraction of predicted vs true next frames.
    pub frame_mismatch: f64,
    /// Mean transition distance under the configured base metric.
    pub delta: f64,
    pub n_transitions: usize,
}

fn eval_subset<W: WorldModel>(
    world: &W,
    vocab: &Vocabulary,
    settings: &RolloutSettings,
    base: &FrameDistance,
    subset: &[Trajectory],
) -> Result<SubsetReport> {
    use rayon::prelude::*;
    let mut transitions = Vec::new();
    for traj in subset {
        transitions.extend(transitions_from(vocab, settings, traj)?);
    }
    if transitions.is_empty() {
        return Err(Error::Config("subset has no transitions".into()));
    }
    let per: Vec<Result<(f64, f64)>> = transitions
        .par_iter()
        .map(|t| {
            let pred = predict_sample(world, t)?;
            let mismatch = frame_dist(&FrameDistance::MismatchRate, &pred, &t.target)?;
            let delta = delta_dist(
                base,
                &[t.current.clone(), pred],
                &[t.current.clone(), t.target.clone()],
            )?;
            Ok((mismatch, delta))
        })
        .collect();
    let mut mm = 0.0;
    let mut dd = 0.0;
    for r in per {
        let (m, d) = r?;
        mm += m;
        dd += d;
    }
    let n = transitions.len();
    Ok(SubsetReport {
        frame_mismatch: mm / n as f64,
        delta: dd / n as f64,
        n_transitions: n,
    })
}

/// Teacher-forced single-step fidelity on successful vs failed trajectories.
pub fn controllability_eval<W: WorldModel>(
    world: &W,
    vocab: &Vocabulary,
    settings: &RolloutSettings,
    base: &FrameDistance,
    d_succ: &[Trajectory],
    d_fail: &[Trajectory],
) -> Result<(SubsetReport, SubsetReport)> {
    if d_succ.is_empty() || d_fail.is_empty() {
        return Err(Error::Config("controllability needs non-empty subsets".into()));
    }
    Ok((
        eval_subset(world, vocab, settings, base, d_succ)?,
        eval_subset(world, vocab, settings, base, d_fail)?,
    ))
}

/// Element-wise inverse chunk: reversed order, each action inverted.
pub fn inverse_chunk(chunk: &ActionChunk) -> ActionChunk {
    ActionChunk(chunk.0.iter().rev().map(|a| a.inverse()).collect())
}

/// An expert trajectory with at least `h` legal chunks, padded with no-op
/// chunks past success. Trajectories containing an illegal (clipped) action
/// are resampled with a fresh policy seed.
fn legal_expert_chunks(
    config: &GridConfig,
    task_seed: u64,
    h: usize,
    stride: usize,
) -> Result<(WorldState, Vec<ActionChunk>)> {
    'attempt: for attempt in 0..16u64 {
        let policy_seed = task_seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(attempt);
        let traj = env::collect_episode(
            config,
            &PolicySpec::expert(),
            task_seed,
            policy_seed,
            stride,
            h * stride,
        );
        let mut chunks = traj.chunks.clone();
        while chunks.len() < h {
            chunks.push(ActionChunk::noops(stride));
        }
        chunks.truncate(h);
        // Replay against the true dynamics to certify every action legal.
        let mut state = env::reset(config, task_seed);
        for chunk in &chunks {
            for a in &chunk.0 {
                if !env::action_is_legal(&state, a) {
                    eprintln!(
                        "roundtrip: resampling task {task_seed} (illegal action, attempt {attempt})"
                    );
                    continue 'attempt;
                }
                state = env::step(&state, a);
            }
        }
        return Ok((env::reset(config, task_seed), chunks));
    }
    Err(Error::Rollout(format!(
        "no legal expert trajectory for task {task_seed}"
    )))
}

/// Drive the world model `h` chunks forward and `h` inverse chunks back;
/// distance between the initial and final frames measures cumulative drift.
fn roundtrip_distance<W: WorldModel>(
    world: &W,
    vocab: &Vocabulary,
    settings: &RolloutSettings,
    base: &FrameDistance,
    config: &GridConfig,
    task_seed: u64,
    h: usize,
    use_memory: bool,
) -> Result<f64> {
    let (init, forward) = legal_expert_chunks(config, task_seed, h, settings.stride)?;
    let instruction = env::instruction_for(&init);
    let initial_obs = env::render(&init);
    let mut schedule = forward.clone();
    schedule.extend(forward.iter().rev().map(inverse_chunk));

    let mut memory = KeyframeMemory::new(settings.k_keyframes, settings.stride);
    let mut current = initial_obs.clone();
    for (idx, chunk) in schedule.iter().enumerate() {
        let mem_view = if use_memory {
            memory.clone()
        } else {
            KeyframeMemory::new(settings.k_keyframes, settings.stride)
        };
        let pred = world.predict(task_seed, &mem_view, &instruction, &current, chunk)?;
        memory.push_keyframe(vocab, (idx * settings.stride) as u64, &current)?;
        current = pred.observation;
    }
    frame_dist(base, &initial_obs, &current)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundtripRow {
    pub h: usize,
    pub full: f64,
    pub no_memory: f64,
}

/// Mean round-trip drift per horizon, for the full model and the
/// memory-disabled ablation (history segment forced empty).
pub fn roundtrip_eval<W: WorldModel>(
    world: &W,
    vocab: &Vocabulary,
    settings: &RolloutSettings,
    base: &FrameDistance,
    config: &GridConfig,
    h_values: &[usize],
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<RoundtripRow>> {
    if h_values.is_empty() || n_episodes == 0 {
        return Err(Error::Config("roundtrip needs horizons and episodes".into()));
    }
    use rayon::prelude::*;
    h_values
        .iter()
        .map(|&h| {
            if h == 0 {
                return Err(Error::Config("horizon must be at least 1".into()));
            }
            let per: Vec<Result<(f64, f64)>> = (0..n_episodes)
                .into_par_iter()
                .map(|ep| {
                    let task_seed = seed.wrapping_add(ep as u64);
                    let full = roundtrip_distance(
                        world, vocab, settings, base, config, task_seed, h, true,
                    )?;
                    let bare = roundtrip_distance(
                        world, vocab, settings, base, config, task_seed, h, false,
                    )?;
                    Ok((full, bare))
                })
                .collect();
            let mut f = 0.0;
            let mut b = 0.0;
            for r in per {
                let (x, y) = r?;
                f += x;
                b += y;
            }
            Ok(RoundtripRow {
                h,
                full: f / n_episodes as f64,
                no_memory: b / n_episodes as f64,
            })
        })
        .collect()
}

/// Random permutation without fixed points, deterministic per rng state.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    assert!(n >= 2, "derangement needs at least two elements");
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..1000 {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
    // Rotation fallback; a valid derangement for every n >= 2.
    (0..n).map(|i| (i + 1) % n).collect()
}

/// Evaluate transition fidelity with aligned chunks and with each sample's
/// chunk swapped (probability `p`) for a deranged partner's chunk. The
/// swap thresholds are drawn once from the seed, so sweeping `p` with a
/// fixed seed yields nested corruption sets.
pub fn shuffle_eval<W: WorldModel>(
    world: &W,
    vocab: &Vocabulary,
    settings: &RolloutSettings,
    base: &FrameDistance,
    trajectories: &[Trajectory],
    p: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("swap probability {p} outside [0, 1]")));
    }
    let mut transitions = Vec::new();
    for traj in trajectories {
        transitions.extend(transitions_from(vocab, settings, traj)?);
    }
    let n = transitions.len();
    if n == 0 {
        return Err(Error::Config("shuffle needs a non-empty batch".into()));
    }
    if n < 2 && p > 0.0 {
        return Err(Error::Config(
            "a batch of one admits no fixed-point-free swap".into(),
        ));
    }
    let (perm, thresholds) = if n >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perm = derangement(n, &mut rng);
        let thresholds: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        (perm, thresholds)
    } else {
        ((0..n).collect::<Vec<usize>>(), vec![1.0; n])
    };
    use rayon::prelude::*;
    let per: Vec<Result<(f64, f64)>> = transitions
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let aligned_pred = predict_sample(world, t)?;
            let aligned = delta_dist(
                base,
                &[t.current.clone(), aligned_pred.clone()],
                &[t.current.clone(), t.target.clone()],
            )?;
            let corrupted = if thresholds[i] < p {
                let mut foreign = t.clone();
                foreign.chunk = transitions[perm[i]].chunk.clone();
                let pred = predict_sample(world, &foreign)?;
                delta_dist(
                    base,
                    &[t.current.clone(), pred],
                    &[t.current.clone(), t.target.clone()],
                )?
            } else {
                aligned
            };
            Ok((aligned, corrupted))
        })
        .collect();
    let mut a = 0.0;
    let mut c = 0.0;
    for r in per {
        let (x, y) = r?;
        a += x;
        c += y;
    }
    Ok((a / n as f64, c / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> GridConfig {
        GridConfig { width: 6, height: 6, n_objects: 1 }
    }

    fn settings() -> RolloutSettings {
        RolloutSettings { k_keyframes: 2, stride: 2, max_chunks: 30 }
    }

    fn oracle() -> OracleWorldModel {
        OracleWorldModel { config: config() }
    }

    #[test]
    fn oracle_rollout_reproduces_the_real_episode() {
        let cfg = config();
        let s = settings();
        let vocab = Vocabulary::default();
        for ep in 0..5u64 {
            let task_seed = 100 + ep;
            let policy_seed = 0xa5a5 ^ ep;
            let rollout = imagined_rollout(
                &oracle(),
                &cfg,
                &vocab,
                &PolicySpec::expert(),
                task_seed,
                policy_seed,
                &s,
            )
            .unwrap();
            assert!(rollout.terminal_success, "seed {task_seed}");
            assert!(rollout.abort_cause.is_none());
            assert_eq!(rollout.frames.len(), rollout.actions.len() + 1);
            assert_eq!(rollout.frames.len(), rollout.progress.len() + 1);
            let real = env::collect_episode(
                &cfg,
                &PolicySpec::expert(),
                task_seed,
                policy_seed,
                s.stride,
                s.max_chunks * s.stride,
            );
            assert!(real.success);
            for (c, frame) in rollout.frames.iter().enumerate() {
                let idx = c * s.stride;
                if idx < real.frames.len() {
                    assert_eq!(frame, &real.frames[idx], "seed {task_seed} keyframe {c}");
                }
            }
        }
    }

    #[test]
    fn zero_chunk_rollout_is_single_frame() {
        let cfg = config();
        let s = RolloutSettings { max_chunks: 0, ..settings() };
        let vocab = Vocabulary::default();
        let r = imagined_rollout(&oracle(), &cfg, &vocab, &PolicySpec::expert(), 7, 7, &s)
            .unwrap();
        assert_eq!(r.frames.len(), 1);
        assert!(r.actions.is_empty());
        // Fresh tasks never start complete.
        assert!(!r.terminal_success);
    }

    /// Echoes the current frame; succeeds immediately on even task seeds.
    struct ParityWorld;
    impl WorldModel for ParityWorld {
        fn predict(
            &self,
            task_seed: u64,
            _memory: &KeyframeMemory,
            _instruction: &str,
            current: &Observation,
            _chunk: &ActionChunk,
        ) -> Result<Prediction> {
            let progress = if task_seed % 2 == 0 {
                Progress::COMPLETE
            } else {
                Progress::LEVELS[0]
            };
            Ok(Prediction {
                observation: current.clone(),
                progress: Some(progress),
                diagnostics: Default::default(),
            })
        }
    }

    #[test]
    fn success_rate_is_the_mean_of_terminal_flags() {
        let cfg = config();
        let s = RolloutSettings { max_chunks: 3, ..settings() };
        let j = imagined_success_rate(&ParityWorld, &cfg, &PolicySpec::expert(), 4, 0, &s)
            .unwrap();
        assert_eq!(j, 0.5);
        let j1 = imagined_success_rate(&ParityWorld, &cfg, &PolicySpec::expert(), 3, 0, &s)
            .unwrap();
        assert!((j1 - 2.0 / 3.0).abs() < 1e-12);
    }

    /// A decoded non-progress token (None) counts as failure.
    struct MuteWorld;
    impl WorldModel for MuteWorld {
        fn predict(
            &self,
            _task_seed: u64,
            _memory: &KeyframeMemory,
            _instruction: &str,
            current: &Observation,
            _chunk: &ActionChunk,
        ) -> Result<Prediction> {
            Ok(Prediction {
                observation: current.clone(),
                progress: None,
                diagnostics: Default::default(),
            })
        }
    }

    #[test]
    fn missing_progress_counts_as_failure() {
        let cfg = config();
        let s = RolloutSettings { max_chunks: 2, ..settings() };
        let vocab = Vocabulary::default();
        let r = imagined_rollout(&MuteWorld, &cfg, &vocab, &PolicySpec::expert(), 3, 3, &s)
            .unwrap();
        assert!(!r.terminal_success);
        assert!(r.abort_cause.is_none());
    }

    fn sample_trajectories(spec: &PolicySpec, n: usize, seed: u64) -> Vec<Trajectory> {
        env::collect_trajectories(&config(), spec, n, 2, 48, seed).unwrap()
    }

    #[test]
    fn oracle_controllability_is_exact_on_both_subsets() {
        let vocab = Vocabulary::default();
        let s = settings();
        let succ = sample_trajectories(&PolicySpec::expert(), 3, 10);
        let fail = sample_trajectories(&PolicySpec::epsilon_noisy(0.8), 3, 20);
        let (rs, rf) = controllability_eval(
            &oracle(),
            &vocab,
            &s,
            &FrameDistance::default(),
            &succ,
            &fail,
        )
        .unwrap();
        assert_eq!(rs.frame_mismatch, 0.0);
        assert_eq!(rs.delta, 0.0);
        assert_eq!(rf.frame_mismatch, 0.0);
        assert_eq!(rf.delta, 0.0);
        assert!(rs.n_transitions > 0 && rf.n_transitions > 0);
    }

    #[test]
    fn empty_subset_is_a_configuration_error() {
        let vocab = Vocabulary::default();
        let succ = sample_trajectories(&PolicySpec::expert(), 2, 1);
        let err = controllability_eval(
            &oracle(),
            &vocab,
            &settings(),
            &FrameDistance::default(),
            &succ,
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn oracle_roundtrip_drift_is_zero_for_all_horizons() {
        let vocab = Vocabulary::default();
        let rows = roundtrip_eval(
            &oracle(),
            &vocab,
            &settings(),
            &FrameDistance::MismatchRate,
            &config(),
            &[1, 3, 5],
            4,
            40,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        for row in rows {
            assert_eq!(row.full, 0.0, "H={}", row.h);
            assert_eq!(row.no_memory, 0.0, "H={}", row.h);
        }
    }

    #[test]
    fn inverse_chunk_reverses_and_inverts() {
        use crate::env::{Action, Grip};
        let chunk = ActionChunk(vec![
            Action::new(1, 0, Grip::None),
            Action::new(0, 0, Grip::Grasp),
        ]);
        let inv = inverse_chunk(&chunk);
        assert_eq!(inv.0[0], Action::new(0, 0, Grip::Release));
        assert_eq!(inv.0[1], Action::new(-1, 0, Grip::None));
    }

    #[test]
    fn derangements_have_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..12 {
            for _ in 0..20 {
                let p = derangement(n, &mut rng);
                let mut sorted = p.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
                assert!(p.iter().enumerate().all(|(i, &x)| i != x), "{p:?}");
            }
        }
    }

    #[test]
    fn shuffle_p_zero_is_identity_and_p_one_hurts_the_oracle() {
        let vocab = Vocabulary::default();
        let s = settings();
        let trajs = sample_trajectories(&PolicySpec::expert(), 4, 60);
        let base = FrameDistance::default();
        let (a0, c0) = shuffle_eval(&oracle(), &vocab, &s, &base, &trajs, 0.0, 9).unwrap();
        assert_eq!(a0, c0);
        assert_eq!(a0, 0.0);
        let (a1, c1) = shuffle_eval(&oracle(), &vocab, &s, &base, &trajs, 1.0, 9).unwrap();
        assert_eq!(a1, 0.0);
        assert!(c1 > a1, "foreign chunks must hurt a perfect predictor");
    }

    #[test]
    fn shuffle_sweep_is_monotone_with_a_shared_seed() {
        let vocab = Vocabulary::default();
        let s = settings();
        let trajs = sample_trajectories(&PolicySpec::expert(), 4, 61);
        let base = FrameDistance::default();
        let mut last = -1.0;
        for &p in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let (_, c) = shuffle_eval(&oracle(), &vocab, &s, &base, &trajs, p, 13).unwrap();
            assert!(c >= last, "p={p}: {c} < {last}");
            last = c;
        }
    }

    #[test]
    fn singleton_batch_with_swaps_is_rejected() {
        let vocab = Vocabulary::default();
        let s = RolloutSettings { k_keyframes: 2, stride: 2, max_chunks: 1 };
        // One trajectory truncated to a single chunk -> single transition.
        let mut traj = sample_trajectories(&PolicySpec::expert(), 1, 3).remove(0);
        traj.chunks.truncate(1);
        traj.frames.truncate(3);
        traj.progress.truncate(3);
        let err = shuffle_eval(
            &oracle(),
            &vocab,
            &s,
            &FrameDistance::default(),
            &[traj.clone()],
            0.5,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        // p = 0 on the same batch is fine.
        shuffle_eval(&oracle(), &vocab, &s, &FrameDistance::default(), &[traj], 0.0, 1)
            .unwrap();
    }

    #[test]
    fn oracle_correlation_study_is_perfect() {
        let cfg = config();
        let s = RolloutSettings { k_keyframes: 2, stride: 2, max_chunks: 24 };
        let policies: Vec<(String, PolicySpec)> = [0.0, 0.35, 0.85]
            .iter()
            .map(|&e| (format!("eps{e}"), PolicySpec::epsilon_noisy(e)))
            .collect();
        let report =
            crate::metrics::correlation_study(&oracle(), &cfg, &policies, 16, 500, &s).unwrap();
        assert_eq!(report.pairs.len(), 3);
        for p in &report.pairs {
            assert_eq!(p.real_rate, p.imagined_rate, "{}", p.policy_id);
        }
        assert!((report.pearson_r - 1.0).abs() < 1e-9);
        assert_eq!(report.mmrv, 0.0);
    }
}
