//! Scratch probe against a saved checkpoint (debugging aid, not part of the
//! documented example set).

use std::sync::Arc;

use wmeval::config::RunConfig;
use wmeval::env::{self, PolicySpec};
use wmeval::metrics::{frame_dist, FrameDistance};
use wmeval::nn::{load_checkpoint, Float, Model};
use wmeval::rollout::{imagined_rollout, inverse_chunk, LearnedWorldModel, RolloutSettings, WorldModel};
use wmeval::tokens::{KeyframeMemory, Vocabulary};

fn show(obs: &wmeval::env::Observation) -> String {
    let mut s = String::new();
    for y in 0..obs.height as i32 {
        for x in 0..obs.width as i32 {
            s.push(match obs.get(x, y) {
                0 => '.',
                1 => '+',
                2 => 'G',
                c => (b'a' + (c - 3)) as char,
            });
        }
        s.push('|');
    }
    s
}

fn main() {
    let cfg_text = std::fs::read_to_string(format!("{}/cfg.ini", std::env::args().nth(1).unwrap_or_else(|| "/tmp/s8".into()))).unwrap();
    let cfg = RunConfig::from_text(&cfg_text).unwrap();
    let vocab = Vocabulary::default();
    let layout = Arc::new(cfg.layout());
    let (model, _meta): (Model<Float>, _) =
        load_checkpoint(&std::path::PathBuf::from(format!("{}/out/model.ckpt", std::env::args().nth(1).unwrap_or_else(|| "/tmp/s8".into())))).unwrap();
    let world = LearnedWorldModel {
        model: &model,
        vocab: &vocab,
        layout,
        decode: cfg.decode.clone(),
    };
    let s = RolloutSettings {
        k_keyframes: cfg.k_keyframes,
        stride: cfg.data.chunk_size,
        max_chunks: cfg.eval.max_chunks,
    };

    // --- correlation probe: what happens inside imagined rollouts ---
    for &w in &[0.0, 0.4, 1.0] {
        let policy = PolicySpec::mixture(w);
        let mut succ = 0;
        let mut aborts = 0;
        for ep in 0..cfg.eval.episodes as u64 {
            let task_seed = cfg.eval.seed.wrapping_add(ep);
            let policy_seed = cfg.eval.seed
                ^ 0xa5a5_a5a5_0000_0000
                ^ ep.wrapping_mul(0x517c_c1b7_2722_0a95);
            let r = imagined_rollout(&world, &cfg.env, &vocab, &policy, task_seed, policy_seed, &s)
                .unwrap();
            succ += usize::from(r.terminal_success);
            if let Some(cause) = &r.abort_cause {
                aborts += 1;
                if ep < 4 {
                    println!("w={w} ep={ep}: ABORT {cause} after {} frames", r.frames.len());
                }
            } else if ep < 4 {
                println!(
                    "w={w} ep={ep}: success={} chunks={} last_progress={:?}",
                    r.terminal_success,
                    r.actions.len(),
                    r.progress.last()
                );
            }
        }
        println!(
            "w={w}: imagined rate {}/{} ({aborts} aborts)\n",
            succ, cfg.eval.episodes
        );
    }

    // --- roundtrip probe: no-memory arm step by step ---
    let base = FrameDistance::EmbeddedL2 { seed: cfg.eval.embed_seed };
    for h in [5usize, 10] {
        let task_seed = cfg.eval.seed;
        let traj = env::collect_episode(
            &cfg.env,
            &PolicySpec::expert(),
            task_seed,
            task_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            s.stride,
            h * s.stride,
        );
        let mut forward = traj.chunks.clone();
        while forward.len() < h {
            forward.push(wmeval::env::ActionChunk::noops(s.stride));
        }
        forward.truncate(h);
        let init = env::reset(&cfg.env, task_seed);
        let instruction = env::instruction_for(&init);
        let initial_obs = env::render(&init);
        let mut schedule = forward.clone();
        schedule.extend(forward.iter().rev().map(inverse_chunk));
        println!("H={h} initial: {}", show(&initial_obs));
        for use_memory in [true, false] {
            let mut memory = KeyframeMemory::new(s.k_keyframes, s.stride);
            let mut current = initial_obs.clone();
            for (idx, chunk) in schedule.iter().enumerate() {
                let mem_view = if use_memory {
                    memory.clone()
                } else {
                    KeyframeMemory::new(s.k_keyframes, s.stride)
                };
                let pred = world
                    .predict(task_seed, &mem_view, &instruction, &current, chunk)
                    .unwrap();
                memory
                    .push_keyframe(&vocab, (idx * s.stride) as u64, &current)
                    .unwrap();
                current = pred.observation;
                if !use_memory {
                    println!("  bare step {idx}: {}", show(&current));
                }
            }
            let d = frame_dist(&base, &initial_obs, &current).unwrap();
            println!("H={h} use_memory={use_memory}: final dist {d:.4} frame {}", show(&current));
        }
    }
}
