//! Roll a policy entirely inside a world model's imagination: the policy
//! never touches the simulator after reset; it parses each imagined frame,
//! picks an action chunk, and the model dreams the next keyframe.
//!
//! Here the "model" is the simulator-backed oracle so the frames are exact;
//! swap in `LearnedWorldModel` over a checkpoint for the real thing.
//!
//! Run with: cargo run --example imagined_rollout

use wmeval::env::{
    GridConfig, Observation, PolicySpec, CODE_BACKGROUND, CODE_GRIPPER, CODE_TARGET_MARKER,
    OBJECT_CODE_BASE,
};
use wmeval::rollout::{imagined_rollout, OracleWorldModel, RolloutSettings};
use wmeval::tokens::Vocabulary;

fn glyph(code: u8) -> char {
    match code {
        CODE_BACKGROUND => '.',
        CODE_TARGET_MARKER => 'x',
        CODE_GRIPPER => 'G',
        c => {
            let rel = c - OBJECT_CODE_BASE;
            // plain / hover / held variants of object rel/3
            match rel % 3 {
                0 => (b'a' + rel / 3) as char,
                1 => (b'A' + rel / 3) as char,
                _ => '*',
            }
        }
    }
}

fn show(frame: &Observation) {
    for y in 0..frame.height as i32 {
        let row: String = (0..frame.width as i32).map(|x| glyph(frame.get(x, y))).collect();
        println!("    {row}");
    }
}

fn main() -> wmeval::Result<()> {
    let config = GridConfig { width: 6, height: 6, n_objects: 1 };
    let world = OracleWorldModel { config: config.clone() };
    let settings = RolloutSettings { k_keyframes: 2, stride: 2, max_chunks: 24 };
    let vocab = Vocabulary::default();

    let rollout = imagined_rollout(
        &world,
        &config,
        &vocab,
        &PolicySpec::expert(),
        7,   // task seed
        99,  // policy seed
        &settings,
    )?;

    println!("task seed {}: {} imagined keyframes", rollout.task_seed, rollout.frames.len());
    println!("legend: . empty, x target, G gripper, a object, A hover, * held\n");
    for (i, frame) in rollout.frames.iter().enumerate() {
        // progress[k] is the decoded score for predicted frame k+1; the
        // initial frame is observed, not predicted.
        let progress = match i.checked_sub(1).and_then(|k| rollout.progress.get(k)) {
            Some(Some(p)) => p.label().to_string(),
            Some(None) => "undecodable".to_string(),
            None => "observed".to_string(),
        };
        println!("  keyframe {i} (progress: {progress})");
        show(frame);
    }
    println!(
        "\nterminal success: {} (abort cause: {:?})",
        rollout.terminal_success, rollout.abort_cause
    );
    Ok(())
}
