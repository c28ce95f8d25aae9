//! Show the unified token interface: how a grid frame, the keyframe memory,
//! the instruction, an action chunk, and the progress score all pack into
//! one flat token sequence with per-position segment kinds, and how masked
//! target slots look before the model fills them in.
//!
//! Run with: cargo run --example tokenize_sequence

use std::sync::Arc;

use wmeval::env::{self, ActionChunk, GridConfig};
use wmeval::tokens::{
    build_sequence, tokenize_observation, KeyframeMemory, LayoutConfig, Resolution,
    SequenceLayout, Vocabulary,
};

fn main() -> wmeval::Result<()> {
    let vocab = Vocabulary::default();
    println!("vocabulary: {} tokens, hash {}", vocab.size(), vocab.hash());
    println!("first manifest lines:");
    for line in vocab.manifest().lines().take(5) {
        println!("  {line}");
    }

    let config = GridConfig { width: 6, height: 6, n_objects: 1 };
    let layout = Arc::new(SequenceLayout::new(LayoutConfig {
        width: config.width,
        height: config.height,
        k_keyframes: 2,
        chunk_size: 2,
        instruction_len: 5,
    }));
    println!("\nlayout: {} positions total", layout.total_len);

    // One expert step from a fresh task.
    let state = env::reset(&config, 3);
    let obs = env::render(&state);
    let instruction = env::instruction_for(&state);
    let a = env::expert_action(&state);
    let chunk = ActionChunk(vec![a.clone(), a]);

    println!("full-res frame tokens : {} ids", tokenize_observation(&vocab, &obs, Resolution::Full).len());
    println!("low-res keyframe size : {} ids", tokenize_observation(&vocab, &obs, Resolution::Low).len());

    let memory = KeyframeMemory::new(2, 2);
    let seq = build_sequence(
        &vocab, &layout, &memory, &instruction, &obs, &chunk,
        None, // target frame unknown -> masked
        None, // progress unknown -> masked
    )?;

    println!("\nsegment map (kind: span, masked positions):");
    for seg in &layout.segments {
        let masked =
            (seg.offset..seg.offset + seg.len).filter(|&p| seq.mask_flags[p]).count();
        println!(
            "  {:?}: positions {}..{} ({} wide), {masked} masked",
            seg.kind,
            seg.offset,
            seg.offset + seg.len,
            seg.len
        );
    }
    Ok(())
}
