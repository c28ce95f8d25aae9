//! Generate the four dataset splits (expert train/val/test plus a
//! noisy-policy failure split) and print the manifest.
//!
//! Run with: cargo run --example generate_dataset

use wmeval::commands::cmd_gen_data;
use wmeval::config::RunConfig;

fn main() -> wmeval::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut cfg = RunConfig::from_text(
        "[data]\n\
         train_episodes = 32\n\
         val_episodes = 8\n\
         test_episodes = 8\n\
         fail_episodes = 16\n",
    )?;
    cfg.io.data_dir = dir.path().join("data");
    cfg.io.out_dir = dir.path().join("out");

    let manifest = cmd_gen_data(&cfg)?;
    println!("config hash : {}", manifest.config_hash);
    println!("vocab hash  : {}", manifest.vocab_hash);
    println!(
        "grid        : {}x{}, {} object(s), chunk size {}",
        manifest.width, manifest.height, manifest.n_objects, manifest.chunk_size
    );
    for (name, info) in &manifest.splits {
        println!(
            "{name:>6}: {:3} episodes  success rate {:.3}  ({})",
            info.episodes, info.success_rate, info.policy
        );
    }
    println!("\nfiles under {}:", cfg.io.data_dir.display());
    for entry in std::fs::read_dir(&cfg.io.data_dir)? {
        let entry = entry?;
        println!("  {} ({} bytes)", entry.file_name().to_string_lossy(), entry.metadata()?.len());
    }
    Ok(())
}
