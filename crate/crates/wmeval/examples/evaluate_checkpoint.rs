//! End-to-end mini pipeline on a learned model: generate data, train a
//! deliberately small model briefly, then run the controllability protocol
//! against the checkpoint. Expect mediocre numbers — the point is the wiring;
//! the CLI defaults train long enough to pass the acceptance thresholds.
//!
//! Run with: cargo run --release --example evaluate_checkpoint

use wmeval::commands::{cmd_eval, cmd_gen_data, cmd_train};
use wmeval::config::RunConfig;

fn main() -> wmeval::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut cfg = RunConfig::from_text(
        "[data]\n\
         train_episodes = 48\n\
         val_episodes = 4\n\
         test_episodes = 6\n\
         fail_episodes = 8\n\
         [model]\n\
         dim = 24\n\
         layers = 2\n\
         heads = 2\n\
         [train]\n\
         steps = 400\n\
         batch_size = 8\n\
         log_every = 50\n",
    )?;
    cfg.io.data_dir = dir.path().join("data");
    cfg.io.out_dir = dir.path().join("out");
    cfg.io.checkpoint = dir.path().join("out/model.ckpt");

    println!("generating data...");
    cmd_gen_data(&cfg)?;
    println!("training (reduced recipe)...");
    let t = cmd_train(&cfg, false)?;
    println!("loss {:.3} -> {:.3}", t.first_logged_loss, t.final_loss);

    println!("running controllability protocol on the checkpoint...");
    let art = cmd_eval(&cfg, "controllability", false, false)?;
    println!("{}", serde_json::to_string_pretty(&art.aggregate)?);
    println!("artifacts: {} / {}", art.csv.display(), art.json.display());
    Ok(())
}
