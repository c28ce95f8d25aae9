//! Train a small masked-diffusion world model for a few hundred steps and
//! watch the loss fall. Uses a reduced recipe so it finishes in well under a
//! minute; the CLI (`wmeval train`) runs the full desk-scale recipe.
//!
//! Run with: cargo run --example train_world_model

use wmeval::commands::{cmd_gen_data, cmd_train};
use wmeval::config::RunConfig;

fn main() -> wmeval::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut cfg = RunConfig::from_text(
        "[data]\n\
         train_episodes = 24\n\
         val_episodes = 4\n\
         test_episodes = 4\n\
         fail_episodes = 4\n\
         [model]\n\
         dim = 24\n\
         layers = 2\n\
         heads = 2\n\
         [train]\n\
         steps = 200\n\
         batch_size = 8\n\
         log_every = 20\n",
    )?;
    cfg.io.data_dir = dir.path().join("data");
    cfg.io.out_dir = dir.path().join("out");
    cfg.io.checkpoint = dir.path().join("out/model.ckpt");

    cmd_gen_data(&cfg)?;
    let outcome = cmd_train(&cfg, false)?;
    println!(
        "ran {} steps: first logged loss {:.4} -> recent mean {:.4}",
        outcome.steps_run, outcome.first_logged_loss, outcome.final_loss
    );
    println!("checkpoint: {}", outcome.checkpoint.display());

    println!("\nloss curve (step, loss, mean lambda, mask fraction):");
    let csv = std::fs::read_to_string(cfg.io.out_dir.join("loss.csv"))?;
    for line in csv.lines().skip(2) {
        println!("  {line}");
    }
    Ok(())
}
