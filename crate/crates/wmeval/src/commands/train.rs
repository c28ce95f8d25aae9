//! Training loop: seeded batch sampling, loss logging, periodic atomic
//! checkpoints, and bitwise-deterministic resume (model, optimizer moments,
//! and rng position are all persisted).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::Arc;

use crate::config::RunConfig;
use crate::diffusion::{dataset_records, train_step};
use crate::nn::{
    load_checkpoint_verified, save_checkpoint, AdamW, CheckpointMeta, Float, Model,
};
use crate::tokens::Vocabulary;
use crate::{Error, Result};

use super::gen_data::{load_split, manifest_hash};
use super::write_atomic;

/// Sidecar state next to the checkpoint, needed for exact continuation.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainState {
    step: u64,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    log_rows: Vec<String>,
}

fn state_path(cfg: &RunConfig) -> PathBuf {
    let mut p = cfg.io.checkpoint.as_os_str().to_owned();
    p.push(".state");
    PathBuf::from(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps_run: u64,
    /// Moving average of the last logged losses.
    pub final_loss: f64,
    pub first_logged_loss: f64,
    pub checkpoint: PathBuf,
}

fn save_all(
    cfg: &RunConfig,
    model: &Model<Float>,
    opt: &AdamW,
    rng: &ChaCha8Rng,
    meta: &CheckpointMeta,
    log_rows: &[String],
) -> Result<()> {
    save_checkpoint(&cfg.io.checkpoint, model, meta)?;
    let (m, v) = opt.moments();
    let pos = rng.get_word_pos();
    let state = TrainState {
        step: opt.step,
        rng_word_pos_hi: (pos >> 64) as u64,
        rng_word_pos_lo: pos as u64,
        m: m.to_vec(),
        v: v.to_vec(),
        log_rows: log_rows.to_vec(),
    };
    write_atomic(&state_path(cfg), &serde_json::to_vec(&state)?)?;
    let mut csv = format!("# config={}\nstep,loss,lambda_mean,mask_fraction\n", cfg.hash());
    for row in log_rows {
        csv.push_str(row);
        csv.push('\n');
    }
    write_atomic(&cfg.io.out_dir.join("loss.csv"), csv.as_bytes())
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let vocab = Vocabulary::default();
    let layout = Arc::new(cfg.layout());
    let dataset_hash = manifest_hash(cfg)?;
    let trajectories = load_split(cfg, "train")?;
    let records = dataset_records(&vocab, &layout, &trajectories)?;
    if records.is_empty() {
        return Err(Error::Config("training split has no transitions".into()));
    }

    let meta_template = CheckpointMeta {
        config: cfg.model.clone(),
        vocab_hash: vocab.hash(),
        layout: (*layout).clone(),
        train_step: 0,
        dataset_hash: Some(dataset_hash),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (mut model, mut opt, mut log_rows): (Model<Float>, AdamW, Vec<String>) = if resume {
        let (model, meta) = load_checkpoint_verified(&cfg.io.checkpoint, &meta_template.vocab_hash)?;
        let raw = std::fs::read(state_path(cfg))
            .map_err(|e| Error::Checkpoint(format!("missing optimizer state: {e}")))?;
        let state: TrainState = serde_json::from_slice(&raw)
            .map_err(|e| Error::Checkpoint(format!("bad optimizer state: {e}")))?;
        if state.step != meta.train_step {
            return Err(Error::Checkpoint(format!(
                "optimizer state at step {}, checkpoint at step {}",
                state.step, meta.train_step
            )));
        }
        let pos = ((state.rng_word_pos_hi as u128) << 64) | state.rng_word_pos_lo as u128;
        rng.set_word_pos(pos);
        let opt = AdamW::restore(cfg.optimizer(), state.step, state.m, state.v);
        (model, opt, state.log_rows)
    } else {
        let model = Model::new(cfg.model.clone())?;
        let opt = AdamW::new(cfg.optimizer(), model.n_params());
        (model, opt, Vec::new())
    };

    let start = opt.step;
    let mut first_logged = f64::NAN;
    let mut recent: Vec<f64> = Vec::new();
    for step in start..cfg.train.steps as u64 {
        let batch: Vec<_> = (0..cfg.train.batch_size)
            .map(|_| records[rng.gen_range(0..records.len())].clone())
            .collect();
        opt.config.learning_rate =
            cfg.train.learning_rate * cfg.train.lr_decay.powi(step as i32);
        let stats = train_step(
            &mut model,
            &mut opt,
            &vocab,
            &batch,
            &cfg.train.weights,
            cfg.train.history_dropout,
            &mut rng,
        )
            .map_err(|e| Error::Training(format!("step {}: {e}", step + 1)))?;
        recent.push(stats.loss);
        if recent.len() > 20 {
            recent.remove(0);
        }
        let done = step + 1;
        if done % cfg.train.log_every as u64 == 0 || done == 1 {
            if first_logged.is_nan() {
                first_logged = stats.loss;
            }
            log_rows.push(format!(
                "{done},{:.6},{:.4},{:.4}",
                stats.loss, stats.mean_lambda, stats.mean_mask_fraction
            ));
        }
        if done % cfg.train.checkpoint_every as u64 == 0 || done == cfg.train.steps as u64 {
            let meta = CheckpointMeta { train_step: done, ..meta_template.clone() };
            save_all(cfg, &model, &opt, &rng, &meta, &log_rows)?;
        }
    }
    if start >= cfg.train.steps as u64 {
        // Nothing to do; make sure artifacts exist for downstream commands.
        let meta = CheckpointMeta { train_step: start, ..meta_template };
        save_all(cfg, &model, &opt, &rng, &meta, &log_rows)?;
    }
    let final_loss = if recent.is_empty() {
        f64::NAN
    } else {
        recent.iter().sum::<f64>() / recent.len() as f64
    };
    Ok(TrainOutcome {
        steps_run: cfg.train.steps as u64 - start.min(cfg.train.steps as u64),
        final_loss,
        first_logged_loss: first_logged,
        checkpoint: cfg.io.checkpoint.clone(),
    })
}
