//! Dataset generation: expert train/val/test splits plus a noisy-policy
//! failure split, written as line-delimited JSON with a manifest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::{collect_trajectories, write_dataset, PolicySpec};
use crate::tokens::Vocabulary;
use crate::Result;

use super::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub episodes: usize,
    pub success_rate: f64,
    pub seed: u64,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub vocab_hash: String,
    pub width: usize,
    pub height: usize,
    pub n_objects: usize,
    pub chunk_size: usize,
    pub splits: BTreeMap<String, SplitInfo>,
}

/// Per-split seed offsets keep the splits disjoint under one base seed.
pub const SPLIT_SEED_OFFSETS: [(&str, u64); 4] =
    [("train", 0), ("val", 10_000), ("test", 20_000), ("fail", 30_000)];

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DatasetManifest> {
    let mut splits = BTreeMap::new();
    for (name, offset) in SPLIT_SEED_OFFSETS {
        let (policy, episodes) = match name {
            "train" => (PolicySpec::expert(), cfg.data.train_episodes),
            "val" => (PolicySpec::expert(), cfg.data.val_episodes),
            "test" => (PolicySpec::expert(), cfg.data.test_episodes),
            _ => (
                PolicySpec::epsilon_noisy(cfg.data.fail_epsilon),
                cfg.data.fail_episodes,
            ),
        };
        let seed = cfg.data.seed.wrapping_add(offset);
        let mut trajectories = collect_trajectories(
            &cfg.env,
            &policy,
            episodes,
            cfg.data.chunk_size,
            cfg.data.max_steps,
            seed,
        )?;
        let mut policy_label = format!("{policy:?}");
        if name == "train" && cfg.data.train_noisy_episodes > 0 {
            // Off-expert transitions, so imperfect policies stay
            // in-distribution at evaluation time. The episode budget is
            // spread over the configured epsilon ladder so intermediate
            // behaviour quality is covered too.
            let epsilons = &cfg.data.train_noisy_epsilons;
            for (k, &eps) in epsilons.iter().enumerate() {
                let count = cfg.data.train_noisy_episodes / epsilons.len()
                    + usize::from(k < cfg.data.train_noisy_episodes % epsilons.len());
                if count == 0 {
                    continue;
                }
                trajectories.extend(collect_trajectories(
                    &cfg.env,
                    &PolicySpec::epsilon_noisy(eps),
                    count,
                    cfg.data.chunk_size,
                    cfg.data.max_steps,
                    seed.wrapping_add(40_000 + 1_000 * k as u64),
                )?);
            }
            policy_label = format!(
                "{policy:?} + {} noisy over eps {:?}",
                cfg.data.train_noisy_episodes, epsilons
            );
        }
        let episodes = trajectories.len();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &trajectories)?;
        write_atomic(&cfg.io.data_dir.join(format!("{name}.jsonl")), &buf)?;
        let success = trajectories.iter().filter(|t| t.success).count();
        splits.insert(
            name.to_string(),
            SplitInfo {
                episodes,
                success_rate: success as f64 / episodes.max(1) as f64,
                seed,
                policy: policy_label,
            },
        );
    }
    let manifest = DatasetManifest {
        config_hash: cfg.hash(),
        vocab_hash: Vocabulary::default().hash(),
        width: cfg.env.width,
        height: cfg.env.height,
        n_objects: cfg.env.n_objects,
        chunk_size: cfg.data.chunk_size,
        splits,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&cfg.io.data_dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

/// Read one split back as trajectories.
pub fn load_split(cfg: &RunConfig, name: &str) -> Result<Vec<crate::env::Trajectory>> {
    let path = cfg.io.data_dir.join(format!("{name}.jsonl"));
    let file = std::fs::File::open(&path).map_err(|e| {
        crate::Error::Config(format!("cannot open split {}: {e}", path.display()))
    })?;
    crate::env::read_dataset(std::io::BufReader::new(file), cfg.env.width, cfg.env.height)
}

/// The manifest bytes hashed, used to stamp checkpoints with their data.
pub fn manifest_hash(cfg: &RunConfig) -> Result<String> {
    let bytes = std::fs::read(cfg.io.data_dir.join("manifest.json"))?;
    Ok(super::content_hash(&bytes))
}
