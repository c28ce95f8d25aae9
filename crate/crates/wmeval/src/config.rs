//! Run configuration: a minimal INI-style `[section] key=value` format
//! parsed without dependencies, mapped onto typed sections with desk-scale
//! defaults, plus a content hash propagated into every output artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DecodeConfig, LossWeights};
use crate::env::GridConfig;
use crate::nn::{ModelConfig, OptimizerConfig};
use crate::tokens::{LayoutConfig, SequenceLayout, Vocabulary, N_SEGMENT_KINDS};
use crate::{Error, Result};

/// Raw parsed file: section -> key -> value.
pub type RawConfig = BTreeMap<String, BTreeMap<String, String>>;

/// Parse INI-style text: `[section]` headers, `key = value` lines, `#` and
/// `;` comments, blank lines ignored.
pub fn parse_ini(text: &str) -> Result<RawConfig> {
    let mut out: RawConfig = BTreeMap::new();
    let mut section = String::from("global");
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find(['#', ';']) {
            Some(i) => &raw_line[..i],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            out.entry(section.clone()).or_default();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
        })?;
        out.entry(section.clone())
            .or_default()
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn get<T: FromStr>(raw: &RawConfig, section: &str, key: &str, default: T) -> Result<T> {
    match raw.get(section).and_then(|s| s.get(key)) {
        Some(v) => v.parse().map_err(|_| {
            Error::Config(format!("[{section}] {key}: cannot parse {v:?}"))
        }),
        None => Ok(default),
    }
}

fn get_list<T: FromStr>(raw: &RawConfig, section: &str, key: &str, default: &[T]) -> Result<Vec<T>>
where
    T: Clone,
{
    match raw.get(section).and_then(|s| s.get(key)) {
        Some(v) => v
            .split(',')
            .map(|x| {
                x.trim().parse().map_err(|_| {
                    Error::Config(format!("[{section}] {key}: cannot parse element {x:?}"))
                })
            })
            .collect(),
        None => Ok(default.to_vec()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    /// Noisy-policy episodes appended to the train split so off-expert
    /// transitions are in-distribution for the world model.
    pub train_noisy_episodes: usize,
    /// Epsilons used for the noisy train episodes, cycled round-robin, so
    /// intermediate-quality behaviour is covered, not just near-random.
    pub train_noisy_epsilons: Vec<f64>,
    /// Episodes for the failure split, collected with a noisy policy.
    pub fail_episodes: usize,
    pub fail_epsilon: f64,
    pub chunk_size: usize,
    pub max_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-step multiplicative learning-rate decay. Depends only on the step
    /// index, so interrupted runs resume bitwise-identically.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    /// Probability of blanking the history segment of a training record, so
    /// empty-memory contexts are in-distribution at every episode stage.
    pub history_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub episodes: usize,
    pub seed: u64,
    pub max_chunks: usize,
    /// Seeds per horizon for the round-trip protocol (it is the most
    /// decode-hungry protocol, so it gets its own budget).
    pub roundtrip_episodes: usize,
    pub horizons: Vec<usize>,
    pub swap_probs: Vec<f64>,
    /// Mixture weights of the ranked policy family.
    pub mix_weights: Vec<f64>,
    pub embed_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoSection {
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: GridConfig,
    pub data: DataSection,
    pub model: ModelConfig,
    pub k_keyframes: usize,
    pub instruction_len: usize,
    pub train: TrainSection,
    pub decode: DecodeConfig,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_raw(&RawConfig::new()).expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<RunConfig> {
        let env = GridConfig {
            width: get(raw, "env", "width", 6)?,
            height: get(raw, "env", "height", 6)?,
            n_objects: get(raw, "env", "n_objects", 1)?,
        };
        env.validate()?;
        let data = DataSection {
            train_episodes: get(raw, "data", "train_episodes", 192)?,
            train_noisy_episodes: get(raw, "data", "train_noisy_episodes", 96)?,
            train_noisy_epsilons: get_list(
                raw,
                "data",
                "train_noisy_epsilons",
                &[0.4, 0.65, 0.9],
            )?,
            val_episodes: get(raw, "data", "val_episodes", 16)?,
            test_episodes: get(raw, "data", "test_episodes", 24)?,
            fail_episodes: get(raw, "data", "fail_episodes", 48)?,
            fail_epsilon: get(raw, "data", "fail_epsilon", 0.85)?,
            chunk_size: get(raw, "data", "chunk_size", 2)?,
            max_steps: get(raw, "data", "max_steps", crate::env::expert_step_budget(&env))?,
            seed: get(raw, "data", "seed", 1)?,
        };
        if data.train_noisy_episodes > 0 && data.train_noisy_epsilons.is_empty() {
            return Err(Error::Config(
                "[data] train_noisy_epsilons must be non-empty when \
                 train_noisy_episodes > 0"
                    .into(),
            ));
        }
        if let Some(e) = data
            .train_noisy_epsilons
            .iter()
            .find(|e| !(0.0..=1.0).contains(*e))
        {
            return Err(Error::Config(format!(
                "[data] train_noisy_epsilons entry {e} outside [0, 1]"
            )));
        }
        if !crate::env::CHUNK_SIZE_RANGE.contains(&data.chunk_size) {
            return Err(Error::Config(format!(
                "[data] chunk_size {} outside {:?}",
                data.chunk_size,
                crate::env::CHUNK_SIZE_RANGE
            )));
        }
        let k_keyframes = get(raw, "model", "k_keyframes", 2)?;
        let instruction_len = get(raw, "model", "instruction_len", 5)?;
        let layout = SequenceLayout::new(LayoutConfig {
            width: env.width,
            height: env.height,
            k_keyframes,
            chunk_size: data.chunk_size,
            instruction_len,
        });
        let model = ModelConfig {
            vocab_size: Vocabulary::default().size(),
            max_seq_len: layout.total_len,
            dim: get(raw, "model", "dim", 32)?,
            layers: get(raw, "model", "layers", 2)?,
            heads: get(raw, "model", "heads", 4)?,
            ff_mult: get(raw, "model", "ff_mult", 2)?,
            n_segments: N_SEGMENT_KINDS,
            init_scale: get(raw, "model", "init_scale", 0.4)?,
            seed: get(raw, "model", "seed", 0)?,
        };
        model.validate()?;
        let train = TrainSection {
            steps: get(raw, "train", "steps", 1500)?,
            batch_size: get(raw, "train", "batch_size", 16)?,
            learning_rate: get(raw, "train", "learning_rate", 1e-3)?,
            lr_decay: get(raw, "train", "lr_decay", 0.999)?,
            weight_decay: get(raw, "train", "weight_decay", 0.0)?,
            seed: get(raw, "train", "seed", 2)?,
            log_every: get(raw, "train", "log_every", 10)?,
            checkpoint_every: get(raw, "train", "checkpoint_every", 500)?,
            weights: LossWeights {
                visual: get(raw, "train", "w_visual", 1.0)?,
                score: get(raw, "train", "w_score", 4.0)?,
                change: get(raw, "train", "w_change", 1.0)?,
            },
            history_dropout: get(raw, "train", "history_dropout", 0.1)?,
        };
        if !(train.lr_decay > 0.0 && train.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "[train] lr_decay {} outside (0, 1]",
                train.lr_decay
            )));
        }
        if !(0.0..=1.0).contains(&train.history_dropout) {
            return Err(Error::Config(format!(
                "[train] history_dropout {} outside [0, 1]",
                train.history_dropout
            )));
        }
        let decode = DecodeConfig {
            steps: get(raw, "decode", "steps", 16)?,
            temperature: get(raw, "decode", "temperature", 0.0)?,
            seed: get(raw, "decode", "seed", 3)?,
        };
        let eval = EvalSection {
            episodes: get(raw, "eval", "episodes", 16)?,
            seed: get(raw, "eval", "seed", 4)?,
            max_chunks: get(raw, "eval", "max_chunks", 24)?,
            roundtrip_episodes: get(raw, "eval", "roundtrip_episodes", 4)?,
            horizons: get_list(raw, "eval", "horizons", &[5, 10, 15, 20])?,
            swap_probs: get_list(raw, "eval", "swap_probs", &[0.0, 0.25, 0.5, 0.75, 1.0])?,
            mix_weights: get_list(raw, "eval", "mix_weights", &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])?,
            embed_seed: get(raw, "eval", "embed_seed", 0)?,
        };
        for &p in &eval.swap_probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("[eval] swap prob {p} outside [0, 1]")));
            }
        }
        let io = IoSection {
            out_dir: PathBuf::from(get(raw, "io", "out_dir", "out".to_string())?),
            data_dir: PathBuf::from(get(raw, "io", "data_dir", "out/data".to_string())?),
            checkpoint: PathBuf::from(get(raw, "io", "checkpoint", "out/model.ckpt".to_string())?),
        };
        Ok(RunConfig {
            env,
            data,
            model,
            k_keyframes,
            instruction_len,
            train,
            decode,
            eval,
            io,
        })
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        RunConfig::from_raw(&parse_ini(text)?)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout::new(LayoutConfig {
            width: self.env.width,
            height: self.env.height,
            k_keyframes: self.k_keyframes,
            chunk_size: self.data.chunk_size,
            instruction_len: self.instruction_len,
        })
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            ..OptimizerConfig::default()
        }
    }

    /// Stable content hash of the fully-resolved configuration. The `[io]`
    /// paths are excluded: moving artifacts does not change the experiment.
    pub fn hash(&self) -> String {
        use sha2::Digest;
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("io");
        }
        let canonical = serde_json::to_vec(&value).expect("config serializes");
        let digest = sha2::Sha256::digest(&canonical);
        format!("{digest:x}")[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let c = RunConfig::from_text("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.env.width, 6);
        assert_eq!(c.data.chunk_size, 2);
        assert_eq!(c.decode.steps, 16);
        assert_eq!(c.train.weights.score, 4.0);
    }

    #[test]
    fn sections_comments_and_lists_parse() {
        let text = "\
# top comment
[env]
width = 8   ; inline comment
height = 8

[eval]
horizons = 2, 4, 6
swap_probs = 0, 1
";
        let c = RunConfig::from_text(text).unwrap();
        assert_eq!(c.env.width, 8);
        assert_eq!(c.env.height, 8);
        assert_eq!(c.eval.horizons, vec![2, 4, 6]);
        assert_eq!(c.eval.swap_probs, vec![0.0, 1.0]);
    }

    #[test]
    fn model_sequence_length_tracks_the_layout() {
        let c = RunConfig::from_text("[env]\nwidth = 8\nheight = 8\n").unwrap();
        assert_eq!(c.model.max_seq_len, c.layout().total_len);
    }

    #[test]
    fn malformed_lines_and_values_are_errors() {
        assert!(RunConfig::from_text("[env]\nwidth\n").is_err());
        assert!(RunConfig::from_text("[env]\nwidth = abc\n").is_err());
        assert!(RunConfig::from_text("[data]\nchunk_size = 77\n").is_err());
        assert!(RunConfig::from_text("[eval]\nswap_probs = 2.0\n").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default().hash();
        let b = RunConfig::default().hash();
        assert_eq!(a, b);
        let c = RunConfig::from_text("[train]\nsteps = 7\n").unwrap().hash();
        assert_ne!(a, c);
    }
}
