//! Protocol dispatch: load the checkpoint (or the simulator-backed oracle),
//! run the named evaluation, and emit CSV + aggregate JSON (+ optional SVG).

use std::path::PathBuf;
use std::sync::Arc;

use serde_json::json;

use crate::config::RunConfig;
use crate::diffusion::Prediction;
use crate::env::{ActionChunk, Observation, PolicySpec};
use crate::metrics::{correlation_study, FrameDistance};
use crate::nn::{load_checkpoint_verified, Float, Model};
use crate::rollout::{
    controllability_eval, roundtrip_eval, shuffle_eval, LearnedWorldModel, OracleWorldModel,
    RolloutSettings, WorldModel,
};
use crate::tokens::{KeyframeMemory, Vocabulary};
use crate::{Error, Result};

use super::gen_data::load_split;
use super::svg::{line_chart, scatter_chart, Series};
use super::write_atomic;

pub const PROTOCOLS: [&str; 5] =
    ["controllability", "roundtrip", "shuffle", "corruption", "correlation"];

/// Either the trained network or the ground-truth simulator stand-in.
enum AnyWorld<'a> {
    Learned(LearnedWorldModel<'a>),
    Oracle(OracleWorldModel),
}

impl WorldModel for AnyWorld<'_> {
    fn predict(
        &self,
        task_seed: u64,
        memory: &KeyframeMemory,
        instruction: &str,
        current: &Observation,
        chunk: &ActionChunk,
    ) -> Result<Prediction> {
        match self {
            AnyWorld::Learned(w) => w.predict(task_seed, memory, instruction, current, chunk),
            AnyWorld::Oracle(w) => w.predict(task_seed, memory, instruction, current, chunk),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalArtifacts {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub svg: Option<PathBuf>,
    /// Aggregate record, also written to `json`.
    pub aggregate: serde_json::Value,
}

fn settings(cfg: &RunConfig) -> RolloutSettings {
    RolloutSettings {
        k_keyframes: cfg.k_keyframes,
        stride: cfg.data.chunk_size,
        max_chunks: cfg.eval.max_chunks,
    }
}

/// Run one protocol and write its artifacts into `out_dir`.
pub fn cmd_eval(
    cfg: &RunConfig,
    protocol: &str,
    emit_svg: bool,
    use_oracle: bool,
) -> Result<EvalArtifacts> {
    let vocab = Vocabulary::default();
    let layout = Arc::new(cfg.layout());
    let loaded: Option<(Model<Float>, _)> = if use_oracle {
        None
    } else {
        Some(load_checkpoint_verified(&cfg.io.checkpoint, &vocab.hash())?)
    };
    let world = match &loaded {
        Some((model, _)) => AnyWorld::Learned(LearnedWorldModel {
            model,
            vocab: &vocab,
            layout: Arc::clone(&layout),
            decode: cfg.decode.clone(),
        }),
        None => AnyWorld::Oracle(OracleWorldModel { config: cfg.env.clone() }),
    };
    let s = settings(cfg);
    let base = FrameDistance::EmbeddedL2 { seed: cfg.eval.embed_seed };
    let hash = cfg.hash();
    let header = format!("# config={hash}\n");

    let (csv_body, aggregate, svg_body) = match protocol {
        "controllability" => {
            let succ = load_split(cfg, "test")?;
            let fail = load_split(cfg, "fail")?;
            let (rs, rf) = controllability_eval(&world, &vocab, &s, &base, &succ, &fail)?;
            let mut csv = String::from("subset,frame_mismatch,delta_dist,n_transitions\n");
            csv.push_str(&format!(
                "succ,{:.6},{:.6},{}\nfail,{:.6},{:.6},{}\n",
                rs.frame_mismatch, rs.delta, rs.n_transitions, rf.frame_mismatch, rf.delta,
                rf.n_transitions
            ));
            let ratio = if rs.delta > 0.0 { rf.delta / rs.delta } else { f64::NAN };
            let agg = json!({
                "config_hash": hash,
                "protocol": protocol,
                "succ": {"frame_mismatch": rs.frame_mismatch, "delta_dist": rs.delta, "n": rs.n_transitions},
                "fail": {"frame_mismatch": rf.frame_mismatch, "delta_dist": rf.delta, "n": rf.n_transitions},
                "fail_over_succ_delta": ratio,
            });
            (csv, agg, None)
        }
        "roundtrip" => {
            let rows = roundtrip_eval(
                &world,
                &vocab,
                &s,
                &base,
                &cfg.env,
                &cfg.eval.horizons,
                cfg.eval.roundtrip_episodes,
                cfg.eval.seed,
            )?;
            let mut csv = String::from("h,full,no_memory\n");
            for r in &rows {
                csv.push_str(&format!("{},{:.6},{:.6}\n", r.h, r.full, r.no_memory));
            }
            let agg = json!({
                "config_hash": hash,
                "protocol": protocol,
                "rows": rows,
                "n_episodes": cfg.eval.roundtrip_episodes,
            });
            let svg = line_chart(
                "round-trip drift",
                "horizon H (chunks)",
                "frame distance",
                &[
                    Series {
                        label: "full".into(),
                        points: rows.iter().map(|r| (r.h as f64, r.full)).collect(),
                    },
                    Series {
                        label: "no memory".into(),
                        points: rows.iter().map(|r| (r.h as f64, r.no_memory)).collect(),
                    },
                ],
                &hash,
            );
            (csv, agg, Some(svg))
        }
        "shuffle" => {
            let test = load_split(cfg, "test")?;
            let (aligned, corrupted) =
                shuffle_eval(&world, &vocab, &s, &base, &test, 1.0, cfg.eval.seed)?;
            let csv = format!(
                "condition,delta_dist\naligned,{aligned:.6}\ncorrupted,{corrupted:.6}\n"
            );
            let agg = json!({
                "config_hash": hash,
                "protocol": protocol,
                "aligned": aligned,
                "corrupted": corrupted,
            });
            (csv, agg, None)
        }
        "corruption" => {
            let test = load_split(cfg, "test")?;
            let mut rows = Vec::new();
            for &p in &cfg.eval.swap_probs {
                let (aligned, corrupted) =
                    shuffle_eval(&world, &vocab, &s, &base, &test, p, cfg.eval.seed)?;
                rows.push((p, aligned, corrupted));
            }
            let mut csv = String::from("p,aligned,corrupted\n");
            for (p, a, c) in &rows {
                csv.push_str(&format!("{p},{a:.6},{c:.6}\n"));
            }
            let agg = json!({
                "config_hash": hash,
                "protocol": protocol,
                "sweep": rows.iter().map(|(p, a, c)| json!({"p": p, "aligned": a, "corrupted": c})).collect::<Vec<_>>(),
            });
            let svg = line_chart(
                "action corruption sweep",
                "swap probability p",
                "delta distance",
                &[Series {
                    label: "corrupted".into(),
                    points: rows.iter().map(|&(p, _, c)| (p, c)).collect(),
                }],
                &hash,
            );
            (csv, agg, Some(svg))
        }
        "correlation" => {
            let policies: Vec<(String, PolicySpec)> = cfg
                .eval
                .mix_weights
                .iter()
                .map(|&w| (format!("mix{w:.2}"), PolicySpec::mixture(w)))
                .collect();
            let report = correlation_study(
                &world,
                &cfg.env,
                &policies,
                cfg.eval.episodes,
                cfg.eval.seed,
                &s,
            )?;
            let mut csv = String::from("policy_id,real_rate,imagined_rate\n");
            for p in &report.pairs {
                csv.push_str(&format!(
                    "{},{:.6},{:.6}\n",
                    p.policy_id, p.real_rate, p.imagined_rate
                ));
            }
            let agg = json!({
                "config_hash": hash,
                "pearson_r": report.pearson_r,
                "mmrv": report.mmrv,
                "n_policies": report.n_policies,
                "n_episodes": report.n_episodes,
            });
            let svg = scatter_chart(
                "policy ranking",
                "real success rate",
                "imagined success rate",
                &report
                    .pairs
                    .iter()
                    .map(|p| (p.policy_id.clone(), p.real_rate, p.imagined_rate))
                    .collect::<Vec<_>>(),
                &hash,
            );
            (csv, agg, Some(svg))
        }
        other => {
            return Err(Error::Config(format!(
                "unknown protocol {other:?}; expected one of {PROTOCOLS:?}"
            )))
        }
    };

    let csv_path = cfg.io.out_dir.join(format!("{protocol}.csv"));
    write_atomic(&csv_path, format!("{header}{csv_body}").as_bytes())?;
    let json_path = cfg.io.out_dir.join(format!("{protocol}.json"));
    let mut json_bytes = serde_json::to_vec_pretty(&aggregate)?;
    json_bytes.push(b'\n');
    write_atomic(&json_path, &json_bytes)?;
    let svg_path = match (emit_svg, svg_body) {
        (true, Some(body)) => {
            let p = cfg.io.out_dir.join(format!("{protocol}.svg"));
            write_atomic(&p, body.as_bytes())?;
            Some(p)
        }
        _ => None,
    };
    Ok(EvalArtifacts { csv: csv_path, json: json_path, svg: svg_path, aggregate })
}
