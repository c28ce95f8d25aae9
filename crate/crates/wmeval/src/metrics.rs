//! Quantitative evaluation: frame distance, transition-fidelity Δ-distance
//! over RMS-normalized difference representations, Pearson correlation,
//! MMRV rank violation, and a frame-level success judge.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{parse_observation, Cell, GridConfig, Observation, PolicySpec, PALETTE};
use crate::rollout::{imagined_success_rate, RolloutSettings, WorldModel};
use crate::{Error, Result};

pub const EMBED_DIM: usize = 8;

/// Pluggable per-frame base distance: exact cell mismatch rate, or L2 over a
/// fixed seeded random linear map from cell codes to `EMBED_DIM` features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FrameDistance {
    MismatchRate,
    EmbeddedL2 { seed: u64 },
}

impl Default for FrameDistance {
    fn default() -> Self {
        FrameDistance::EmbeddedL2 { seed: 0 }
    }
}

/// Per-code feature table for `EmbeddedL2`; `MismatchRate` uses one-hot.
fn code_features(base: &FrameDistance) -> Vec<Vec<f64>> {
    match base {
        FrameDistance::MismatchRate => (0..PALETTE as usize)
            .map(|c| {
                let mut f = vec![0.0; PALETTE as usize];
                f[c] = 1.0;
                f
            })
            .collect(),
        FrameDistance::EmbeddedL2 { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..PALETTE as usize)
                .map(|_| {
                    (0..EMBED_DIM)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect()
                })
                .collect()
        }
    }
}

fn check_same_shape(a: &Observation, b: &Observation) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Config(format!(
            "frame shape mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Per-cell feature rows of one frame.
fn featurize(obs: &Observation, table: &[Vec<f64>]) -> Vec<Vec<f64>> {
    obs.cells
        .iter()
        .map(|&c| table[c as usize].clone())
        .collect()
}

/// Flattened RMS over all components; zero vectors stay zero.
fn rms_normalize(rows: &mut [Vec<f64>]) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in rows.iter() {
        for &x in row {
            sum += x * x;
            n += 1;
        }
    }
    let rms = (sum / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        for row in rows.iter_mut() {
            for x in row.iter_mut() {
                *x /= rms;
            }
        }
    }
}

fn cell_rows_distance(base: &FrameDistance, u: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
    let n = u.len();
    match base {
        FrameDistance::MismatchRate => {
            let mismatched = u.iter().zip(v).filter(|(a, b)| a != b).count();
            mismatched as f64 / n as f64
        }
        FrameDistance::EmbeddedL2 { .. } => {
            let mut total = 0.0;
            for (a, b) in u.iter().zip(v) {
                let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                total += sq.sqrt();
            }
            total / n as f64
        }
    }
}

/// Plain frame distance (no differencing): mismatch fraction or mean
/// per-cell feature L2.
pub fn frame_dist(base: &FrameDistance, a: &Observation, b: &Observation) -> Result<f64> {
    check_same_shape(a, b)?;
    match base {
        FrameDistance::MismatchRate => {
            let n = a.cells.len();
            let m = a.cells.iter().zip(&b.cells).filter(|(x, y)| x != y).count();
            Ok(m as f64 / n as f64)
        }
        FrameDistance::EmbeddedL2 { .. } => {
            let table = code_features(base);
            Ok(cell_rows_distance(
                base,
                &featurize(a, &table),
                &featurize(b, &table),
            ))
        }
    }
}

/// Transition-fidelity distance between two aligned frame sequences: for
/// each consecutive pair, featurize, difference, RMS-normalize each
/// difference, then average the base distance between the normalized
/// differences.
pub fn delta_dist(
    base: &FrameDistance,
    pred: &[Observation],
    truth: &[Observation],
) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Config(format!(
            "sequence length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Config(
            "delta distance needs at least two frames".into(),
        ));
    }
    let table = code_features(base);
    let mut total = 0.0;
    for t in 0..pred.len() - 1 {
        check_same_shape(&pred[t], &truth[t])?;
        check_same_shape(&pred[t], &pred[t + 1])?;
        check_same_shape(&truth[t], &truth[t + 1])?;
        let diff = |next: &Observation, cur: &Observation| -> Vec<Vec<f64>> {
            let fa = featurize(next, &table);
            let fb = featurize(cur, &table);
            fa.iter()
                .zip(&fb)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect()
        };
        let mut dp = diff(&pred[t + 1], &pred[t]);
        let mut dt = diff(&truth[t + 1], &truth[t]);
        rms_normalize(&mut dp);
        rms_normalize(&mut dt);
        total += cell_rows_distance(base, &dp, &dt);
    }
    Ok(total / (pred.len() - 1) as f64)
}

/// Standard product-moment correlation. Zero variance in either argument is
/// signaled explicitly rather than returning NaN.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Config(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Config("correlation needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Config("zero variance: correlation undefined".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Mean (over i) of the maximum pairwise rank-violation magnitude:
/// `violation(i, j) = |R_i - R_j|` when the strict orderings of S and R
/// disagree, ties in either vector producing no violation.
pub fn mmrv(real: &[f64], imagined: &[f64]) -> Result<f64> {
    if real.len() != imagined.len() {
        return Err(Error::Config(format!(
            "length mismatch: {} vs {}",
            real.len(),
            imagined.len()
        )));
    }
    if real.len() < 2 {
        return Err(Error::Config("rank violation needs at least two points".into()));
    }
    let n = real.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut worst = 0.0f64;
        for j in 0..n {
            let dr = real[i] - real[j];
            let ds = imagined[i] - imagined[j];
            let disagree = (dr > 0.0 && ds < 0.0) || (dr < 0.0 && ds > 0.0);
            if disagree {
                worst = worst.max(dr.abs());
            }
        }
        total += worst;
    }
    Ok(total / n as f64)
}

/// Judge success from pixels alone: parse the frame back to a symbolic
/// state and apply the success predicate. Unparseable frames are failures.
pub fn frame_success_judge(obs: &Observation, goal: (usize, Cell), n_objects: usize) -> bool {
    match parse_observation(obs, goal, n_objects) {
        Some(state) => crate::env::is_success(&state),
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPoint {
    pub policy_id: String,
    pub real_rate: f64,
    pub imagined_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pairs: Vec<PolicyPoint>,
    pub pearson_r: f64,
    pub mmrv: f64,
    pub n_policies: usize,
    pub n_episodes: usize,
}

/// Real success rate of a policy over seeded simulator episodes, using the
/// same seed derivation as the imagined counterpart.
pub fn real_success_rate(
    config: &GridConfig,
    policy: &PolicySpec,
    n_episodes: usize,
    seed: u64,
    settings: &RolloutSettings,
) -> Result<f64> {
    let max_steps = settings.max_chunks * settings.stride;
    let trajectories = crate::env::collect_trajectories(
        config,
        policy,
        n_episodes,
        settings.stride,
        max_steps,
        seed,
    )?;
    let succ = trajectories.iter().filter(|t| t.success).count();
    Ok(succ as f64 / n_episodes.max(1) as f64)
}

/// Compare real against imagined success rates across a policy family and
/// summarize with Pearson r and MMRV. Seeds are shared between the real and
/// imagined arms so the two estimates cover identical tasks.
pub fn correlation_study<W: WorldModel>(
    world: &W,
    config: &GridConfig,
    policies: &[(String, PolicySpec)],
    n_episodes: usize,
    seed: u64,
    settings: &RolloutSettings,
) -> Result<CorrelationReport> {
    if policies.len() < 2 {
        return Err(Error::Config("correlation study needs at least two policies".into()));
    }
    use rayon::prelude::*;
    let pairs: Vec<PolicyPoint> = policies
        .par_iter()
        .map(|(id, spec)| -> Result<PolicyPoint> {
            let real = real_success_rate(config, spec, n_episodes, seed, settings)?;
            let imagined = imagined_success_rate(world, config, spec, n_episodes, seed, settings)?;
            Ok(PolicyPoint { policy_id: id.clone(), real_rate: real, imagined_rate: imagined })
        })
        .collect::<Result<Vec<_>>>()?;
    let real: Vec<f64> = pairs.iter().map(|p| p.real_rate).collect();
    let imagined: Vec<f64> = pairs.iter().map(|p| p.imagined_rate).collect();
    Ok(CorrelationReport {
        pearson_r: pearson(&real, &imagined)?,
        mmrv: mmrv(&real, &imagined)?,
        n_policies: policies.len(),
        n_episodes,
        pairs,
    })
}
