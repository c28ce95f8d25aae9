//! Policy evaluation by imagination: estimate each policy's success rate
//! from closed-loop rollouts inside the world model, compare against the
//! real simulator success rate, and score the agreement with Pearson r and
//! MMRV (maximum mean rank violation: how badly imagined scores misorder
//! policies, weighted by the real-rate gap).
//!
//! Run with: cargo run --example policy_ranking

use wmeval::env::{GridConfig, PolicySpec};
use wmeval::metrics::correlation_study;
use wmeval::rollout::{OracleWorldModel, RolloutSettings};

fn main() -> wmeval::Result<()> {
    let config = GridConfig { width: 6, height: 6, n_objects: 1 };
    let world = OracleWorldModel { config: config.clone() };
    let settings = RolloutSettings { k_keyframes: 2, stride: 2, max_chunks: 24 };

    // Expert/random mixtures spanning near-0 to near-1 real success.
    let policies: Vec<(String, PolicySpec)> = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
        .iter()
        .map(|&w| (format!("mix{w:.2}"), PolicySpec::mixture(w)))
        .collect();

    let report = correlation_study(&world, &config, &policies, 16, 500, &settings)?;

    println!("{:>8}  {:>10}  {:>10}", "policy", "real", "imagined");
    for p in &report.pairs {
        println!("{:>8}  {:>10.3}  {:>10.3}", p.policy_id, p.real_rate, p.imagined_rate);
    }
    println!(
        "\npearson r = {:.4}   mmrv = {:.4}   ({} policies x {} episodes)",
        report.pearson_r, report.mmrv, report.n_policies, report.n_episodes
    );
    Ok(())
}
