//! Paired SGD vs adaptive-moment runs on the same world.

use serde::{Deserialize, Serialize};

use super::train::{train, Baseline, RolloutSource};
use super::world::build_world;
use super::{CheckpointSpec, OptimizerConfig, SimConfig, SimError};
use crate::numeric::{median, quantile_sorted};
use crate::trace::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeArm {
    pub optimizer: OptimizerConfig,
    pub planted_median_reduction: Option<f64>,
    pub rare_high_kl_median_reduction: Option<f64>,
    pub final_mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub seed: u64,
    pub planted: Vec<TokenId>,
    /// Non-planted tokens grammatical in few rows (bottom quartile) whose
    /// initial KL is above the non-planted median.
    pub rare_high_kl: Vec<TokenId>,
    pub arms: Vec<ProbeArm>,
}

fn reduction(pre: f64, post: f64) -> Option<f64> {
    (pre > 0.0).then(|| (pre - post) / pre)
}

/// Trains one world per optimizer from identical initial tables and seeds and
/// reports each group's median relative per-token KL reduction.
pub fn optimizer_suppression_probe(base: &SimConfig, optimizers: &[OptimizerConfig]) -> Result<ProbeReport, SimError> {
    let mut cfg = base.clone();
    cfg.checkpoints = vec![CheckpointSpec::new("pre", 0.0), CheckpointSpec::new("post", 1.0)];
    let world = build_world(&cfg)?;
    let planted: Vec<TokenId> = cfg.planted_rock_tokens.clone();
    let pre = world.per_token_kl(&world.student);
    let mut rows_per_token = vec![0usize; world.vocab_size];
    for g in &world.grammar {
        for &t in g {
            rows_per_token[t as usize] += 1;
        }
    }
    let others: Vec<(TokenId, f64)> = pre.iter().filter(|(t, _)| !planted.contains(t)).copied().collect();
    let mut freqs: Vec<f64> = others.iter().map(|(t, _)| rows_per_token[*t as usize] as f64).collect();
    freqs.sort_by(f64::total_cmp);
    let f_cut = quantile_sorted(&freqs, 0.25).unwrap_or(0.0);
    let kl_med = median(&others.iter().map(|o| o.1).collect::<Vec<_>>()).unwrap_or(0.0);
    let rare_high_kl: Vec<TokenId> = others
        .iter()
        .filter(|(t, kl)| rows_per_token[*t as usize] as f64 <= f_cut && *kl > kl_med)
        .map(|o| o.0)
        .collect();

    let mut arms = Vec::with_capacity(optimizers.len());
    for opt in optimizers {
        let mut c = cfg.clone();
        c.optimizer = opt.clone();
        let mut w = build_world(&c)?;
        let out = train(&mut w, RolloutSource::Online, &Baseline)?;
        let post = &out.log.checkpoints[1].per_token;
        let group = |set: &[TokenId]| -> Option<f64> {
            let r: Vec<f64> = pre
                .iter()
                .zip(post)
                .filter(|((t, _), _)| set.contains(t))
                .filter_map(|((_, a), (_, b))| reduction(*a, *b))
                .collect();
            median(&r)
        };
        arms.push(ProbeArm {
            optimizer: opt.clone(),
            planted_median_reduction: group(&planted),
            rare_high_kl_median_reduction: group(&rare_high_kl),
            final_mean_kl: out.log.steps.last().map_or(0.0, |s| s.mean_kl),
        });
    }
    Ok(ProbeReport {
        seed: cfg.seed,
        planted,
        rare_high_kl,
        arms,
    })
}
