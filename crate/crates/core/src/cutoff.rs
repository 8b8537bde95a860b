//! Rock-set cutoff selection: top-K stability under trajectory subsampling
//! against cumulative rock-score coverage.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{aggregate_subset, select_rock_tokens, DetectError, DetectionConfig, TokenAggregate};
use crate::rng::substream;
use crate::stats::jaccard;
use crate::trace::{Corpus, TokenId};

#[derive(Debug, Error)]
pub enum CutoffError {
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error("total rock score is zero")]
    Degenerate,
    #[error("csv export failed: {0}")]
    Export(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankBasis {
    /// Stage-1 R(v).
    #[default]
    RockScore,
    /// Context-aware R_ctx(v); reruns full detection per subsample.
    RockScoreCtx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    #[serde(default)]
    pub basis: RankBasis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub sizes: Vec<usize>,
    pub ks: Vec<usize>,
    /// `jaccard_matrix[i][j]`: mean Jaccard at size `sizes[i]` and cutoff `ks[j]`.
    pub jaccard_matrix: Vec<Vec<f64>>,
    pub coverage_curve: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    pub basis: RankBasis,
}

impl SweepResult {
    /// Jaccard at each K averaged over sizes.
    pub fn mean_jaccard(&self) -> Vec<f64> {
        (0..self.ks.len())
            .map(|j| self.jaccard_matrix.iter().map(|row| row[j]).sum::<f64>() / self.sizes.len().max(1) as f64)
            .collect()
    }

    pub fn write_jaccard_csv(&self, path: &Path) -> Result<(), CutoffError> {
        let mut text = String::from("n");
        for k in &self.ks {
            text.push_str(&format!(",k{k}"));
        }
        text.push('\n');
        for (n, row) in self.sizes.iter().zip(&self.jaccard_matrix) {
            text.push_str(&n.to_string());
            for v in row {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| CutoffError::Export(e.to_string()))
    }

    pub fn write_coverage_csv(&self, path: &Path) -> Result<(), CutoffError> {
        let mut text = String::from("k,coverage,mean_jaccard\n");
        for ((k, c), j) in self.ks.iter().zip(&self.coverage_curve).zip(self.mean_jaccard()) {
            text.push_str(&format!("{k},{c},{j}\n"));
        }
        std::fs::write(path, text).map_err(|e| CutoffError::Export(e.to_string()))
    }
}

fn ranked_ids(aggs: &[TokenAggregate], key: impl Fn(&TokenAggregate) -> f64) -> Vec<TokenId> {
    let mut v: Vec<(f64, TokenId)> = aggs.iter().map(|a| (key(a), a.token_id)).collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    v.into_iter().map(|e| e.1).collect()
}

/// Share of the total rock score captured by the top K tokens, for each K.
pub fn coverage_curve(aggregates: &[TokenAggregate], ks: &[usize]) -> Result<Vec<f64>, CutoffError> {
    let mut scores: Vec<(f64, TokenId)> = aggregates.iter().map(|a| (a.rock_score, a.token_id)).collect();
    scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut prefix = Vec::with_capacity(scores.len() + 1);
    let mut acc = 0.0;
    prefix.push(0.0);
    for (s, _) in &scores {
        acc += s;
        prefix.push(acc);
    }
    if acc <= 0.0 {
        return Err(CutoffError::Degenerate);
    }
    Ok(ks.iter().map(|&k| prefix[k.min(scores.len())] / acc).collect())
}

fn ranking_for(
    corpus: &Corpus,
    indices: &[usize],
    config: &DetectionConfig,
    basis: RankBasis,
) -> Result<Vec<TokenId>, CutoffError> {
    match basis {
        RankBasis::RockScore => {
            let aggs = aggregate_subset(corpus, indices, &config.pre, &config.post)?;
            Ok(ranked_ids(&aggs, |a| a.rock_score))
        }
        RankBasis::RockScoreCtx => {
            let sub = corpus.subset(indices);
            Ok(select_rock_tokens(&sub, config)?.ranking())
        }
    }
}

fn top_k(ranking: &[TokenId], k: usize) -> HashSet<TokenId> {
    ranking.iter().take(k).copied().collect()
}

/// Mean Jaccard of subsample top-K sets against the full-corpus top-K.
pub fn stability_sweep(corpus: &Corpus, config: &DetectionConfig, sweep: &SweepConfig) -> Result<SweepResult, CutoffError> {
    let total = corpus.trajectories.len();
    if sweep.ks.is_empty() {
        return Err(CutoffError::Config("ks is empty".into()));
    }
    if sweep.repeats == 0 {
        return Err(CutoffError::Config("repeats must be at least 1".into()));
    }
    if let Some(&n) = sweep.sizes.iter().find(|&&n| n > total || n == 0) {
        return Err(CutoffError::Config(format!(
            "subsample size {n} outside 1..={total}"
        )));
    }
    let all: Vec<usize> = (0..total).collect();
    let full = ranking_for(corpus, &all, config, sweep.basis)?;
    let aggs = aggregate_subset(corpus, &all, &config.pre, &config.post)?;
    let coverage = coverage_curve(&aggs, &sweep.ks)?;

    let cells: Vec<(usize, usize)> = (0..sweep.sizes.len())
        .flat_map(|i| (0..sweep.repeats).map(move |r| (i, r)))
        .collect();
    let per_cell: Vec<Vec<f64>> = cells
        .par_iter()
        .map(|&(i, r)| {
            let n = sweep.sizes[i];
            let mut rng = substream(sweep.seed, (i * sweep.repeats + r) as u64);
            let mut idx = sample(&mut rng, total, n).into_vec();
            idx.sort_unstable();
            let ranking = ranking_for(corpus, &idx, config, sweep.basis)?;
            Ok(sweep
                .ks
                .iter()
                .map(|&k| jaccard(&top_k(&ranking, k), &top_k(&full, k)))
                .collect())
        })
        .collect::<Result<_, CutoffError>>()?;

    let mut jaccard_matrix = vec![vec![0.0; sweep.ks.len()]; sweep.sizes.len()];
    for (&(i, _), row) in cells.iter().zip(&per_cell) {
        for (j, v) in row.iter().enumerate() {
            jaccard_matrix[i][j] += v;
        }
    }
    for row in &mut jaccard_matrix {
        for v in row.iter_mut() {
            *v /= sweep.repeats as f64;
        }
    }
    Ok(SweepResult {
        sizes: sweep.sizes.clone(),
        ks: sweep.ks.clone(),
        jaccard_matrix,
        coverage_curve: coverage,
        repeats: sweep.repeats,
        seed: sweep.seed,
        basis: sweep.basis,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KChoice {
    pub k: usize,
    pub mean_jaccard: f64,
    pub coverage: f64,
    pub min_jaccard: f64,
    pub min_coverage: f64,
    /// True when no K met both floors and the scalarized fallback was used.
    pub fallback: bool,
}

/// Largest K meeting both floors; otherwise the K maximizing the mean of
/// min-max normalized Jaccard and coverage (smaller K on ties).
pub fn choose_k(sweep: &SweepResult, min_jaccard: f64, min_coverage: f64) -> Result<KChoice, CutoffError> {
    if sweep.ks.is_empty() {
        return Err(CutoffError::Config("ks is empty".into()));
    }
    let mj = sweep.mean_jaccard();
    let cov = &sweep.coverage_curve;
    let pick = |j: usize, fallback: bool| KChoice {
        k: sweep.ks[j],
        mean_jaccard: mj[j],
        coverage: cov[j],
        min_jaccard,
        min_coverage,
        fallback,
    };
    let feasible = (0..sweep.ks.len())
        .filter(|&j| mj[j] >= min_jaccard && cov[j] >= min_coverage)
        .max_by_key(|&j| sweep.ks[j]);
    if let Some(j) = feasible {
        return Ok(pick(j, false));
    }
    let norm = |v: &[f64]| -> Vec<f64> {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        v.iter()
            .map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 1.0 })
            .collect()
    };
    let (nj, nc) = (norm(&mj), norm(cov));
    let mut order: Vec<usize> = (0..sweep.ks.len()).collect();
    order.sort_by_key(|&j| sweep.ks[j]);
    let mut best = order[0];
    for &j in &order[1..] {
        if (nj[j] + nc[j]) / 2.0 > (nj[best] + nc[best]) / 2.0 {
            best = j;
        }
    }
    Ok(pick(best, true))
}
