//! Logit-space gradient geometry of the per-token reverse KL and the
//! persistence of per-token KL across checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{aggregate_scores, freq_matched_controls, id_order, DetectError, DetectionReport, TokenAggregate};
use crate::numeric::{dot, median, norm, pairwise_vec_sum, quantile_sorted};
use crate::stats::{mann_whitney, wilcoxon_signed_rank, RankTest, SignedRankTest, StatsError};
use crate::trace::{Corpus, TokenId, TraceError, TruncatedDist};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("group {0:?} is empty")]
    EmptyGroup(Group),
    #[error("csv export failed: {0}")]
    Export(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Rock,
    RareHighKl,
    RandomControl,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Rock, Group::RareHighKl, Group::RandomControl];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Rock => "rock",
            Group::RareHighKl => "rare_high_kl",
            Group::RandomControl => "random_control",
        }
    }
}

fn floored(v: &[f64]) -> Vec<f64> {
    let f: Vec<f64> = v.iter().map(|x| x.max(PROB_FLOOR)).collect();
    let s: f64 = f.iter().sum();
    f.into_iter().map(|x| x / s).collect()
}

/// Gradient of KL(p‖q) with respect to the logits of p:
/// `g_k = p_k·[(ln p_k − ln q_k) − KL]`.
pub fn reverse_kl_logit_gradient(p: &[f64], q: &[f64]) -> Result<Vec<f64>, GradError> {
    if p.len() != q.len() {
        return Err(GradError::Dimension(p.len(), q.len()));
    }
    let (p, q) = (floored(p), floored(q));
    let log_ratio: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a.ln() - b.ln()).collect();
    let d: f64 = p.iter().zip(&log_ratio).map(|(a, r)| a * r).sum();
    Ok(p.iter().zip(&log_ratio).map(|(a, r)| a * (r - d)).collect())
}

/// Reverse KL(p‖q) after the same floor and renormalization.
pub fn reverse_kl(p: &[f64], q: &[f64]) -> Result<f64, GradError> {
    if p.len() != q.len() {
        return Err(GradError::Dimension(p.len(), q.len()));
    }
    let (p, q) = (floored(p), floored(q));
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a.ln() - b.ln())).sum())
}

/// Dense vector over `vocab_size` ids; tail mass is spread uniformly over
/// the ids not listed.
pub fn expand_dist(dist: &TruncatedDist, vocab_size: usize) -> Vec<f64> {
    let mut out = vec![0.0; vocab_size];
    for &(id, p) in &dist.entries {
        out[id as usize] = p;
    }
    let omitted = vocab_size.saturating_sub(dist.entries.len());
    if omitted > 0 && dist.tail_mass > 0.0 {
        let share = dist.tail_mass / omitted as f64;
        let listed: BTreeSet<TokenId> = dist.entries.iter().map(|e| e.0).collect();
        for (i, v) in out.iter_mut().enumerate() {
            if !listed.contains(&(i as TokenId)) {
                *v = share;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGradientSummary {
    pub token_id: TokenId,
    pub group: Group,
    pub n_occurrences: u64,
    #[serde(skip)]
    pub mean_gradient: Vec<f64>,
    pub norm: f64,
    /// `None` when the balanced direction or the mean gradient is zero.
    pub cos_balanced: Option<f64>,
    pub contribution: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSummary {
    pub checkpoint: String,
    /// Sorted by token id.
    pub tokens: Vec<TokenGradientSummary>,
    #[serde(skip)]
    pub balanced: Vec<f64>,
    pub balanced_norm: f64,
    /// Grouped tokens with no occurrence carrying dists.
    pub excluded: Vec<TokenId>,
}

impl GradientSummary {
    pub fn total_contribution(&self) -> f64 {
        self.tokens.iter().filter_map(|t| t.contribution).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), GradError> {
        let mut text = String::from("token_id,group,n,norm,cos,contribution\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.tokens {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.token_id,
                t.group.as_str(),
                t.n_occurrences,
                t.norm,
                opt(t.cos_balanced),
                opt(t.contribution)
            ));
        }
        std::fs::write(path, text).map_err(|e| GradError::Export(e.to_string()))
    }
}

/// Mean per-occurrence logit gradient for each grouped token, the balanced
/// reference `G = Σ_t ḡ_t`, cosines and contributions `n_t·‖ḡ_t‖·cos`.
pub fn summarize_gradients(
    corpus: &Corpus,
    checkpoint: &str,
    groups: &BTreeMap<TokenId, Group>,
) -> Result<GradientSummary, GradError> {
    corpus.require_checkpoint(checkpoint)?;
    let vocab = corpus.vocabulary.size();
    let mut sites: BTreeMap<TokenId, Vec<(usize, usize)>> = BTreeMap::new();
    for i in id_order(corpus) {
        let traj = &corpus.trajectories[i];
        if traj.dists_at(checkpoint).is_none() {
            continue;
        }
        for (t, tok) in traj.tokens.iter().enumerate() {
            if groups.contains_key(tok) {
                sites.entry(*tok).or_default().push((i, t));
            }
        }
    }
    let excluded: Vec<TokenId> = groups.keys().filter(|t| !sites.contains_key(t)).copied().collect();
    let work: Vec<(TokenId, Vec<(usize, usize)>)> = sites.into_iter().collect();
    let means: Vec<(TokenId, u64, Vec<f64>)> = work
        .par_iter()
        .map(|(tok, occ)| {
            let mut acc = vec![0.0; vocab];
            for &(i, t) in occ {
                let pair = &corpus.trajectories[i].dists_at(checkpoint).expect("filtered above")[t];
                let p = expand_dist(&pair.student, vocab);
                let q = expand_dist(&pair.teacher, vocab);
                let g = reverse_kl_logit_gradient(&p, &q)?;
                for (a, x) in acc.iter_mut().zip(&g) {
                    *a += x;
                }
            }
            let n = occ.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            Ok((*tok, occ.len() as u64, acc))
        })
        .collect::<Result<_, GradError>>()?;

    let refs: Vec<&[f64]> = means.iter().map(|m| m.2.as_slice()).collect();
    let balanced = pairwise_vec_sum(&refs, vocab);
    let balanced_norm = norm(&balanced);
    let tokens = means
        .into_iter()
        .map(|(tok, n, g)| {
            let gn = norm(&g);
            let cos = (gn > 0.0 && balanced_norm > 0.0).then(|| dot(&g, &balanced) / (gn * balanced_norm));
            TokenGradientSummary {
                token_id: tok,
                group: groups[&tok],
                n_occurrences: n,
                norm: gn,
                cos_balanced: cos,
                contribution: cos.map(|c| n as f64 * gn * c),
                mean_gradient: g,
            }
        })
        .collect();
    Ok(GradientSummary {
        checkpoint: checkpoint.to_string(),
        tokens,
        balanced,
        balanced_norm,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub group_a: Group,
    pub group_b: Group,
    pub median_norm_a: f64,
    pub median_norm_b: f64,
    pub mann_whitney: RankTest,
    pub median_cos_a: Option<f64>,
    pub median_cos_b: Option<f64>,
}

/// Median gradient norms and cosines of two groups, with a Mann-Whitney
/// test on the norms.
pub fn compare_groups(summary: &GradientSummary, a: Group, b: Group) -> Result<GroupComparison, GradError> {
    let pick = |g: Group| -> (Vec<f64>, Vec<f64>) {
        let members = summary.tokens.iter().filter(|t| t.group == g);
        let norms = members.clone().map(|t| t.norm).collect();
        let cos = members.filter_map(|t| t.cos_balanced).collect();
        (norms, cos)
    };
    let (na, ca) = pick(a);
    let (nb, cb) = pick(b);
    if na.is_empty() {
        return Err(GradError::EmptyGroup(a));
    }
    if nb.is_empty() {
        return Err(GradError::EmptyGroup(b));
    }
    Ok(GroupComparison {
        group_a: a,
        group_b: b,
        median_norm_a: median(&na).unwrap_or(0.0),
        median_norm_b: median(&nb).unwrap_or(0.0),
        mann_whitney: mann_whitney(&na, &nb)?,
        median_cos_a: median(&ca),
        median_cos_b: median(&cb),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceRecord {
    pub token_id: TokenId,
    pub group: Group,
    pub kl_early: f64,
    pub kl_late: f64,
    pub delta_kl: f64,
}

impl PersistenceRecord {
    /// (early − late)/early, or `None` when early is zero.
    pub fn relative_reduction(&self) -> Option<f64> {
        (self.kl_early > 0.0).then(|| (self.kl_early - self.kl_late) / self.kl_early)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersistenceTest {
    Wilcoxon(SignedRankTest),
    /// Every token's KL was identical at both checkpoints.
    NoChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPersistence {
    pub group: Group,
    pub n_tokens: usize,
    pub median_kl_early: f64,
    pub median_kl_late: f64,
    pub median_delta: f64,
    pub median_relative_reduction: Option<f64>,
    pub test: PersistenceTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceReport {
    pub early: String,
    pub late: String,
    pub records: Vec<PersistenceRecord>,
    pub groups: Vec<GroupPersistence>,
    /// Groups with fewer than three tokens.
    pub skipped: Vec<Group>,
}

impl PersistenceReport {
    pub fn group(&self, g: Group) -> Option<&GroupPersistence> {
        self.groups.iter().find(|x| x.group == g)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), GradError> {
        let mut text = String::from("token_id,group,kl_early,kl_late,delta\n");
        for r in &self.records {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                r.token_id,
                r.group.as_str(),
                r.kl_early,
                r.kl_late,
                r.delta_kl
            ));
        }
        std::fs::write(path, text).map_err(|e| GradError::Export(e.to_string()))
    }
}

/// Per-token mean KL at two checkpoints and a per-group Wilcoxon test.
pub fn persistence_analysis(
    corpus: &Corpus,
    early: &str,
    late: &str,
    groups: &BTreeMap<TokenId, Group>,
) -> Result<PersistenceReport, GradError> {
    let aggs = aggregate_scores(corpus, early, late)?;
    let mut records: Vec<PersistenceRecord> = aggs
        .iter()
        .filter_map(|a| {
            groups.get(&a.token_id).map(|&g| PersistenceRecord {
                token_id: a.token_id,
                group: g,
                kl_early: a.mean_loss_pre,
                kl_late: a.mean_loss_post,
                delta_kl: a.mean_loss_post - a.mean_loss_pre,
            })
        })
        .collect();
    records.sort_by_key(|r| r.token_id);
    let mut out_groups = Vec::new();
    let mut skipped = Vec::new();
    for g in Group::ALL {
        let members: Vec<&PersistenceRecord> = records.iter().filter(|r| r.group == g).collect();
        if members.len() < 3 {
            if groups.values().any(|&x| x == g) {
                skipped.push(g);
            }
            continue;
        }
        let e: Vec<f64> = members.iter().map(|r| r.kl_early).collect();
        let l: Vec<f64> = members.iter().map(|r| r.kl_late).collect();
        let d: Vec<f64> = members.iter().map(|r| r.delta_kl).collect();
        let rel: Vec<f64> = members.iter().filter_map(|r| r.relative_reduction()).collect();
        let test = match wilcoxon_signed_rank(&e, &l) {
            Ok(t) => PersistenceTest::Wilcoxon(t),
            Err(StatsError::DegenerateSample) => PersistenceTest::NoChange,
            Err(err) => return Err(err.into()),
        };
        out_groups.push(GroupPersistence {
            group: g,
            n_tokens: members.len(),
            median_kl_early: median(&e).unwrap_or(0.0),
            median_kl_late: median(&l).unwrap_or(0.0),
            median_delta: median(&d).unwrap_or(0.0),
            median_relative_reduction: median(&rel),
            test,
        });
    }
    Ok(PersistenceReport {
        early: early.to_string(),
        late: late.to_string(),
        records,
        groups: out_groups,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupConfig {
    /// Checkpoint whose mean KL defines "high KL".
    pub checkpoint: String,
    /// Rare: frequency at or below this percentile of non-rock token-type frequencies.
    pub rare_freq_percentile: f64,
    /// High KL: mean KL at or above this percentile of non-rock token-type mean KL.
    pub high_kl_percentile: f64,
    pub seed: u64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            checkpoint: "post".into(),
            rare_freq_percentile: 20.0,
            high_kl_percentile: 95.0,
            seed: 0,
        }
    }
}

/// Rock set from detection, rare high-KL tokens outside it, and one
/// frequency-matched control per rock token.
pub fn select_groups(
    corpus: &Corpus,
    report: &DetectionReport,
    config: &GroupConfig,
) -> Result<BTreeMap<TokenId, Group>, GradError> {
    let rocks = report.rock_set();
    let aggs: Vec<TokenAggregate> = aggregate_scores(corpus, &config.checkpoint, &config.checkpoint)?
        .into_iter()
        .filter(|a| !rocks.contains(&a.token_id))
        .collect();
    let mut freqs: Vec<f64> = aggs.iter().map(|a| a.freq as f64).collect();
    let mut kls: Vec<f64> = aggs.iter().map(|a| a.mean_loss_post).collect();
    freqs.sort_by(f64::total_cmp);
    kls.sort_by(f64::total_cmp);
    let f_cut = quantile_sorted(&freqs, config.rare_freq_percentile / 100.0).unwrap_or(0.0);
    let k_cut = quantile_sorted(&kls, config.high_kl_percentile / 100.0).unwrap_or(f64::INFINITY);
    let mut out: BTreeMap<TokenId, Group> = rocks.iter().map(|&t| (t, Group::Rock)).collect();
    let rare: BTreeSet<TokenId> = aggs
        .iter()
        .filter(|a| a.freq as f64 <= f_cut && a.mean_loss_post >= k_cut)
        .map(|a| a.token_id)
        .collect();
    for &t in &rare {
        out.insert(t, Group::RareHighKl);
    }
    for t in freq_matched_controls(report, &rare, config.seed)? {
        out.insert(t, Group::RandomControl);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_distributions_have_zero_gradient() {
        let p = [0.1, 0.2, 0.7];
        assert!(reverse_kl_logit_gradient(&p, &p).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn two_point_example() {
        let g = reverse_kl_logit_gradient(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((g[0] - 0.274653).abs() < 1e-6);
        assert!((g[1] + 0.274653).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            reverse_kl_logit_gradient(&[1.0], &[0.5, 0.5]),
            Err(GradError::Dimension(1, 2))
        ));
    }

    #[test]
    fn tail_spread_uniformly() {
        let d = TruncatedDist {
            entries: vec![(2, 0.6)],
            tail_mass: 0.4,
        };
        assert_eq!(expand_dist(&d, 3), vec![0.2, 0.2, 0.6]);
    }

    #[test]
    fn relative_reduction_of_zero_early_is_none() {
        let r = PersistenceRecord {
            token_id: 0,
            group: Group::Rock,
            kl_early: 0.0,
            kl_late: 0.0,
            delta_kl: 0.0,
        };
        assert_eq!(r.relative_reduction(), None);
    }
}
