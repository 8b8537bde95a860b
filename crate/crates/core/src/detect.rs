//! Rock-token detection: aggregate rock scores, persistent high-loss
//! occurrences, context consistency and final selection.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{log2_bucket, median, quantile_sorted};
use crate::rng::{stream, substream};
use crate::trace::{Corpus, TokenId, TraceError, TrajectoryTrace};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("invalid detection config: {0}")]
    Config(String),
    #[error("no control candidates left in log2-frequency bucket {bucket}")]
    StratumExhausted { bucket: u32 },
    #[error("csv export failed: {0}")]
    Export(String),
}

/// High-loss threshold, either an absolute loss or a percentile of the
/// checkpoint's global loss distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Absolute(f64),
    Percentile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep tokens with R_ctx ≥ τ_R.
    Threshold(f64),
    /// Keep the K highest R_ctx tokens among those with positive R_ctx.
    TopK(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub pre: String,
    pub post: String,
    pub tau_pre: Threshold,
    pub tau_post: Threshold,
    /// Context radius.
    pub w: usize,
    pub gamma: f64,
    pub eta: f64,
    pub selection: Selection,
    /// Per-token cap on occurrences entering the pairwise consistency step.
    pub max_pairwise: usize,
    pub seed: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            pre: "pre".into(),
            post: "post".into(),
            tau_pre: Threshold::Percentile(80.0),
            tau_post: Threshold::Percentile(80.0),
            w: 5,
            gamma: 0.5,
            eta: 0.3,
            selection: Selection::TopK(20),
            max_pairwise: 2000,
            seed: 0,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.w < 1 {
            return Err(DetectError::Config("w must be at least 1".into()));
        }
        for (name, v) in [("gamma", self.gamma), ("eta", self.eta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DetectError::Config(format!("{name}={v} outside [0,1]")));
            }
        }
        for (name, t) in [("tau_pre", self.tau_pre), ("tau_post", self.tau_post)] {
            match t {
                Threshold::Percentile(p) if !(p > 0.0 && p < 100.0) => {
                    return Err(DetectError::Config(format!("{name} percentile {p} outside (0,100)")));
                }
                Threshold::Absolute(a) if !a.is_finite() => {
                    return Err(DetectError::Config(format!("{name} is not finite")));
                }
                _ => {}
            }
        }
        if self.max_pairwise < 2 {
            return Err(DetectError::Config("max_pairwise must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    MathDelimiter,
    MarkdownWhitespace,
    DiscourseMarker,
    Digit,
    Other,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::MathDelimiter => "math_delimiter",
            Category::MarkdownWhitespace => "markdown_whitespace",
            Category::DiscourseMarker => "discourse_marker",
            Category::Digit => "digit",
            Category::Other => "other",
        }
    }
}

const MATH_SURFACES: &[&str] = &[
    "$", "$$", "\\", "=", "^", "_", "{", "}", "(", ")", "+", "<", ">", "frac", "sqrt", "cdot",
    "times", "boxed", "dfrac", "left", "right", "pi",
];

const DISCOURSE_MARKERS: &[&str] = &["So", "Let", "We", "But", "Now", "Wait", "Then", "Since", "This"];

/// Rule-based functional category of a token surface.
pub fn categorize_token(surface: &str) -> Category {
    let s = surface.trim();
    let mut chars = s.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if c.is_ascii_digit() {
            return Category::Digit;
        }
    }
    if MATH_SURFACES.contains(&s) || s.starts_with('\\') {
        return Category::MathDelimiter;
    }
    let markdown_only = !s.is_empty() && s.chars().all(|c| "#*-_>|`".contains(c));
    let newline_punct = surface.contains('\n') && s.chars().all(|c| c.is_ascii_punctuation());
    if s.is_empty() || markdown_only || newline_punct {
        return Category::MarkdownWhitespace;
    }
    if DISCOURSE_MARKERS.contains(&s) {
        return Category::DiscourseMarker;
    }
    Category::Other
}

/// Bag of token ids within the context radius, excluding the centre.
/// Stored as `(token, count)` sorted by token.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Fingerprint(pub Vec<(TokenId, u32)>);

impl Fingerprint {
    pub fn at(tokens: &[TokenId], position: usize, w: usize) -> Self {
        let lo = position.saturating_sub(w);
        let hi = (position + w).min(tokens.len().saturating_sub(1));
        let mut ids: Vec<TokenId> = (lo..=hi)
            .filter(|&i| i != position)
            .map(|i| tokens[i])
            .collect();
        ids.sort_unstable();
        let mut bag: Vec<(TokenId, u32)> = Vec::with_capacity(ids.len());
        for id in ids {
            match bag.last_mut() {
                Some((last, c)) if *last == id => *c += 1,
                _ => bag.push((id, 1)),
            }
        }
        Fingerprint(bag)
    }

    pub fn total(&self) -> u32 {
        self.0.iter().map(|e| e.1).sum()
    }

    /// Generalized Jaccard Σmin/Σmax; 1 when both bags are empty.
    pub fn similarity(&self, other: &Fingerprint) -> f64 {
        let (a, b) = (&self.0, &other.0);
        let (mut i, mut j) = (0, 0);
        let (mut num, mut den) = (0u32, 0u32);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => {
                    den += a[i].1;
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    den += b[j].1;
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    num += a[i].1.min(b[j].1);
                    den += a[i].1.max(b[j].1);
                    i += 1;
                    j += 1;
                }
            }
        }
        den += a[i..].iter().map(|e| e.1).sum::<u32>() + b[j..].iter().map(|e| e.1).sum::<u32>();
        if den == 0 {
            1.0
        } else {
            f64::from(num) / f64::from(den)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceRef {
    pub trajectory_id: u64,
    pub position: usize,
    pub token: TokenId,
    pub loss_pre: f64,
    pub loss_post: f64,
    pub fingerprint: Fingerprint,
}

pub fn context_similarity(a: &OccurrenceRef, b: &OccurrenceRef) -> f64 {
    a.fingerprint.similarity(&b.fingerprint)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAggregate {
    pub token_id: TokenId,
    pub surface: String,
    pub freq: u64,
    pub mean_loss_pre: f64,
    pub mean_loss_post: f64,
    pub rock_score: f64,
    pub ph_count: u64,
    pub rock_occurrences: u64,
    pub ccr: f64,
    pub rock_score_ctx: f64,
    pub category: Category,
}

/// Trajectory indices sorted by id, so reductions do not depend on file order.
pub(crate) fn id_order(corpus: &Corpus) -> Vec<usize> {
    let mut order: Vec<usize> = (0..corpus.trajectories.len()).collect();
    order.sort_by_key(|&i| corpus.trajectories[i].trajectory_id);
    order
}

/// Stage-1 scores over the trajectories at `indices` (visited in id order).
pub fn aggregate_subset(
    corpus: &Corpus,
    indices: &[usize],
    pre: &str,
    post: &str,
) -> Result<Vec<TokenAggregate>, DetectError> {
    corpus.require_checkpoint(pre)?;
    corpus.require_checkpoint(post)?;
    let mut order = indices.to_vec();
    order.sort_by_key(|&i| corpus.trajectories[i].trajectory_id);
    let mut tally: BTreeMap<TokenId, (u64, f64, f64)> = BTreeMap::new();
    for i in order {
        let traj = &corpus.trajectories[i];
        let (lp, lq) = (&traj.losses[pre], &traj.losses[post]);
        for (t, &tok) in traj.tokens.iter().enumerate() {
            let e = tally.entry(tok).or_insert((0, 0.0, 0.0));
            e.0 += 1;
            e.1 += lp[t];
            e.2 += lq[t];
        }
    }
    let mut out: Vec<TokenAggregate> = tally
        .into_iter()
        .map(|(tok, (freq, sp, sq))| {
            let mean_post = sq / freq as f64;
            let surface = corpus.vocabulary.surface(tok).unwrap_or_default().to_string();
            TokenAggregate {
                token_id: tok,
                category: categorize_token(&surface),
                surface,
                freq,
                mean_loss_pre: sp / freq as f64,
                mean_loss_post: mean_post,
                rock_score: mean_post * freq as f64,
                ph_count: 0,
                rock_occurrences: 0,
                ccr: 0.0,
                rock_score_ctx: 0.0,
            }
        })
        .collect();
    sort_by_score(&mut out, |a| a.rock_score);
    Ok(out)
}

/// One aggregate per occurring token type, sorted by R(v) descending then id.
pub fn aggregate_scores(corpus: &Corpus, pre: &str, post: &str) -> Result<Vec<TokenAggregate>, DetectError> {
    let all: Vec<usize> = (0..corpus.trajectories.len()).collect();
    aggregate_subset(corpus, &all, pre, post)
}

fn sort_by_score(aggs: &mut [TokenAggregate], key: impl Fn(&TokenAggregate) -> f64) {
    aggs.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.token_id.cmp(&b.token_id)));
}

/// Resolves a threshold against every loss recorded at `checkpoint`.
pub fn resolve_threshold(corpus: &Corpus, checkpoint: &str, t: Threshold) -> Result<f64, DetectError> {
    corpus.require_checkpoint(checkpoint)?;
    match t {
        Threshold::Absolute(a) => Ok(a),
        Threshold::Percentile(p) => {
            if !(p > 0.0 && p < 100.0) {
                return Err(DetectError::Config(format!("percentile {p} outside (0,100)")));
            }
            let mut all: Vec<f64> = corpus
                .trajectories
                .iter()
                .flat_map(|t| t.losses[checkpoint].iter().copied())
                .collect();
            all.sort_by(f64::total_cmp);
            Ok(quantile_sorted(&all, p / 100.0).unwrap_or(0.0))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhExtraction {
    pub tau_pre: f64,
    pub tau_post: f64,
    /// Sorted by (trajectory_id, position).
    pub occurrences: Vec<OccurrenceRef>,
}

/// Occurrences with ℓ_pre ≥ τ_pre and ℓ_post ≥ τ_post.
pub fn extract_ph_occurrences(corpus: &Corpus, config: &DetectionConfig) -> Result<PhExtraction, DetectError> {
    config.validate()?;
    let tau_pre = resolve_threshold(corpus, &config.pre, config.tau_pre)?;
    let tau_post = resolve_threshold(corpus, &config.post, config.tau_post)?;
    let mut occurrences = Vec::new();
    for i in id_order(corpus) {
        let traj = &corpus.trajectories[i];
        let (lp, lq) = (&traj.losses[&config.pre], &traj.losses[&config.post]);
        for (t, &tok) in traj.tokens.iter().enumerate() {
            if lp[t] >= tau_pre && lq[t] >= tau_post {
                occurrences.push(OccurrenceRef {
                    trajectory_id: traj.trajectory_id,
                    position: t,
                    token: tok,
                    loss_pre: lp[t],
                    loss_post: lq[t],
                    fingerprint: Fingerprint::at(&traj.tokens, t, config.w),
                });
            }
        }
    }
    Ok(PhExtraction {
        tau_pre,
        tau_post,
        occurrences,
    })
}

/// ρ(o): share of the other occurrences whose context similarity is ≥ γ.
/// A singleton set scores 0.
pub fn consistency_scores(occs: &[OccurrenceRef], gamma: f64) -> Vec<f64> {
    let n = occs.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut hits = vec![0u64; n];
    for i in 0..n {
        for j in i + 1..n {
            if context_similarity(&occs[i], &occs[j]) >= gamma {
                hits[i] += 1;
                hits[j] += 1;
            }
        }
    }
    hits.iter().map(|&h| h as f64 / (n - 1) as f64).collect()
}

/// Like [`consistency_scores`], but when more than `cap` occurrences are
/// present each one is compared against a seeded uniform pool of `cap`.
pub fn consistency_scores_capped(occs: &[OccurrenceRef], gamma: f64, cap: usize, seed: u64) -> Vec<f64> {
    if occs.len() <= cap {
        return consistency_scores(occs, gamma);
    }
    let mut rng = substream(seed, u64::from(occs[0].token));
    let mut pool = sample(&mut rng, occs.len(), cap).into_vec();
    pool.sort_unstable();
    occs.iter()
        .enumerate()
        .map(|(i, o)| {
            let mut hits = 0u64;
            let mut others = 0u64;
            for &j in &pool {
                if j == i {
                    continue;
                }
                others += 1;
                if context_similarity(o, &occs[j]) >= gamma {
                    hits += 1;
                }
            }
            hits as f64 / others as f64
        })
        .collect()
}

/// A persistent high-loss occurrence that passed the consistency filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RockOccurrence {
    pub trajectory_id: u64,
    pub position: usize,
    pub token: TokenId,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDensity {
    pub trajectory_id: u64,
    pub length: usize,
    pub rock_positions: usize,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub config: DetectionConfig,
    pub tau_pre_resolved: f64,
    pub tau_post_resolved: f64,
    /// Sorted by R_ctx descending, then token id.
    pub tokens: Vec<TokenAggregate>,
    pub rock_set: Vec<TokenId>,
    /// Sorted by trajectory id.
    pub densities: Vec<TrajectoryDensity>,
    pub median_density: f64,
    /// Consistency-filtered occurrences of every token, sorted by (trajectory_id, position).
    pub rock_occurrences: Vec<RockOccurrence>,
    /// Tokens whose consistency scores were computed on a subsample.
    pub capped_tokens: Vec<TokenId>,
}

impl DetectionReport {
    pub fn token(&self, id: TokenId) -> Option<&TokenAggregate> {
        self.tokens.iter().find(|a| a.token_id == id)
    }

    pub fn rock_set(&self) -> BTreeSet<TokenId> {
        self.rock_set.iter().copied().collect()
    }

    /// Token ids ranked by R_ctx.
    pub fn ranking(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|a| a.token_id).collect()
    }

    pub fn write_token_csv(&self, path: &Path) -> Result<(), DetectError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| DetectError::Export(e.to_string()))?;
        let rocks = self.rock_set();
        w.write_record([
            "token_id", "surface", "freq", "mean_loss_pre", "mean_loss_post", "rock_score", "ph_count",
            "rock_occurrences", "ccr", "rock_score_ctx", "category", "in_rock_set",
        ])
        .map_err(|e| DetectError::Export(e.to_string()))?;
        for a in &self.tokens {
            w.write_record([
                a.token_id.to_string(),
                a.surface.clone(),
                a.freq.to_string(),
                a.mean_loss_pre.to_string(),
                a.mean_loss_post.to_string(),
                a.rock_score.to_string(),
                a.ph_count.to_string(),
                a.rock_occurrences.to_string(),
                a.ccr.to_string(),
                a.rock_score_ctx.to_string(),
                a.category.as_str().to_string(),
                rocks.contains(&a.token_id).to_string(),
            ])
            .map_err(|e| DetectError::Export(e.to_string()))?;
        }
        w.flush().map_err(|e| DetectError::Export(e.to_string()))
    }

    pub fn write_density_csv(&self, path: &Path) -> Result<(), DetectError> {
        let mut f = std::fs::File::create(path).map_err(|e| DetectError::Export(e.to_string()))?;
        let mut text = String::from("trajectory_id,length,rock_positions,density\n");
        for d in &self.densities {
            text.push_str(&format!("{},{},{},{}\n", d.trajectory_id, d.length, d.rock_positions, d.density));
        }
        f.write_all(text.as_bytes()).map_err(|e| DetectError::Export(e.to_string()))
    }
}

/// Full pipeline: stage-1 scores, persistent high-loss filtering, context
/// consistency, CCR and R_ctx, selection and per-trajectory density.
pub fn select_rock_tokens(corpus: &Corpus, config: &DetectionConfig) -> Result<DetectionReport, DetectError> {
    config.validate()?;
    let mut tokens = aggregate_scores(corpus, &config.pre, &config.post)?;
    let ph = extract_ph_occurrences(corpus, config)?;

    let mut by_token: BTreeMap<TokenId, Vec<OccurrenceRef>> = BTreeMap::new();
    for o in ph.occurrences {
        by_token.entry(o.token).or_default().push(o);
    }
    let groups: Vec<(TokenId, Vec<OccurrenceRef>)> = by_token.into_iter().collect();
    let scored: Vec<(TokenId, usize, Vec<RockOccurrence>, bool)> = groups
        .par_iter()
        .map(|(tok, occs)| {
            let rho = consistency_scores_capped(occs, config.gamma, config.max_pairwise, config.seed);
            let kept = occs
                .iter()
                .zip(&rho)
                .filter(|(_, &r)| r >= config.eta)
                .map(|(o, &r)| RockOccurrence {
                    trajectory_id: o.trajectory_id,
                    position: o.position,
                    token: *tok,
                    rho: r,
                })
                .collect();
            (*tok, occs.len(), kept, occs.len() > config.max_pairwise)
        })
        .collect();

    let mut rock_occurrences = Vec::new();
    let mut capped_tokens = Vec::new();
    let mut counts: BTreeMap<TokenId, (u64, u64)> = BTreeMap::new();
    for (tok, ph_count, kept, capped) in scored {
        counts.insert(tok, (ph_count as u64, kept.len() as u64));
        rock_occurrences.extend(kept);
        if capped {
            capped_tokens.push(tok);
        }
    }
    rock_occurrences.sort_by_key(|o| (o.trajectory_id, o.position));

    for a in &mut tokens {
        let (ph_count, rocks) = counts.get(&a.token_id).copied().unwrap_or((0, 0));
        a.ph_count = ph_count;
        a.rock_occurrences = rocks;
        a.ccr = rocks as f64 / a.freq as f64;
        a.rock_score_ctx = a.rock_score * a.ccr;
    }
    sort_by_score(&mut tokens, |a| a.rock_score_ctx);

    let mut rock_set: Vec<TokenId> = match config.selection {
        Selection::Threshold(tau) => tokens
            .iter()
            .filter(|a| a.rock_score_ctx >= tau)
            .map(|a| a.token_id)
            .collect(),
        Selection::TopK(k) => tokens
            .iter()
            .filter(|a| a.rock_score_ctx > 0.0)
            .take(k)
            .map(|a| a.token_id)
            .collect(),
    };
    rock_set.sort_unstable();
    let rock_lookup: BTreeSet<TokenId> = rock_set.iter().copied().collect();

    let densities: Vec<TrajectoryDensity> = id_order(corpus)
        .into_iter()
        .map(|i| density_of(&corpus.trajectories[i], &rock_lookup))
        .collect();
    let dens: Vec<f64> = densities.iter().map(|d| d.density).collect();
    let median_density = median(&dens).unwrap_or(0.0);

    Ok(DetectionReport {
        config: config.clone(),
        tau_pre_resolved: ph.tau_pre,
        tau_post_resolved: ph.tau_post,
        tokens,
        rock_set,
        densities,
        median_density,
        rock_occurrences,
        capped_tokens,
    })
}

fn density_of(traj: &TrajectoryTrace, rocks: &BTreeSet<TokenId>) -> TrajectoryDensity {
    let rock_positions = traj.tokens.iter().filter(|t| rocks.contains(t)).count();
    let density = if traj.is_empty() {
        0.0
    } else {
        rock_positions as f64 / traj.len() as f64
    };
    TrajectoryDensity {
        trajectory_id: traj.trajectory_id,
        length: traj.len(),
        rock_positions,
        density,
    }
}

/// One control token per rock token, drawn from the same log2-frequency
/// bucket among tokens outside the rock set and `excluded`.
pub fn freq_matched_controls(
    report: &DetectionReport,
    excluded: &BTreeSet<TokenId>,
    seed: u64,
) -> Result<BTreeSet<TokenId>, DetectError> {
    let rocks = report.rock_set();
    let mut pools: BTreeMap<u32, Vec<TokenId>> = BTreeMap::new();
    let mut by_id: Vec<&TokenAggregate> = report.tokens.iter().collect();
    by_id.sort_by_key(|a| a.token_id);
    for a in &by_id {
        if !rocks.contains(&a.token_id) && !excluded.contains(&a.token_id) {
            pools.entry(log2_bucket(a.freq)).or_default().push(a.token_id);
        }
    }
    let mut rng = stream(seed, "freq-matched-controls");
    let mut out = BTreeSet::new();
    for &v in &report.rock_set {
        let freq = report.token(v).map(|a| a.freq).unwrap_or(0);
        let bucket = log2_bucket(freq);
        let pool = pools.entry(bucket).or_default();
        if pool.is_empty() {
            return Err(DetectError::StratumExhausted { bucket });
        }
        let pick = rng.gen_range(0..pool.len());
        out.insert(pool.remove(pick));
    }
    Ok(out)
}
