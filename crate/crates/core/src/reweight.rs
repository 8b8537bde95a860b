//! Window-aware loss reweighting: rock windows, frequency-matched control
//! windows, per-position weight masks and the weighted loss.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::DetectionReport;
use crate::numeric::{log2_bucket, pairwise_sum};
use crate::rng::{derive_seed, stream};
use crate::trace::{Corpus, TokenId, TraceError};

#[derive(Debug, Error)]
pub enum ReweightError {
    #[error("lambda {0} outside [0,1]")]
    Lambda(f64),
    #[error("cannot place a control window of length {length} in log2-frequency bucket {bucket}")]
    Infeasible { length: usize, bucket: u32 },
    #[error("mask mismatch for trajectory {trajectory_id}: {message}")]
    Mismatch { trajectory_id: u64, message: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("mask file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Baseline,
    RockFreeze,
    FreqMatchedRandom,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::RockFreeze => "rock_freeze",
            Regime::FreqMatchedRandom => "freq_matched_random",
        }
    }
}

/// Inclusive position intervals per trajectory id, sorted and non-overlapping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSet {
    pub windows: BTreeMap<u64, Vec<(usize, usize)>>,
}

fn merge(mut v: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    v.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(v.len());
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

impl WindowSet {
    /// Merges overlapping intervals within each trajectory.
    pub fn from_intervals(raw: BTreeMap<u64, Vec<(usize, usize)>>) -> Self {
        Self {
            windows: raw.into_iter().map(|(k, v)| (k, merge(v))).filter(|(_, v)| !v.is_empty()).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn intervals(&self) -> impl Iterator<Item = (u64, usize, usize)> + '_ {
        self.windows.iter().flat_map(|(&id, v)| v.iter().map(move |&(a, b)| (id, a, b)))
    }

    pub fn covered_positions(&self) -> usize {
        self.intervals().map(|(_, a, b)| b - a + 1).sum()
    }

    pub fn contains(&self, trajectory_id: u64, position: usize) -> bool {
        self.windows.get(&trajectory_id).is_some_and(|v| {
            let i = v.partition_point(|&(_, b)| b < position);
            i < v.len() && v[i].0 <= position
        })
    }

    /// Window lengths with multiplicity.
    pub fn length_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for (_, a, b) in self.intervals() {
            *h.entry(b - a + 1).or_insert(0) += 1;
        }
        h
    }

    /// Log₂-frequency buckets of each window's center token (lower median position).
    pub fn center_bucket_histogram(&self, corpus: &Corpus) -> BTreeMap<u32, usize> {
        let freq = token_frequencies(corpus);
        let by_id = trajectory_index(corpus);
        let mut h = BTreeMap::new();
        for (id, a, b) in self.intervals() {
            if let Some(&i) = by_id.get(&id) {
                let tok = corpus.trajectories[i].tokens[(a + b) / 2];
                *h.entry(log2_bucket(freq[&tok])).or_insert(0) += 1;
            }
        }
        h
    }
}

fn trajectory_index(corpus: &Corpus) -> BTreeMap<u64, usize> {
    corpus
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| (t.trajectory_id, i))
        .collect()
}

fn token_frequencies(corpus: &Corpus) -> BTreeMap<TokenId, u64> {
    let mut f = BTreeMap::new();
    for t in &corpus.trajectories {
        for &tok in &t.tokens {
            *f.entry(tok).or_insert(0) += 1;
        }
    }
    f
}

/// `[t − radius, t + radius]` around every retained rock occurrence,
/// clipped to the trajectory and merged.
pub fn rock_windows(corpus: &Corpus, detection: &DetectionReport, radius: usize) -> WindowSet {
    let rocks = detection.rock_set();
    let lens: BTreeMap<u64, usize> = corpus.trajectories.iter().map(|t| (t.trajectory_id, t.len())).collect();
    let mut raw: BTreeMap<u64, Vec<(usize, usize)>> = BTreeMap::new();
    for o in detection.rock_occurrences.iter().filter(|o| rocks.contains(&o.token)) {
        if let Some(&len) = lens.get(&o.trajectory_id) {
            if o.position < len {
                raw.entry(o.trajectory_id)
                    .or_default()
                    .push((o.position.saturating_sub(radius), (o.position + radius).min(len - 1)));
            }
        }
    }
    WindowSet::from_intervals(raw)
}

/// Control windows with the reference's exact length histogram and center-token
/// log₂-frequency buckets, disjoint from the reference and from each other,
/// centered on non-rock tokens.
pub fn freq_matched_random_windows(
    corpus: &Corpus,
    reference: &WindowSet,
    rock_set: &BTreeSet<TokenId>,
    seed: u64,
) -> Result<WindowSet, ReweightError> {
    let freq = token_frequencies(corpus);
    let by_id = trajectory_index(corpus);
    let mut needs: Vec<(usize, u32)> = Vec::new();
    for (id, a, b) in reference.intervals() {
        if let Some(&i) = by_id.get(&id) {
            let tok = corpus.trajectories[i].tokens[(a + b) / 2];
            needs.push((b - a + 1, log2_bucket(freq[&tok])));
        }
    }
    // Longest windows first: they are the hardest to place.
    needs.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));

    let mut last = None;
    for attempt in 0..PLACEMENT_ATTEMPTS {
        let mut rng = stream(derive_seed(seed, &format!("attempt-{attempt}")), "freq-matched-windows");
        match place(corpus, reference, rock_set, &freq, &needs, &mut rng) {
            Ok(w) => return Ok(w),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Reshuffles tried before a greedy placement is declared infeasible.
const PLACEMENT_ATTEMPTS: u64 = 32;

/// Shuffled `(trajectory index, start)` candidates and a cursor.
type Pool = (Vec<(usize, usize)>, usize);

fn place(
    corpus: &Corpus,
    reference: &WindowSet,
    rock_set: &BTreeSet<TokenId>,
    freq: &BTreeMap<TokenId, u64>,
    needs: &[(usize, u32)],
    rng: &mut ChaCha8Rng,
) -> Result<WindowSet, ReweightError> {
    let mut pools: BTreeMap<(usize, u32), Pool> = BTreeMap::new();
    let mut taken: Vec<Vec<bool>> = corpus.trajectories.iter().map(|t| vec![false; t.len()]).collect();
    let mut out: BTreeMap<u64, Vec<(usize, usize)>> = BTreeMap::new();
    for &(len, bucket) in needs {
        let (pool, cursor) = pools.entry((len, bucket)).or_insert_with(|| {
            let mut cands = Vec::new();
            for (i, t) in corpus.trajectories.iter().enumerate() {
                if t.len() < len {
                    continue;
                }
                for start in 0..=t.len() - len {
                    let center = t.tokens[start + (len - 1) / 2];
                    if rock_set.contains(&center) || log2_bucket(freq[&center]) != bucket {
                        continue;
                    }
                    if (start..start + len).any(|p| reference.contains(t.trajectory_id, p)) {
                        continue;
                    }
                    cands.push((i, start));
                }
            }
            cands.shuffle(rng);
            (cands, 0)
        });
        loop {
            let Some(&(i, start)) = pool.get(*cursor) else {
                return Err(ReweightError::Infeasible { length: len, bucket });
            };
            *cursor += 1;
            if taken[i][start..start + len].iter().any(|&x| x) {
                continue;
            }
            taken[i][start..start + len].iter_mut().for_each(|x| *x = true);
            out.entry(corpus.trajectories[i].trajectory_id)
                .or_default()
                .push((start, start + len - 1));
            break;
        }
    }
    for v in out.values_mut() {
        v.sort_unstable();
    }
    Ok(WindowSet { windows: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMask {
    pub trajectory_id: u64,
    pub weights: Vec<f64>,
    pub regime: Regime,
    pub lambda: f64,
    /// Share of positions carrying weight λ by selection.
    pub masked_fraction: f64,
}

/// Weight λ where the token is in `rock_set` or the position lies in
/// `windows`, 1 elsewhere.
pub fn build_mask(
    corpus: &Corpus,
    rock_set: &BTreeSet<TokenId>,
    windows: &WindowSet,
    lambda: f64,
    regime: Regime,
) -> Result<Vec<WeightMask>, ReweightError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ReweightError::Lambda(lambda));
    }
    Ok(corpus
        .trajectories
        .par_iter()
        .map(|t| {
            let mut masked = 0usize;
            let weights: Vec<f64> = t
                .tokens
                .iter()
                .enumerate()
                .map(|(p, tok)| {
                    if rock_set.contains(tok) || windows.contains(t.trajectory_id, p) {
                        masked += 1;
                        lambda
                    } else {
                        1.0
                    }
                })
                .collect();
            WeightMask {
                trajectory_id: t.trajectory_id,
                masked_fraction: if t.is_empty() { 0.0 } else { masked as f64 / t.len() as f64 },
                weights,
                regime,
                lambda,
            }
        })
        .collect())
}

/// Positions selected by the masks over all positions.
pub fn aggregate_masked_fraction(masks: &[WeightMask]) -> f64 {
    let total: usize = masks.iter().map(|m| m.weights.len()).sum();
    let masked: f64 = masks.iter().map(|m| m.masked_fraction * m.weights.len() as f64).sum();
    if total == 0 {
        0.0
    } else {
        masked.round() / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedLoss {
    pub total: f64,
    pub per_trajectory: Vec<f64>,
    pub active_term_count: u64,
}

/// Σ w·ℓ per trajectory and overall; zero-weight positions are skipped and
/// not counted as active terms.
pub fn weighted_loss(corpus: &Corpus, masks: &[WeightMask], checkpoint: &str) -> Result<WeightedLoss, ReweightError> {
    corpus.require_checkpoint(checkpoint)?;
    let by_id: BTreeMap<u64, &WeightMask> = masks.iter().map(|m| (m.trajectory_id, m)).collect();
    let parts = corpus
        .trajectories
        .par_iter()
        .map(|t| {
            let m = by_id.get(&t.trajectory_id).ok_or_else(|| ReweightError::Mismatch {
                trajectory_id: t.trajectory_id,
                message: "no mask".into(),
            })?;
            if m.weights.len() != t.len() {
                return Err(ReweightError::Mismatch {
                    trajectory_id: t.trajectory_id,
                    message: format!("{} weights for {} positions", m.weights.len(), t.len()),
                });
            }
            let losses = t.loss(checkpoint).unwrap_or(&[]);
            let terms: Vec<f64> = losses
                .iter()
                .zip(&m.weights)
                .filter(|(_, &w)| w != 0.0)
                .map(|(l, w)| w * l)
                .collect();
            Ok((pairwise_sum(&terms), terms.len() as u64))
        })
        .collect::<Result<Vec<_>, ReweightError>>()?;
    let per_trajectory: Vec<f64> = parts.iter().map(|p| p.0).collect();
    Ok(WeightedLoss {
        total: pairwise_sum(&per_trajectory),
        active_term_count: parts.iter().map(|p| p.1).sum(),
        per_trajectory,
    })
}

/// The unweighted loss with the same reduction order as [`weighted_loss`].
pub fn plain_loss(corpus: &Corpus, checkpoint: &str) -> Result<f64, ReweightError> {
    corpus.require_checkpoint(checkpoint)?;
    let per: Vec<f64> = corpus
        .trajectories
        .iter()
        .map(|t| pairwise_sum(t.loss(checkpoint).unwrap_or(&[])))
        .collect();
    Ok(pairwise_sum(&per))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskRecord {
    trajectory_id: u64,
    regime: Regime,
    lambda: f64,
    masked_fraction: f64,
    /// Run-length encoding: (weight, count) pairs.
    runs: Vec<(f64, usize)>,
}

fn encode(m: &WeightMask) -> MaskRecord {
    let mut runs: Vec<(f64, usize)> = Vec::new();
    for &w in &m.weights {
        match runs.last_mut() {
            Some(r) if r.0 == w => r.1 += 1,
            _ => runs.push((w, 1)),
        }
    }
    MaskRecord {
        trajectory_id: m.trajectory_id,
        regime: m.regime,
        lambda: m.lambda,
        masked_fraction: m.masked_fraction,
        runs,
    }
}

/// One JSON record per trajectory with a run-length-encoded weight vector.
pub fn write_masks(masks: &[WeightMask], path: &Path) -> Result<(), ReweightError> {
    let io = |source| ReweightError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for m in masks {
        let line = serde_json::to_string(&encode(m)).expect("mask record serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_masks<R: BufRead>(reader: R) -> Result<Vec<WeightMask>, ReweightError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ReweightError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MaskRecord = serde_json::from_str(&line).map_err(|e| ReweightError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let mut weights = Vec::new();
        for (w, n) in &r.runs {
            if !(0.0..=1.0).contains(w) {
                return Err(ReweightError::Parse {
                    line: i + 1,
                    message: format!("weight {w} outside [0,1]"),
                });
            }
            weights.extend(std::iter::repeat_n(*w, *n));
        }
        out.push(WeightMask {
            trajectory_id: r.trajectory_id,
            masked_fraction: r.masked_fraction,
            weights,
            regime: r.regime,
            lambda: r.lambda,
        });
    }
    Ok(out)
}

pub fn load_masks(path: &Path) -> Result<Vec<WeightMask>, ReweightError> {
    let f = std::fs::File::open(path).map_err(|source| ReweightError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_masks(std::io::BufReader::new(f))
}
