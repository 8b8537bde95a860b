//! Statistical kernels: Jaccard, Pearson, rank tests, exact binomial,
//! paired bootstrap and multiple-testing corrections.

use std::collections::{BTreeSet, HashSet};
use std::hash::Hash;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::numeric::quantile_sorted;
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} observations, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("correlation undefined: zero variance")]
    UndefinedCorrelation,
    #[error("degenerate sample: all differences are zero")]
    DegenerateSample,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// |a ∩ b| / |a ∪ b|, with 1 for two empty sets.
pub fn jaccard<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
}

/// Pearson correlation with a two-sided t-test on n − 2 degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFewSamples { needed: 3, got: n });
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::UndefinedCorrelation);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    let p = if one_minus <= 0.0 {
        0.0
    } else {
        // P(|T| > t) = I_{df/(df+t²)}(df/2, 1/2) with t² = df·r²/(1−r²).
        let t2 = df * r * r / one_minus;
        beta_reg(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0)
    };
    Ok(Correlation { r, p })
}

/// Midranks (1-based) and the tie term Σ(t³ − t) over tie groups.
pub fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    (ranks, tie_term)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTest {
    pub statistic: f64,
    pub p: f64,
    pub exact: bool,
}

/// Calls `f` with every k-subset of `0..n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        while i > 0 && idx[i - 1] == i - 1 + n - k {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

const RANK_EPS: f64 = 1e-9;

/// Mann-Whitney U (the statistic of `a`), two-sided.
///
/// Exact enumeration of label assignments when |a| + |b| ≤ 10, otherwise the
/// normal approximation with tie and continuity corrections.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<RankTest, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::TooFewSamples {
            needed: 1,
            got: a.len().min(b.len()),
        });
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, tie_term) = midranks(&pooled);
    let offset = (na * (na + 1)) as f64 / 2.0;
    let u = ranks[..na].iter().sum::<f64>() - offset;
    if n <= 10 {
        let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
        for_each_combination(n, na, |idx| {
            let ui = idx.iter().map(|&i| ranks[i]).sum::<f64>() - offset;
            total += 1;
            if ui <= u + RANK_EPS {
                le += 1;
            }
            if ui >= u - RANK_EPS {
                ge += 1;
            }
        });
        let p = (2.0 * le.min(ge) as f64 / total as f64).min(1.0);
        return Ok(RankTest {
            statistic: u,
            p,
            exact: true,
        });
    }
    let mu = (na * nb) as f64 / 2.0;
    let nf = n as f64;
    let var = (na * nb) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * normal_sf(z)).min(1.0)
    };
    Ok(RankTest {
        statistic: u,
        p,
        exact: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedRankTest {
    /// Sum of ranks of positive differences `pre − post`.
    pub w_plus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_two_sided: f64,
    /// Tail for `pre > post`.
    pub p_greater: f64,
    /// Tail for `pre < post`.
    pub p_less: f64,
    pub exact: bool,
}

/// Wilcoxon signed-rank test on `pre − post` with zero differences dropped.
/// Exact over all sign patterns when n ≤ 12.
pub fn wilcoxon_signed_rank(pre: &[f64], post: &[f64]) -> Result<SignedRankTest, StatsError> {
    if pre.len() != post.len() {
        return Err(StatsError::LengthMismatch {
            left: pre.len(),
            right: post.len(),
        });
    }
    let diffs: Vec<f64> = pre
        .iter()
        .zip(post)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(StatsError::DegenerateSample);
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, tie_term) = midranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    if n <= 12 {
        let (mut le, mut ge) = (0u64, 0u64);
        let total = 1u64 << n;
        for mask in 0..total {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if w <= w_plus + RANK_EPS {
                le += 1;
            }
            if w >= w_plus - RANK_EPS {
                ge += 1;
            }
        }
        let (pg, pl) = (ge as f64 / total as f64, le as f64 / total as f64);
        return Ok(SignedRankTest {
            w_plus,
            n,
            p_two_sided: (2.0 * pg.min(pl)).min(1.0),
            p_greater: pg,
            p_less: pl,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let se = var.sqrt();
    let d = w_plus - mean;
    let z_two = (d.abs() - 0.5).max(0.0) / se;
    Ok(SignedRankTest {
        w_plus,
        n,
        p_two_sided: (2.0 * normal_sf(z_two)).min(1.0),
        p_greater: normal_sf((d - 0.5) / se),
        p_less: normal_sf(-(d + 0.5) / se),
        exact: false,
    })
}

/// Exact two-sided binomial test by equal-tail doubling:
/// `min(1, 2·min(P[X ≤ k], P[X ≥ k]))` for X ~ Bin(n, p0).
pub fn binomial_two_sided(k: u64, n: u64, p0: f64) -> Result<f64, StatsError> {
    if k > n {
        return Err(StatsError::InvalidInput(format!("k={k} exceeds n={n}")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(StatsError::InvalidInput(format!("p0={p0} outside (0,1)")));
    }
    let pmf = binomial_pmf(n, p0);
    let lower: f64 = pmf[..=k as usize].iter().sum();
    let upper: f64 = pmf[k as usize..].iter().rev().sum();
    Ok((2.0 * lower.min(upper)).min(1.0))
}

fn binomial_pmf(n: u64, p0: f64) -> Vec<f64> {
    let q0 = 1.0 - p0;
    if n <= 1000 {
        // Coefficients built from the smaller index are mirror-symmetric and
        // exact for dyadic cases.
        (0..=n)
            .map(|i| {
                let m = i.min(n - i);
                let c = (1..=m).fold(1.0f64, |c, j| c * (n - m + j) as f64 / j as f64);
                c * p0.powi(i as i32) * q0.powi((n - i) as i32)
            })
            .collect()
    } else {
        use statrs::function::factorial::ln_binomial;
        (0..=n)
            .map(|i| (ln_binomial(n, i) + i as f64 * p0.ln() + (n - i) as f64 * q0.ln()).exp())
            .collect()
    }
}

/// Sign test on counts of negative and positive outcomes.
pub fn sign_test(negatives: u64, positives: u64) -> f64 {
    let n = negatives + positives;
    if n == 0 {
        return 1.0;
    }
    binomial_two_sided(negatives, n, 0.5).expect("valid sign-test arguments")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point_estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl BootstrapResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Paired percentile bootstrap of `mean(treated) − mean(baseline)`.
///
/// Resample `r` draws from substream `(seed, r)`, so the result does not
/// depend on the thread count.
pub fn paired_bootstrap(
    baseline: &[u8],
    treated: &[u8],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult, StatsError> {
    if baseline.len() != treated.len() {
        return Err(StatsError::LengthMismatch {
            left: baseline.len(),
            right: treated.len(),
        });
    }
    let n = baseline.len();
    if n == 0 {
        return Err(StatsError::TooFewSamples { needed: 1, got: 0 });
    }
    if resamples == 0 {
        return Err(StatsError::InvalidInput("resamples must be positive".into()));
    }
    if baseline.iter().chain(treated).any(|&v| v > 1) {
        return Err(StatsError::InvalidInput("indicators must be 0 or 1".into()));
    }
    let diffs: Vec<i64> = baseline
        .iter()
        .zip(treated)
        .map(|(&b, &t)| i64::from(t) - i64::from(b))
        .collect();
    let point_estimate = diffs.iter().sum::<i64>() as f64 / n as f64;
    let mut deltas: Vec<f64> = if diffs.iter().all(|&d| d == 0) {
        vec![0.0; resamples]
    } else {
        (0..resamples)
            .into_par_iter()
            .map(|r| {
                let mut rng = substream(seed, r as u64);
                let s: i64 = (0..n).map(|_| diffs[rng.gen_range(0..n)]).sum();
                s as f64 / n as f64
            })
            .collect()
    };
    let le = deltas.iter().filter(|&&d| d <= 0.0).count();
    let ge = deltas.iter().filter(|&&d| d >= 0.0).count();
    let b = resamples as f64;
    let p_value = (2.0 * le.min(ge) as f64 / b).clamp((2.0 / b).min(1.0), 1.0);
    deltas.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&deltas, 0.025).unwrap_or(point_estimate);
    let hi = quantile_sorted(&deltas, 0.975).unwrap_or(point_estimate);
    Ok(BootstrapResult {
        point_estimate,
        ci_low: lo.min(point_estimate),
        ci_high: hi.max(point_estimate),
        p_value,
        resamples,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMethod {
    Bonferroni,
    BenjaminiHochberg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub method: CorrectionMethod,
    /// α/m for Bonferroni, q for Benjamini-Hochberg.
    pub threshold_or_level: f64,
    pub rejected: BTreeSet<usize>,
}

/// Rejects hypotheses with p < α/m.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> CorrectionReport {
    let m = p_values.len().max(1);
    let threshold = alpha / m as f64;
    CorrectionReport {
        method: CorrectionMethod::Bonferroni,
        threshold_or_level: threshold,
        rejected: p_values
            .iter()
            .enumerate()
            .filter(|(_, &p)| p < threshold)
            .map(|(i, _)| i)
            .collect(),
    }
}

/// Benjamini-Hochberg step-up: rejects the k smallest p-values, where k is
/// the largest rank with p_(k) ≤ k·q/m.
pub fn benjamini_hochberg(p_values: &[f64], q: f64) -> CorrectionReport {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let passing = order
        .iter()
        .enumerate()
        .filter(|(rank, &i)| p_values[i] <= (rank + 1) as f64 / m as f64 * q)
        .map(|(rank, _)| rank + 1)
        .max()
        .unwrap_or(0);
    CorrectionReport {
        method: CorrectionMethod::BenjaminiHochberg,
        threshold_or_level: q,
        rejected: order[..passing].iter().copied().collect(),
    }
}
