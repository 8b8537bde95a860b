//! Decode-time logit knockouts, pillar categorization and the census.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{DetectionReport, Fingerprint, TokenAggregate};
use crate::gradgeom::expand_dist;
use crate::rng::{derive_seed, mix64};
use crate::stats::{
    benjamini_hochberg, bonferroni, paired_bootstrap, pearson, sign_test, BootstrapResult, CorrectionReport,
    StatsError,
};
use crate::trace::{Corpus, TokenId, TraceError};

#[derive(Debug, Error)]
pub enum KnockoutError {
    #[error("invalid knockout config: {0}")]
    Config(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("token {0} has no row in the {1} table")]
    MissingPredictor(TokenId, &'static str),
    #[error("checkpoint {0:?} carries no dists")]
    MissingDists(String),
    #[error("csv export failed: {0}")]
    Export(String),
}

/// A next-token distribution conditioned on a prompt and the generated prefix.
pub trait DecodingPolicy: Sync {
    fn vocab_size(&self) -> usize;
    fn next_token_probs(&self, prompt: &[TokenId], history: &[TokenId], out: &mut [f64]);
}

/// Mass at or above which a ban counts as starving the distribution.
pub const STARVATION_MASS: f64 = 1.0 - 1e-9;

/// Wraps a policy and forces the logits of `banned` tokens to −∞.
pub struct KnockoutPolicy<'a, P: DecodingPolicy + ?Sized> {
    base: &'a P,
    banned: Vec<TokenId>,
    fallback: TokenId,
    starvation: AtomicU64,
}

impl<'a, P: DecodingPolicy + ?Sized> KnockoutPolicy<'a, P> {
    pub fn new(base: &'a P, banned: &BTreeSet<TokenId>, fallback: TokenId) -> Self {
        Self {
            base,
            banned: banned.iter().copied().collect(),
            fallback,
            starvation: AtomicU64::new(0),
        }
    }

    /// Steps at which the ban removed essentially all mass and the fallback was emitted.
    pub fn starvation_events(&self) -> u64 {
        self.starvation.load(Ordering::Relaxed)
    }
}

impl<P: DecodingPolicy + ?Sized> DecodingPolicy for KnockoutPolicy<'_, P> {
    fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }

    fn next_token_probs(&self, prompt: &[TokenId], history: &[TokenId], out: &mut [f64]) {
        self.base.next_token_probs(prompt, history, out);
        let removed: f64 = self
            .banned
            .iter()
            .filter_map(|&b| out.get(b as usize))
            .sum();
        if removed == 0.0 {
            return;
        }
        if removed >= STARVATION_MASS {
            out.fill(0.0);
            out[self.fallback as usize] = 1.0;
            self.starvation.fetch_add(1, Ordering::Relaxed);
            return;
        }
        for &b in &self.banned {
            if let Some(v) = out.get_mut(b as usize) {
                *v = 0.0;
            }
        }
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= total);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// One binary correctness indicator per prompt.
    pub indicators: Vec<u8>,
    pub starvation_events: u64,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.indicators.is_empty() {
            return 0.0;
        }
        self.indicators.iter().map(|&v| f64::from(v)).sum::<f64>() / self.indicators.len() as f64
    }
}

/// Verifiable task that scores a policy with `banned` tokens knocked out.
///
/// Implementations must draw rollout `r` of prompt `i` from a substream fixed
/// by `(seed, i, r)` so that arms sharing a seed are paired.
pub trait Environment: Sync {
    fn evaluate(&self, banned: &BTreeSet<TokenId>, prompts: usize, rollouts: usize, seed: u64) -> Evaluation;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnockoutCategory {
    StrongPillar,
    Neutral,
    StrongStumbling,
}

impl KnockoutCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            KnockoutCategory::StrongPillar => "strong_pillar",
            KnockoutCategory::Neutral => "neutral",
            KnockoutCategory::StrongStumbling => "strong_stumbling",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnockoutConfig {
    pub prompts: usize,
    pub rollouts: usize,
    pub resamples: usize,
    pub alpha: f64,
    pub epsilon: f64,
    /// Similarity threshold for window companions.
    pub gamma: f64,
    pub bh_q: f64,
    pub seed: u64,
}

impl Default for KnockoutConfig {
    fn default() -> Self {
        Self {
            prompts: 200,
            rollouts: 4,
            resamples: 10_000,
            alpha: 0.05,
            epsilon: 0.01,
            gamma: 0.5,
            bh_q: 0.20,
            seed: 0,
        }
    }
}

impl KnockoutConfig {
    pub fn validate(&self) -> Result<(), KnockoutError> {
        if self.prompts == 0 {
            return Err(KnockoutError::Config("prompts must be positive".into()));
        }
        if self.rollouts == 0 || self.resamples == 0 {
            return Err(KnockoutError::Config("rollouts and resamples must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(KnockoutError::Config(format!("alpha={} outside (0,1)", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutRecord {
    pub candidate: TokenId,
    pub window_set: Vec<TokenId>,
    pub delta_token: f64,
    pub delta_window: f64,
    pub bootstrap_token: BootstrapResult,
    pub bootstrap_window: BootstrapResult,
    pub category: Option<KnockoutCategory>,
    pub epsilon: f64,
    pub baseline: Vec<u8>,
    pub token_arm: Vec<u8>,
    pub window_arm: Vec<u8>,
    pub starvation_events: u64,
}

impl KnockoutRecord {
    /// The arm (token or window) with the smaller bootstrap p-value.
    pub fn deciding_delta(&self) -> f64 {
        if self.bootstrap_window.p_value < self.bootstrap_token.p_value {
            self.delta_window
        } else {
            self.delta_token
        }
    }
}

fn arm_seed(seed: u64, candidate: TokenId, arm: &str) -> u64 {
    derive_seed(mix64(seed ^ u64::from(candidate)), arm)
}

/// Baseline, token-level and window-level arms on shared prompts and seeds,
/// with paired bootstraps of each delta. The category is left unset.
pub fn measure_delta<E: Environment + ?Sized>(
    env: &E,
    baseline: &Evaluation,
    candidate: TokenId,
    window: &BTreeSet<TokenId>,
    config: &KnockoutConfig,
) -> Result<KnockoutRecord, KnockoutError> {
    config.validate()?;
    if baseline.indicators.len() != config.prompts {
        return Err(KnockoutError::Config("baseline evaluated on a different prompt count".into()));
    }
    let token_set: BTreeSet<TokenId> = [candidate].into_iter().collect();
    let mut window_set = window.clone();
    window_set.insert(candidate);
    let tok = env.evaluate(&token_set, config.prompts, config.rollouts, config.seed);
    let win = if window_set == token_set {
        tok.clone()
    } else {
        env.evaluate(&window_set, config.prompts, config.rollouts, config.seed)
    };
    let bt = paired_bootstrap(
        &baseline.indicators,
        &tok.indicators,
        config.resamples,
        arm_seed(config.seed, candidate, "token"),
    )?;
    let bw = paired_bootstrap(
        &baseline.indicators,
        &win.indicators,
        config.resamples,
        arm_seed(config.seed, candidate, "window"),
    )?;
    Ok(KnockoutRecord {
        candidate,
        window_set: window_set.into_iter().collect(),
        delta_token: bt.point_estimate,
        delta_window: bw.point_estimate,
        bootstrap_token: bt,
        bootstrap_window: bw,
        category: None,
        epsilon: config.epsilon,
        baseline: baseline.indicators.clone(),
        token_arm: tok.indicators,
        window_arm: win.indicators,
        starvation_events: tok.starvation_events + win.starvation_events,
    })
}

/// Strong pillar if some arm has Δ ≤ −ε and its bootstrap rejects at α;
/// strong stumbling block symmetrically at +ε; neutral otherwise.
pub fn categorize(record: &KnockoutRecord, epsilon: f64, alpha: f64) -> KnockoutCategory {
    let arms = [
        (record.delta_token, &record.bootstrap_token),
        (record.delta_window, &record.bootstrap_window),
    ];
    if arms.iter().any(|(d, b)| *d <= -epsilon && b.rejects(alpha)) {
        KnockoutCategory::StrongPillar
    } else if arms.iter().any(|(d, b)| *d >= epsilon && b.rejects(alpha)) {
        KnockoutCategory::StrongStumbling
    } else {
        KnockoutCategory::Neutral
    }
}

/// Candidates from `pool` whose rock-occurrence contexts overlap those of
/// `candidate` at similarity ≥ γ.
pub fn window_companions(
    corpus: &Corpus,
    report: &DetectionReport,
    candidate: TokenId,
    pool: &[TokenId],
    gamma: f64,
) -> BTreeSet<TokenId> {
    let w = report.config.w;
    let index: BTreeMap<u64, usize> = corpus
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| (t.trajectory_id, i))
        .collect();
    let mut prints: BTreeMap<TokenId, BTreeSet<Vec<(TokenId, u32)>>> = BTreeMap::new();
    for o in &report.rock_occurrences {
        if o.token != candidate && !pool.contains(&o.token) {
            continue;
        }
        if let Some(&i) = index.get(&o.trajectory_id) {
            let fp = Fingerprint::at(&corpus.trajectories[i].tokens, o.position, w);
            prints.entry(o.token).or_default().insert(fp.0);
        }
    }
    let Some(own) = prints.get(&candidate) else {
        return BTreeSet::new();
    };
    let own: Vec<Fingerprint> = own.iter().cloned().map(Fingerprint).collect();
    pool.iter()
        .filter(|&&u| u != candidate)
        .filter(|u| {
            prints.get(u).is_some_and(|theirs| {
                theirs.iter().any(|fp| {
                    let fp = Fingerprint(fp.clone());
                    own.iter().any(|o| o.similarity(&fp) >= gamma)
                })
            })
        })
        .copied()
        .collect()
}

/// Measures and categorizes every candidate against one shared baseline.
pub fn run_knockouts<E: Environment + ?Sized>(
    env: &E,
    candidates: &[TokenId],
    windows: &BTreeMap<TokenId, BTreeSet<TokenId>>,
    config: &KnockoutConfig,
) -> Result<(Evaluation, Vec<KnockoutRecord>), KnockoutError> {
    config.validate()?;
    let baseline = env.evaluate(&BTreeSet::new(), config.prompts, config.rollouts, config.seed);
    let empty = BTreeSet::new();
    let records = candidates
        .par_iter()
        .map(|&c| {
            let mut r = measure_delta(env, &baseline, c, windows.get(&c).unwrap_or(&empty), config)?;
            r.category = Some(categorize(&r, config.epsilon, config.alpha));
            Ok(r)
        })
        .collect::<Result<Vec<_>, KnockoutError>>()?;
    Ok((baseline, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignSplit {
    pub negatives: u64,
    pub positives: u64,
    pub p_value: f64,
}

impl SignSplit {
    fn from_records<'a>(records: impl Iterator<Item = &'a KnockoutRecord>) -> Self {
        let (mut negatives, mut positives) = (0, 0);
        for r in records {
            match r.category {
                Some(KnockoutCategory::StrongPillar) => negatives += 1,
                Some(KnockoutCategory::StrongStumbling) => positives += 1,
                _ => {}
            }
        }
        Self {
            negatives,
            positives,
            p_value: sign_test(negatives, positives),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub category: KnockoutCategory,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorRow {
    pub predictor: String,
    pub r: Option<f64>,
    pub p: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusReport {
    pub n_candidates: usize,
    pub categories: Vec<CategoryCount>,
    pub baseline_accuracy: f64,
    /// Signs of the strong (rejecting) candidates.
    pub sign_split: SignSplit,
    pub bonferroni: CorrectionReport,
    pub benjamini_hochberg: CorrectionReport,
    pub correlations: Vec<PredictorRow>,
    pub core_size: usize,
    pub stable_core: SignSplit,
}

impl CensusReport {
    pub fn count(&self, c: KnockoutCategory) -> usize {
        self.categories.iter().find(|x| x.category == c).map_or(0, |x| x.count)
    }
}

/// Category counts, the sign-asymmetry test, Bonferroni and BH over the
/// token-level p-values, and the sign test restricted to `core_set`.
pub fn census(
    records: &[KnockoutRecord],
    core_set: &BTreeSet<TokenId>,
    alpha: f64,
    bh_q: f64,
) -> Result<CensusReport, KnockoutError> {
    if records.is_empty() {
        return Err(KnockoutError::Config("census needs at least one record".into()));
    }
    let n = records.len();
    let categories = [
        KnockoutCategory::StrongPillar,
        KnockoutCategory::Neutral,
        KnockoutCategory::StrongStumbling,
    ]
    .into_iter()
    .map(|c| {
        let count = records.iter().filter(|r| r.category == Some(c)).count();
        CategoryCount {
            category: c,
            count,
            fraction: count as f64 / n as f64,
        }
    })
    .collect();
    let baseline = &records[0].baseline;
    let baseline_accuracy = baseline.iter().map(|&v| f64::from(v)).sum::<f64>() / baseline.len().max(1) as f64;
    let p: Vec<f64> = records.iter().map(|r| r.bootstrap_token.p_value).collect();
    Ok(CensusReport {
        n_candidates: n,
        categories,
        baseline_accuracy,
        sign_split: SignSplit::from_records(records.iter()),
        bonferroni: bonferroni(&p, alpha),
        benjamini_hochberg: benjamini_hochberg(&p, bh_q),
        correlations: Vec::new(),
        core_size: records.iter().filter(|r| core_set.contains(&r.candidate)).count(),
        stable_core: SignSplit::from_records(records.iter().filter(|r| core_set.contains(&r.candidate))),
    })
}

/// Mean entropies at a token's positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenEntropy {
    pub teacher: f64,
    pub student_pre: f64,
    pub student_post: f64,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Mean teacher entropy (at `post`) and student entropies at both checkpoints
/// for every token type, from stored dists.
pub fn entropy_table(corpus: &Corpus, pre: &str, post: &str) -> Result<BTreeMap<TokenId, TokenEntropy>, KnockoutError> {
    let v = corpus.vocabulary.size();
    let mut acc: BTreeMap<TokenId, (f64, f64, f64, u64)> = BTreeMap::new();
    for traj in &corpus.trajectories {
        let dp = traj.dists_at(pre).ok_or_else(|| KnockoutError::MissingDists(pre.into()))?;
        let dq = traj.dists_at(post).ok_or_else(|| KnockoutError::MissingDists(post.into()))?;
        for (t, &tok) in traj.tokens.iter().enumerate() {
            let e = acc.entry(tok).or_insert((0.0, 0.0, 0.0, 0));
            e.0 += entropy(&expand_dist(&dq[t].teacher, v));
            e.1 += entropy(&expand_dist(&dp[t].student, v));
            e.2 += entropy(&expand_dist(&dq[t].student, v));
            e.3 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(tok, (a, b, c, n))| {
            let n = n as f64;
            (
                tok,
                TokenEntropy {
                    teacher: a / n,
                    student_pre: b / n,
                    student_post: c / n,
                },
            )
        })
        .collect())
}

pub const PREDICTORS: [&str; 9] = [
    "frequency",
    "rock_count",
    "rock_rate",
    "pre_kl",
    "post_kl",
    "kl_improvement",
    "teacher_entropy",
    "student_entropy_pre",
    "student_entropy_post",
];

/// Predictor values for one candidate, in [`PREDICTORS`] order.
pub fn predictor_values(a: &TokenAggregate, e: &TokenEntropy) -> [f64; 9] {
    [
        a.freq as f64,
        a.rock_occurrences as f64,
        a.ccr,
        a.mean_loss_pre,
        a.mean_loss_post,
        a.mean_loss_pre - a.mean_loss_post,
        e.teacher,
        e.student_pre,
        e.student_post,
    ]
}

/// Pearson (r, p) of Δ_token against each predictor.
pub fn predictor_table(
    records: &[KnockoutRecord],
    aggregates: &[TokenAggregate],
    entropies: &BTreeMap<TokenId, TokenEntropy>,
) -> Result<Vec<PredictorRow>, KnockoutError> {
    let by_id: BTreeMap<TokenId, &TokenAggregate> = aggregates.iter().map(|a| (a.token_id, a)).collect();
    let mut columns = vec![Vec::with_capacity(records.len()); PREDICTORS.len()];
    let mut deltas = Vec::with_capacity(records.len());
    for r in records {
        let a = by_id
            .get(&r.candidate)
            .ok_or(KnockoutError::MissingPredictor(r.candidate, "aggregate"))?;
        let e = entropies
            .get(&r.candidate)
            .ok_or(KnockoutError::MissingPredictor(r.candidate, "entropy"))?;
        for (col, v) in columns.iter_mut().zip(predictor_values(a, e)) {
            col.push(v);
        }
        deltas.push(r.delta_token);
    }
    Ok(PREDICTORS
        .iter()
        .zip(&columns)
        .map(|(name, col)| match pearson(col, &deltas) {
            Ok(c) => PredictorRow {
                predictor: name.to_string(),
                r: Some(c.r),
                p: Some(c.p),
                error: None,
            },
            Err(e) => PredictorRow {
                predictor: name.to_string(),
                r: None,
                p: None,
                error: Some(e.to_string()),
            },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullCalibration {
    pub candidates: usize,
    pub strong_pillars: usize,
    pub strong_stumbling: usize,
    pub pillar_rate: f64,
}

/// False-positive calibration: each phantom candidate's knockout arm is
/// evaluated on rollouts independent of the baseline's, so any rejection is
/// a chance event.
pub fn null_calibration<E: Environment + ?Sized>(
    env: &E,
    phantoms: &[TokenId],
    config: &KnockoutConfig,
) -> Result<NullCalibration, KnockoutError> {
    config.validate()?;
    let baseline = env.evaluate(&BTreeSet::new(), config.prompts, config.rollouts, config.seed);
    let cats = (0..phantoms.len())
        .into_par_iter()
        .map(|i| {
            let c = phantoms[i];
            let banned: BTreeSet<TokenId> = [c].into_iter().collect();
            let arm_seed_i = derive_seed(config.seed, &format!("null-arm-{i}"));
            let arm = env.evaluate(&banned, config.prompts, config.rollouts, arm_seed_i);
            let b = paired_bootstrap(
                &baseline.indicators,
                &arm.indicators,
                config.resamples,
                derive_seed(config.seed, &format!("null-boot-{i}")),
            )?;
            let rec = KnockoutRecord {
                candidate: c,
                window_set: vec![c],
                delta_token: b.point_estimate,
                delta_window: b.point_estimate,
                bootstrap_token: b.clone(),
                bootstrap_window: b,
                category: None,
                epsilon: config.epsilon,
                baseline: Vec::new(),
                token_arm: Vec::new(),
                window_arm: Vec::new(),
                starvation_events: arm.starvation_events,
            };
            Ok(categorize(&rec, config.epsilon, config.alpha))
        })
        .collect::<Result<Vec<_>, KnockoutError>>()?;
    let strong_pillars = cats.iter().filter(|&&c| c == KnockoutCategory::StrongPillar).count();
    let strong_stumbling = cats.iter().filter(|&&c| c == KnockoutCategory::StrongStumbling).count();
    Ok(NullCalibration {
        candidates: phantoms.len(),
        strong_pillars,
        strong_stumbling,
        pillar_rate: strong_pillars as f64 / phantoms.len().max(1) as f64,
    })
}

/// Per-candidate records as CSV.
pub fn write_records_csv(records: &[KnockoutRecord], path: &Path) -> Result<(), KnockoutError> {
    let mut text = String::from(
        "candidate,delta_token,delta_window,p_token,p_window,ci_low_token,ci_high_token,category,window_size,starvation_events\n",
    );
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.candidate,
            r.delta_token,
            r.delta_window,
            r.bootstrap_token.p_value,
            r.bootstrap_window.p_value,
            r.bootstrap_token.ci_low,
            r.bootstrap_token.ci_high,
            r.category.map_or("", |c| c.as_str()),
            r.window_set.len(),
            r.starvation_events
        ));
    }
    std::fs::write(path, text).map_err(|e| KnockoutError::Export(e.to_string()))
}
