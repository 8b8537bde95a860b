//! The pipeline stages. Each reads prior outputs from the run directory
//! (or explicit paths), writes into its own subdirectory and returns the
//! seed it used.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rocktoken::cutoff::{choose_k, stability_sweep, KChoice, SweepConfig, SweepResult};
use rocktoken::detect::{select_rock_tokens, DetectionReport};
use rocktoken::gradgeom::{compare_groups, persistence_analysis, select_groups, summarize_gradients, Group};
use rocktoken::knockout::{
    census, entropy_table, null_calibration, predictor_table, predictor_values, run_knockouts, window_companions,
    write_records_csv, CensusReport, KnockoutError, KnockoutRecord, NullCalibration, PREDICTORS,
};
use rocktoken::reweight::{
    aggregate_masked_fraction, build_mask, freq_matched_random_windows, load_masks, plain_loss, rock_windows,
    weighted_loss, write_masks, Regime, WindowSet,
};
use rocktoken::simlab::{
    build_world, optimizer_suppression_probe, rollout, task, train, Baseline, FixedMasks, OptimizerConfig,
    OptimizerKind, RockFreeze, RolloutSource, SimConfig, SimEnvironment, SimWorld, TrainLog,
};
use rocktoken::trace::{load_corpus, write_corpus, write_vocabulary, Corpus, TokenId};
use serde::{Deserialize, Serialize};

use crate::config::TrainSource;
use crate::error::CliError;
use crate::run::Stage;

/// Explicit input paths; each defaults to the matching prior-stage output.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Inputs {
    /// Trace file (default: <run>/simulate/trace.jsonl)
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Vocabulary file (default: vocab.json next to the trace)
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Detection report (default: <run>/detect/report.json)
    #[arg(long)]
    pub detection: Option<PathBuf>,
}

fn timed<T>(label: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    eprintln!("{label}: {:.2}s", t.elapsed().as_secs_f64());
    out
}

fn load_trace(stage: &mut Stage, inputs: &Inputs) -> Result<Corpus, CliError> {
    let trace = inputs.trace.clone().unwrap_or_else(|| stage.prior("simulate", "trace.jsonl"));
    let vocab = inputs.vocab.clone().unwrap_or_else(|| trace.with_file_name("vocab.json"));
    stage.input(&trace)?;
    stage.input(&vocab)?;
    Ok(load_corpus(&trace, &vocab)?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn load_detection(stage: &mut Stage, inputs: &Inputs) -> Result<DetectionReport, CliError> {
    let p = inputs.detection.clone().unwrap_or_else(|| stage.prior("detect", "report.json"));
    stage.input(&p)?;
    read_json(&p)
}

fn export<E>(r: Result<(), E>) -> Result<(), CliError>
where
    CliError: From<E>,
{
    r.map_err(CliError::from)
}

/// Builds the world from `config` and runs its baseline online training.
pub fn trained_world(config: &SimConfig) -> Result<(SimWorld, TrainLog, Vec<rocktoken::simlab::Checkpoint>), CliError> {
    config.validate()?;
    let mut world = build_world(config)?;
    let out = train(&mut world, RolloutSource::Online, &Baseline)?;
    Ok((world, out.log, out.checkpoints))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub trajectories: usize,
    pub positions: usize,
    pub checkpoints: Vec<String>,
    pub planted_rock_tokens: Vec<TokenId>,
    pub planted_pillar_token: Option<TokenId>,
    pub final_mean_kl: f64,
}

pub fn simulate(stage: &mut Stage) -> Result<Option<u64>, CliError> {
    let cfg = stage.resolved.config.simulate.clone();
    let (world, log, checkpoints) = timed("train", || trained_world(&cfg))?;
    let corpus = timed("rollout", || {
        rollout(&world, &checkpoints, cfg.prompts, cfg.rollouts_per_prompt, cfg.seed)
    })?;
    export(write_corpus(&corpus, &stage.output("trace.jsonl")))?;
    export(write_vocabulary(&corpus.vocabulary, &stage.output("vocab.json")))?;
    export(log.write_csv(&stage.output("train_log.csv")))?;
    export(log.write_token_kl_csv(&stage.output("token_kl.csv")))?;
    let summary = SimulateSummary {
        trajectories: corpus.trajectories.len(),
        positions: corpus.total_positions(),
        checkpoints: corpus.checkpoints.clone(),
        planted_rock_tokens: cfg.planted_rock_tokens.clone(),
        planted_pillar_token: cfg.planted_pillar_token,
        final_mean_kl: log.steps.last().map_or(0.0, |s| s.mean_kl),
    };
    stage.write_json("summary.json", &summary)?;
    Ok(Some(cfg.seed))
}

pub fn detect(stage: &mut Stage, inputs: &Inputs) -> Result<Option<u64>, CliError> {
    let cfg = stage.resolved.config.detect.clone();
    let corpus = load_trace(stage, inputs)?;
    let report = timed("detect", || select_rock_tokens(&corpus, &cfg))?;
    stage.write_json("report.json", &report)?;
    export(report.write_token_csv(&stage.output("tokens.csv")))?;
    export(report.write_density_csv(&stage.output("density.csv")))?;
    Ok(Some(cfg.seed))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepOutput {
    pub result: SweepResult,
    pub choice: KChoice,
}

pub fn sweep(stage: &mut Stage, inputs: &Inputs) -> Result<Option<u64>, CliError> {
    let c = &stage.resolved.config;
    let s = c.sweep.clone();
    let detect_cfg = c.detect.clone();
    let corpus = load_trace(stage, inputs)?;
    let n = corpus.trajectories.len();
    if let Some(f) = s.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(CliError::Validation(format!("sweep.fractions entry {f} outside (0,1]")));
    }
    let mut sizes: Vec<usize> = s
        .fractions
        .iter()
        .map(|f| ((f * n as f64).round() as usize).clamp(1, n.max(1)))
        .collect();
    sizes.dedup();
    let cfg = SweepConfig {
        sizes,
        ks: s.ks.clone(),
        repeats: s.repeats,
        seed: s.seed,
        basis: s.basis,
    };
    let result = timed("sweep", || stability_sweep(&corpus, &detect_cfg, &cfg))?;
    let choice = choose_k(&result, s.min_jaccard, s.min_coverage)?;
    export(result.write_jaccard_csv(&stage.output("jaccard.csv")))?;
    export(result.write_coverage_csv(&stage.output("coverage.csv")))?;
    stage.write_json("sweep.json", &SweepOutput { result, choice })?;
    Ok(Some(s.seed))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub group_a: Group,
    pub group_b: Group,
    pub result: Option<rocktoken::gradgeom::GroupComparison>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GradgeomOutput {
    pub groups: BTreeMap<TokenId, Group>,
    pub gradients: rocktoken::gradgeom::GradientSummary,
    pub comparisons: Vec<Comparison>,
    pub persistence: rocktoken::gradgeom::PersistenceReport,
}

pub fn gradgeom(stage: &mut Stage, inputs: &Inputs) -> Result<Option<u64>, CliError> {
    let g = stage.resolved.config.gradgeom.clone();
    let corpus = load_trace(stage, inputs)?;
    let report = load_detection(stage, inputs)?;
    let groups = select_groups(&corpus, &report, &g.groups())?;
    let gradients = timed("gradients", || summarize_gradients(&corpus, &g.checkpoint, &groups))?;
    let comparisons = [(Group::Rock, Group::RareHighKl), (Group::Rock, Group::RandomControl)]
        .into_iter()
        .map(|(a, b)| match compare_groups(&gradients, a, b) {
            Ok(r) => Comparison {
                group_a: a,
                group_b: b,
                result: Some(r),
                error: None,
            },
            Err(e) => Comparison {
                group_a: a,
                group_b: b,
                result: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let persistence = persistence_analysis(&corpus, &g.early, &g.late, &groups)?;
    export(gradients.write_csv(&stage.output("gradients.csv")))?;
    export(persistence.write_csv(&stage.output("persistence.csv")))?;
    stage.write_json(
        "gradgeom.json",
        &GradgeomOutput {
            groups,
            gradients,
            comparisons,
            persistence,
        },
    )?;
    Ok(Some(g.seed))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateSelection {
    pub core_k: usize,
    pub core_k_source: String,
    pub pool: Vec<TokenId>,
    pub core_set: Vec<TokenId>,
    pub windows: BTreeMap<TokenId, BTreeSet<TokenId>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictorPoint {
    pub candidate: TokenId,
    pub delta_token: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KnockoutOutput {
    pub selection: CandidateSelection,
    pub census: CensusReport,
    pub predictor_points: Option<Vec<PredictorPoint>>,
    pub predictor_note: Option<String>,
    pub null_calibration: Option<NullCalibration>,
    pub records: Vec<KnockoutRecord>,
}

pub fn fig4_csv(records: &[KnockoutRecord], corpus_surface: &dyn Fn(TokenId) -> String) -> String {
    let mut rows: Vec<&KnockoutRecord> = records.iter().collect();
    rows.sort_by(|a, b| a.deciding_delta().total_cmp(&b.deciding_delta()).then(a.candidate.cmp(&b.candidate)));
    let mut text = String::from("candidate,surface,delta_token,delta_window,delta,category\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.candidate,
            csv_field(&corpus_surface(r.candidate)),
            r.delta_token,
            r.delta_window,
            r.deciding_delta(),
            r.category.map_or("unset", |c| c.as_str())
        ));
    }
    text
}

pub fn fig5_csv(points: &[PredictorPoint]) -> String {
    let mut text = String::from("candidate,delta_token");
    for p in PREDICTORS {
        text.push(',');
        text.push_str(p);
    }
    text.push('\n');
    for p in points {
        text.push_str(&format!("{},{}", p.candidate, p.delta_token));
        for v in &p.values {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    text
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn knockout(stage: &mut Stage, inputs: &Inputs, sweep: Option<&Path>) -> Result<Option<u64>, CliError> {
    let c = stage.resolved.config.clone();
    let ko = &c.knockout;
    let cfg = ko.knockout_config();
    cfg.validate()?;
    let corpus = load_trace(stage, inputs)?;
    let report = load_detection(stage, inputs)?;
    if corpus.vocabulary.size() != c.simulate.vocab_size {
        return Err(CliError::Validation(format!(
            "knockout evaluates the simulator, but the trace vocabulary has {} tokens and simulate.vocab_size is {}",
            corpus.vocabulary.size(),
            c.simulate.vocab_size
        )));
    }

    let sweep_path = sweep.map(Path::to_path_buf).unwrap_or_else(|| stage.prior("sweep", "sweep.json"));
    let (core_k, source) = match ko.core_k {
        Some(k) => (k, "config".to_string()),
        None if sweep.is_some() || sweep_path.is_file() => {
            stage.input(&sweep_path)?;
            let s: SweepOutput = read_json(&sweep_path)?;
            (s.choice.k, "sweep".to_string())
        }
        None => (report.rock_set.len(), "rock_set".to_string()),
    };
    let core_k = core_k.max(1);
    let ranking = report.ranking();
    let pool: Vec<TokenId> = ranking.iter().take(ko.pool.unwrap_or(2 * core_k)).copied().collect();
    let core_set: Vec<TokenId> = ranking.iter().take(core_k).copied().collect();
    let windows: BTreeMap<TokenId, BTreeSet<TokenId>> = pool
        .iter()
        .map(|&v| (v, window_companions(&corpus, &report, v, &pool, ko.gamma)))
        .collect();

    let (world, _, _) = timed("train", || trained_world(&c.simulate))?;
    let env = SimEnvironment::new(&world);
    let (_, records) = timed("knockouts", || run_knockouts(&env, &pool, &windows, &cfg))?;
    let core: BTreeSet<TokenId> = core_set.iter().copied().collect();
    let mut census_report = census(&records, &core, cfg.alpha, cfg.bh_q)?;

    let aggregates = &report.tokens;
    let (predictor_points, predictor_note) = match entropy_table(&corpus, &report.config.pre, &report.config.post) {
        Ok(ent) => {
            census_report.correlations = predictor_table(&records, aggregates, &ent)?;
            let by_id: BTreeMap<TokenId, _> = aggregates.iter().map(|a| (a.token_id, a)).collect();
            let points: Vec<PredictorPoint> = records
                .iter()
                .map(|r| PredictorPoint {
                    candidate: r.candidate,
                    delta_token: r.delta_token,
                    values: predictor_values(by_id[&r.candidate], &ent[&r.candidate]).to_vec(),
                })
                .collect();
            (Some(points), None)
        }
        Err(KnockoutError::MissingDists(ck)) => (None, Some(format!("checkpoint {ck:?} carries no distributions"))),
        Err(e) => return Err(e.into()),
    };

    let null = if ko.null_candidates > 0 {
        let phantoms: Vec<TokenId> = task::phantom_tokens(world.vocab_size).collect();
        let ids: Vec<TokenId> = (0..ko.null_candidates).map(|i| phantoms[i % phantoms.len()]).collect();
        Some(timed("null calibration", || null_calibration(&env, &ids, &cfg))?)
    } else {
        None
    };

    export(write_records_csv(&records, &stage.output("records.csv")))?;
    let surface = |t: TokenId| corpus.vocabulary.surface(t).unwrap_or("").to_string();
    stage.write("fig4_knockout.csv", fig4_csv(&records, &surface))?;
    if let Some(points) = &predictor_points {
        stage.write("fig5_predictors.csv", fig5_csv(points))?;
    }
    stage.write_json(
        "knockout.json",
        &KnockoutOutput {
            selection: CandidateSelection {
                core_k,
                core_k_source: source,
                pool,
                core_set,
                windows,
            },
            census: census_report,
            predictor_points,
            predictor_note,
            null_calibration: null,
            records,
        },
    )?;
    Ok(Some(cfg.seed))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskSummary {
    pub regime: Regime,
    pub lambda: f64,
    pub radius: usize,
    pub checkpoint: String,
    pub rock_set: Vec<TokenId>,
    pub windows: usize,
    pub covered_positions: usize,
    pub total_positions: usize,
    pub masked_fraction: f64,
    pub window_length_histogram: BTreeMap<usize, usize>,
    pub center_bucket_histogram: BTreeMap<u32, usize>,
    pub plain_loss: f64,
    pub weighted_loss: f64,
    pub active_terms: u64,
}

pub fn mask(
    stage: &mut Stage,
    inputs: &Inputs,
    regime: Option<Regime>,
    lambda: Option<f64>,
) -> Result<Option<u64>, CliError> {
    let c = stage.resolved.config.clone();
    let mut m = c.mask.clone();
    if let Some(r) = regime {
        m.regime = r;
    }
    if lambda.is_some() {
        m.lambda = lambda;
    }
    let lam = m.effective_lambda();
    let corpus = load_trace(stage, inputs)?;
    let report = load_detection(stage, inputs)?;
    let radius = m.radius.unwrap_or(report.config.w);
    let rocks = report.rock_set();
    let reference = rock_windows(&corpus, &report, radius);
    let (windows, selected) = match m.regime {
        Regime::Baseline => (WindowSet::default(), BTreeSet::new()),
        Regime::RockFreeze => (reference, rocks.clone()),
        Regime::FreqMatchedRandom => (
            timed("control windows", || freq_matched_random_windows(&corpus, &reference, &rocks, m.seed))?,
            BTreeSet::new(),
        ),
    };
    let masks = build_mask(&corpus, &selected, &windows, lam, m.regime)?;
    let wl = weighted_loss(&corpus, &masks, &m.checkpoint)?;
    let summary = MaskSummary {
        regime: m.regime,
        lambda: lam,
        radius,
        checkpoint: m.checkpoint.clone(),
        rock_set: report.rock_set.clone(),
        windows: windows.intervals().count(),
        covered_positions: windows.covered_positions(),
        total_positions: corpus.total_positions(),
        masked_fraction: aggregate_masked_fraction(&masks),
        window_length_histogram: windows.length_histogram(),
        center_bucket_histogram: windows.center_bucket_histogram(&corpus),
        plain_loss: plain_loss(&corpus, &m.checkpoint)?,
        weighted_loss: wl.total,
        active_terms: wl.active_term_count,
    };
    export(write_masks(&masks, &stage.output("masks.jsonl")))?;
    stage.write_json("summary.json", &summary)?;
    Ok(Some(m.seed))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub source: TrainSource,
    pub regime: Regime,
    pub lambda: f64,
    pub steps: usize,
    pub total_positions: u64,
    pub total_active_terms: u64,
    pub active_fraction: f64,
    pub initial_mean_kl: f64,
    pub final_mean_kl: f64,
    pub planted_median_kl: BTreeMap<String, f64>,
}

pub fn train_stage(stage: &mut Stage, inputs: &Inputs, masks: Option<&Path>) -> Result<Option<u64>, CliError> {
    let c = stage.resolved.config.clone();
    let t = &c.train;
    c.simulate.validate()?;
    let mut world = build_world(&c.simulate)?;
    let (outcome, regime, lambda) = match t.source {
        TrainSource::Replay => {
            let corpus = load_trace(stage, inputs)?;
            let path = masks.map(Path::to_path_buf).unwrap_or_else(|| stage.prior("mask", "masks.jsonl"));
            let (provider, regime, lambda) = if masks.is_some() || path.is_file() {
                stage.input(&path)?;
                let loaded = load_masks(&path)?;
                let regime = loaded.first().map_or(Regime::Baseline, |m| m.regime);
                let lambda = loaded.first().map_or(1.0, |m| m.lambda);
                (FixedMasks(loaded.into_iter().map(|m| (m.trajectory_id, m.weights)).collect()), regime, lambda)
            } else {
                (FixedMasks(BTreeMap::new()), Regime::Baseline, 1.0)
            };
            let out = timed("train", || train(&mut world, RolloutSource::Corpus(&corpus), &provider))?;
            (out, regime, lambda)
        }
        TrainSource::Online => {
            let report = load_detection(stage, inputs)?;
            let lambda = c.mask.effective_lambda();
            let (out, regime) = match c.mask.regime {
                Regime::Baseline => (timed("train", || train(&mut world, RolloutSource::Online, &Baseline))?, Regime::Baseline),
                Regime::RockFreeze => {
                    let provider = RockFreeze {
                        rock_set: report.rock_set(),
                        radius: c.mask.radius.unwrap_or(report.config.w),
                        lambda,
                    };
                    (timed("train", || train(&mut world, RolloutSource::Online, &provider))?, Regime::RockFreeze)
                }
                Regime::FreqMatchedRandom => {
                    return Err(CliError::Validation(
                        "mask.regime = freq_matched_random needs train.source = replay".into(),
                    ))
                }
            };
            (out, regime, lambda)
        }
    };
    let log = &outcome.log;
    export(log.write_csv(&stage.output("train_log.csv")))?;
    export(log.write_token_kl_csv(&stage.output("token_kl.csv")))?;
    let planted: BTreeSet<TokenId> = c.simulate.planted_rock_tokens.iter().copied().collect();
    let planted_median_kl = log
        .checkpoints
        .iter()
        .map(|ck| {
            let v: Vec<f64> = ck.per_token.iter().filter(|(t, _)| planted.contains(t)).map(|p| p.1).collect();
            (ck.name.clone(), rocktoken::numeric::median(&v).unwrap_or(0.0))
        })
        .collect();
    let total = log.total_positions();
    let summary = TrainSummary {
        source: t.source,
        regime,
        lambda,
        steps: log.steps.len(),
        total_positions: total,
        total_active_terms: log.total_active_terms(),
        active_fraction: if total == 0 { 0.0 } else { log.total_active_terms() as f64 / total as f64 },
        initial_mean_kl: log.steps.first().map_or(0.0, |s| s.mean_kl),
        final_mean_kl: log.steps.last().map_or(0.0, |s| s.mean_kl),
        planted_median_kl,
    };
    stage.write_json("summary.json", &summary)?;
    if t.optimizer_probe {
        let sgd = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: t.probe_sgd_learning_rate,
            ..c.simulate.optimizer.clone()
        };
        let adam = OptimizerConfig {
            kind: OptimizerKind::AdaptiveMoment,
            learning_rate: t.probe_adam_learning_rate,
            ..c.simulate.optimizer.clone()
        };
        let probe = timed("optimizer probe", || optimizer_suppression_probe(&c.simulate, &[sgd, adam]))?;
        stage.write_json("optimizer_probe.json", &probe)?;
    }
    Ok(Some(c.simulate.seed))
}
