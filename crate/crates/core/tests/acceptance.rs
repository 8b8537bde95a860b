//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use rocktoken::cutoff::{choose_k, stability_sweep, RankBasis, SweepConfig, SweepResult};
use rocktoken::detect::{aggregate_scores, select_rock_tokens, DetectionConfig, DetectionReport, Threshold};
use rocktoken::gradgeom::{
    expand_dist, persistence_analysis, reverse_kl, reverse_kl_logit_gradient, select_groups, summarize_gradients,
    Group, GroupConfig,
};
use rocktoken::knockout::{
    measure_delta, null_calibration, run_knockouts, window_companions, Environment, KnockoutConfig,
};
use rocktoken::numeric::dot;
use rocktoken::reweight::{
    aggregate_masked_fraction, build_mask, freq_matched_random_windows, plain_loss, rock_windows, weighted_loss,
    write_masks, Regime,
};
use rocktoken::rng::{derive_seed, substream};
use rocktoken::simlab::{
    build_world, rollout, task, train, Baseline, RockFreeze, RolloutSource, SimConfig, SimEnvironment, SimWorld,
};
use rocktoken::stats::{benjamini_hochberg, binomial_two_sided, bonferroni, paired_bootstrap, sign_test};
use rocktoken::trace::{load_corpus, write_corpus, Corpus, TokenId, TrajectoryTrace, Vocabulary};

const GOLDEN_TRACE_SHA256: &str = "a212695d8649b151fcd78444160700e956bbe84f3c35a31527c942acc5e1955f";

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn data(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn golden() -> Corpus {
    load_corpus(&data("golden_trace.jsonl"), &data("golden_vocab.json")).expect("golden corpus loads")
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// The default simulator after online baseline training, with its trace.
struct Trained {
    config: SimConfig,
    world: SimWorld,
    corpus: Corpus,
    report: DetectionReport,
}

fn trained_default() -> Trained {
    let config = SimConfig::default();
    let mut world = build_world(&config).unwrap();
    let out = train(&mut world, RolloutSource::Online, &Baseline).unwrap();
    let corpus = rollout(&world, &out.checkpoints, config.prompts, config.rollouts_per_prompt, config.seed).unwrap();
    let report = select_rock_tokens(&corpus, &DetectionConfig::default()).unwrap();
    Trained {
        config,
        world,
        corpus,
        report,
    }
}

fn c1_exact_statistics() -> Outcome {
    let ps: Vec<f64> = (0..200).map(|i| 0.0016 + 0.004 * i as f64).collect();
    let bonf = bonferroni(&ps, 0.05);
    let bh = benjamini_hochberg(&ps, 0.20);
    let b10 = sign_test(10, 0);
    let b7 = sign_test(7, 0);
    let b6 = sign_test(6, 0);
    let ok = bonf.threshold_or_level == 2.5e-4
        && bh.rejected.is_empty()
        && b10 == 0.001953125
        && b7 == 0.015625
        && b6 == 0.03125
        && binomial_two_sided(0, 10, 0.5) == Ok(0.001953125);
    check(
        ok,
        format!(
            "bonferroni {:e}, BH rejections {}, binomial 10:0 {b10}, 7:0 {b7}, 6:0 {b6}",
            bonf.threshold_or_level,
            bh.rejected.len()
        ),
    )
}

fn c2_gradient_oracle() -> Outcome {
    let h = 1e-5;
    let mut max_err: f64 = 0.0;
    let mut max_sum: f64 = 0.0;
    for case in 0..100u64 {
        let mut rng = substream(derive_seed(2, "gradient-oracle"), case);
        let zs: Vec<f64> = (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let zt: Vec<f64> = (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let q = softmax(&zt);
        let g = reverse_kl_logit_gradient(&softmax(&zs), &q).unwrap();
        max_sum = max_sum.max(g.iter().sum::<f64>().abs());
        for i in 0..32 {
            let mut up = zs.clone();
            let mut dn = zs.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (reverse_kl(&softmax(&up), &q).unwrap() - reverse_kl(&softmax(&dn), &q).unwrap()) / (2.0 * h);
            max_err = max_err.max((fd - g[i]).abs());
        }
    }
    check(
        max_err < 1e-6 && max_sum < 1e-9,
        format!("max |g - fd| {max_err:.2e}, max |sum g| {max_sum:.2e}"),
    )
}

fn c3_decomposition(corpus: &Corpus) -> Outcome {
    let groups: BTreeMap<TokenId, Group> = corpus
        .trajectories
        .iter()
        .flat_map(|t| t.tokens.iter())
        .map(|&t| (t, Group::Rock))
        .collect();
    let s = summarize_gradients(corpus, "pre", &groups).unwrap();
    // Σ_t n_t ḡ_t from raw occurrences.
    let v = corpus.vocabulary.size();
    let mut total = vec![0.0; v];
    for t in &corpus.trajectories {
        for pair in t.dists_at("pre").unwrap() {
            let g = reverse_kl_logit_gradient(&expand_dist(&pair.student, v), &expand_dist(&pair.teacher, v)).unwrap();
            total.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    let projection = dot(&total, &s.balanced) / s.balanced_norm;
    let sum = s.total_contribution();
    let rel = (sum - projection).abs() / projection.abs();
    check(
        rel < 1e-6,
        format!("sum of contributions {sum:.9}, projection {projection:.9}, relative error {rel:.2e}"),
    )
}

fn random_corpus(seed: u64) -> Corpus {
    let mut rng = substream(seed, 0);
    let vocab = rng.gen_range(2..40usize);
    let n = rng.gen_range(1..30usize);
    let trajectories = (0..n)
        .map(|i| {
            let len = rng.gen_range(1..60usize);
            let tokens: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..vocab as TokenId)).collect();
            let mut losses = IndexMap::new();
            for name in ["pre", "post"] {
                let l: Vec<f64> = (0..len).map(|_| rng.gen::<f64>().powi(3) * 8.0).collect();
                losses.insert(name.to_string(), l);
            }
            TrajectoryTrace {
                trajectory_id: i as u64,
                prompt_id: i as u64 / 2,
                tokens,
                losses,
                dists: None,
            }
        })
        .collect();
    let vocabulary = Vocabulary::new((0..vocab).map(|i| format!("t{i}")).collect());
    Corpus::new(trajectories, vocabulary).unwrap()
}

fn c4_loss_decomposition() -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let c = random_corpus(derive_seed(4, &format!("corpus-{case}")));
        let r: f64 = aggregate_scores(&c, "pre", "post").unwrap().iter().map(|a| a.rock_score).sum();
        let total: f64 = c.trajectories.iter().flat_map(|t| t.loss("post").unwrap()).sum();
        worst = worst.max((r - total).abs() / total.abs().max(f64::MIN_POSITIVE));
    }
    check(worst < 1e-6, format!("50 random corpora, worst relative error {worst:.2e}"))
}

fn c5_planted_detection(t: &Trained) -> Outcome {
    let planted: BTreeSet<TokenId> = t.config.planted_rock_tokens.iter().copied().collect();
    // TopK(20) selection: the 20 highest R_ctx among tokens with R_ctx > 0.
    let top20 = t.report.rock_set();
    let hits = top20.intersection(&planted).count() as f64;
    let recall = hits / planted.len() as f64;
    let precision = hits / top20.len().max(1) as f64;

    let open = DetectionConfig {
        tau_pre: Threshold::Absolute(0.0),
        tau_post: Threshold::Absolute(0.0),
        gamma: 0.0,
        eta: 0.0,
        ..Default::default()
    };
    let ranked = select_rock_tokens(&t.corpus, &open).unwrap().ranking();
    let mut tally: BTreeMap<TokenId, f64> = BTreeMap::new();
    for tr in &t.corpus.trajectories {
        for (tok, l) in tr.tokens.iter().zip(tr.loss("post").unwrap()) {
            *tally.entry(*tok).or_insert(0.0) += l;
        }
    }
    let mut brute: Vec<(TokenId, f64)> = tally.into_iter().collect();
    brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let brute: Vec<TokenId> = brute.into_iter().map(|e| e.0).collect();
    check(
        recall >= 0.9 && precision >= 0.8 && ranked == brute,
        format!(
            "{} selected, recall {recall:.3}, precision {precision:.3}, filters-off ranking matches brute-force tally: {}",
            top20.len(),
            ranked == brute
        ),
    )
}

fn c6_persistence(t: &Trained) -> Outcome {
    let gc = GroupConfig {
        checkpoint: "pre".into(),
        rare_freq_percentile: 50.0,
        high_kl_percentile: 50.0,
        seed: 6,
    };
    let groups = select_groups(&t.corpus, &t.report, &gc).unwrap();
    let p = persistence_analysis(&t.corpus, "pre", "post", &groups).unwrap();
    let rel = |g| p.group(g).and_then(|x| x.median_relative_reduction);
    match (rel(Group::RareHighKl), rel(Group::Rock)) {
        (Some(rare), Some(rock)) => check(
            rare - rock >= 0.20,
            format!(
                "median relative KL reduction: rare high-KL {:.1}%, planted rocks {:.1}%, gap {:.1} pp",
                rare * 100.0,
                rock * 100.0,
                (rare - rock) * 100.0
            ),
        ),
        _ => Err(format!("a group has fewer than three tokens: skipped {:?}", p.skipped)),
    }
}

fn c7_knockout(t: &Trained) -> Outcome {
    let env = SimEnvironment::new(&t.world);
    let cfg = KnockoutConfig {
        seed: derive_seed(7, "knockout"),
        ..Default::default()
    };
    let baseline = env.evaluate(&BTreeSet::new(), cfg.prompts, cfg.rollouts, cfg.seed);
    let pillar = t.config.planted_pillar_token.expect("default config plants a pillar");
    let r = measure_delta(&env, &baseline, pillar, &BTreeSet::new(), &cfg).unwrap();
    let phantoms: Vec<TokenId> = task::phantom_tokens(t.world.vocab_size).collect();
    let ph = measure_delta(&env, &baseline, phantoms[0], &BTreeSet::new(), &cfg).unwrap();
    let null_candidates: Vec<TokenId> = (0..200).map(|i| phantoms[i % phantoms.len()]).collect();
    let null = null_calibration(&env, &null_candidates, &cfg).unwrap();
    let ok = r.delta_token <= -0.05
        && r.bootstrap_token.rejects(cfg.alpha)
        && ph.delta_token == 0.0
        && ph.delta_window == 0.0
        && null.pillar_rate <= 0.09;
    check(
        ok,
        format!(
            "pillar Δ {:.3} (p {:.4}), phantom Δ {}, null pillar rate {:.3} over {} candidates",
            r.delta_token, r.bootstrap_token.p_value, ph.delta_token, null.pillar_rate, null.candidates
        ),
    )
}

fn c8_bootstrap_calibration() -> Outcome {
    let reps = 500;
    let seed = derive_seed(8, "bootstrap-calibration");
    let rejections = (0..reps)
        .filter(|&r| {
            let mut rng = substream(seed, r);
            let base: Vec<u8> = (0..200).map(|_| rng.gen_bool(0.75) as u8).collect();
            let treat: Vec<u8> = (0..200).map(|_| rng.gen_bool(0.75) as u8).collect();
            paired_bootstrap(&base, &treat, 10_000, derive_seed(seed, &format!("boot-{r}")))
                .unwrap()
                .rejects(0.05)
        })
        .count();
    let rate = rejections as f64 / reps as f64;
    check(
        (0.02..=0.09).contains(&rate),
        format!("rejection rate {rate:.3} over {reps} repetitions"),
    )
}

fn c9_reweighting(t: &Trained, golden: &Corpus) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let rocks = t.report.rock_set();
    let windows = rock_windows(&t.corpus, &t.report, 5);
    let ones = build_mask(&t.corpus, &rocks, &windows, 1.0, Regime::Baseline).unwrap();
    let wl = weighted_loss(&t.corpus, &ones, "post").unwrap().total;
    let pl = plain_loss(&t.corpus, "post").unwrap();
    ok &= wl == pl;
    notes.push(format!("λ=1 loss equal: {}", wl == pl));

    let freeze = build_mask(&t.corpus, &rocks, &windows, 0.0, Regime::RockFreeze).unwrap();
    let total = t.corpus.total_positions() as u64;
    let mf = aggregate_masked_fraction(&freeze);
    let active = weighted_loss(&t.corpus, &freeze, "post").unwrap().active_term_count;
    let expected = (1.0 - mf) * total as f64;
    let counts_ok = active == expected.round() as u64 && (expected - active as f64).abs() < 1e-6;
    ok &= counts_ok;
    notes.push(format!("active terms {active} = (1 - {mf:.4})·{total}: {counts_ok}"));

    let mut world = build_world(&t.config).unwrap();
    let before = world.planted_logits(&world.student);
    let planted: BTreeSet<TokenId> = t.config.planted_rock_tokens.iter().copied().collect();
    let mask = RockFreeze {
        rock_set: planted,
        radius: 5,
        lambda: 0.0,
    };
    train(&mut world, RolloutSource::Online, &mask).unwrap();
    let frozen = before == world.planted_logits(&world.student);
    ok &= frozen && !before.is_empty();
    notes.push(format!("{} planted logits bit-identical: {frozen}", before.len()));

    let report = select_rock_tokens(golden, &DetectionConfig::default()).unwrap();
    let reference = rock_windows(golden, &report, 1);
    let matched = freq_matched_random_windows(golden, &reference, &report.rock_set(), derive_seed(9, "control"));
    match matched {
        Ok(control) => {
            let same = control.length_histogram() == reference.length_histogram()
                && control.center_bucket_histogram(golden) == reference.center_bucket_histogram(golden);
            ok &= same && !reference.is_empty();
            notes.push(format!(
                "{} control windows histogram-identical: {same}",
                control.length_histogram().values().sum::<usize>()
            ));
        }
        Err(e) => {
            ok = false;
            notes.push(format!("control windows: {e}"));
        }
    }
    check(ok, notes.join("; "))
}

fn llm_scale_sweep() -> SweepResult {
    let ks: Vec<usize> = (1..=20).map(|i| i * 10).collect();
    let jac: Vec<f64> = ks.iter().map(|&k| if k <= 100 { 0.95 - 0.002 * k as f64 } else { 0.60 - 0.001 * k as f64 }).collect();
    let coverage: Vec<f64> = ks.iter().map(|&k| (0.006 * k as f64).min(1.0)).collect();
    SweepResult {
        sizes: vec![1000],
        ks,
        jaccard_matrix: vec![jac],
        coverage_curve: coverage,
        repeats: 1,
        seed: 0,
        basis: RankBasis::RockScore,
    }
}

fn c10_cutoff(corpus: &Corpus) -> Outcome {
    let n = corpus.trajectories.len();
    let vocab = corpus.vocabulary.size();
    let ks: Vec<usize> = (1..=vocab).collect();
    let mut full_ok = true;
    for basis in [RankBasis::RockScore, RankBasis::RockScoreCtx] {
        let sweep = SweepConfig {
            sizes: vec![n],
            ks: ks.clone(),
            repeats: 3,
            seed: 10,
            basis,
        };
        let r = stability_sweep(corpus, &DetectionConfig::default(), &sweep).unwrap();
        full_ok &= r.jaccard_matrix[0].iter().all(|&j| j == 1.0);
    }
    let sweep = SweepConfig {
        sizes: vec![n / 2],
        ks: ks.clone(),
        repeats: 4,
        seed: 10,
        basis: RankBasis::RockScore,
    };
    let cov = stability_sweep(corpus, &DetectionConfig::default(), &sweep).unwrap().coverage_curve;
    let monotone = cov.windows(2).all(|w| w[0] <= w[1]);
    let terminal = *cov.last().unwrap();
    let chosen = choose_k(&llm_scale_sweep(), 0.70, 0.50).unwrap();
    check(
        full_ok && monotone && terminal == 1.0 && chosen.k == 100 && !chosen.fallback,
        format!(
            "full-corpus Jaccard 1.0 for all K: {full_ok}; coverage monotone: {monotone}, terminal {terminal}; LLM-scale sweep choice K = {}",
            chosen.k
        ),
    )
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Every stage of the golden pipeline, returning one digest per stage output.
fn golden_pipeline(dir: &Path) -> BTreeMap<&'static str, String> {
    let mut out = BTreeMap::new();
    let cfg = SimConfig {
        prompts: 5,
        rollouts_per_prompt: 2,
        ..SimConfig::default()
    };
    let mut world = build_world(&cfg).unwrap();
    let trained = train(&mut world, RolloutSource::Online, &Baseline).unwrap();
    let corpus = rollout(&world, &trained.checkpoints, cfg.prompts, cfg.rollouts_per_prompt, cfg.seed).unwrap();
    let trace = dir.join("trace.jsonl");
    write_corpus(&corpus, &trace).unwrap();
    out.insert("simulate", sha_hex(&std::fs::read(&trace).unwrap()));

    let json = |v: &dyn erased::Json| sha_hex(v.bytes().as_slice());
    let report = select_rock_tokens(&corpus, &DetectionConfig::default()).unwrap();
    out.insert("detect", json(&report));

    let sweep = SweepConfig {
        sizes: vec![3, 5, 8],
        ks: vec![2, 4, 8, 16],
        repeats: 8,
        seed: derive_seed(5, "sweep"),
        basis: RankBasis::RockScore,
    };
    out.insert("sweep", json(&stability_sweep(&corpus, &report.config, &sweep).unwrap()));

    let gc = GroupConfig {
        seed: derive_seed(5, "gradgeom"),
        ..Default::default()
    };
    let groups = select_groups(&corpus, &report, &gc).unwrap();
    let grads = summarize_gradients(&corpus, "post", &groups).unwrap();
    let pers = persistence_analysis(&corpus, "pre", "post", &groups).unwrap();
    out.insert("gradgeom", json(&(grads, pers)));

    let ko = KnockoutConfig {
        prompts: 60,
        resamples: 1000,
        seed: derive_seed(5, "knockout"),
        ..Default::default()
    };
    let ranking = report.ranking();
    let pool: Vec<TokenId> = ranking.iter().take(6).copied().collect();
    let windows: BTreeMap<TokenId, BTreeSet<TokenId>> = pool
        .iter()
        .map(|&c| (c, window_companions(&corpus, &report, c, &pool, ko.gamma)))
        .collect();
    let env = SimEnvironment::new(&world);
    let (_, records) = run_knockouts(&env, &pool[..3], &windows, &ko).unwrap();
    out.insert("knockout", json(&records));

    let masks = build_mask(&corpus, &report.rock_set(), &rock_windows(&corpus, &report, 5), 0.0, Regime::RockFreeze).unwrap();
    let mask_path = dir.join("masks.jsonl");
    write_masks(&masks, &mask_path).unwrap();
    out.insert("mask", sha_hex(&std::fs::read(&mask_path).unwrap()));

    let fixed = rocktoken::simlab::FixedMasks(masks.iter().map(|m| (m.trajectory_id, m.weights.clone())).collect());
    let mut student = build_world(&cfg).unwrap();
    let replay = train(&mut student, RolloutSource::Corpus(&corpus), &fixed).unwrap();
    out.insert("train", json(&replay.log));
    out
}

mod erased {
    pub trait Json {
        fn bytes(&self) -> Vec<u8>;
    }
    impl<T: serde::Serialize> Json for T {
        fn bytes(&self) -> Vec<u8> {
            serde_json::to_vec(self).expect("serializable")
        }
    }
}

fn c11_reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (i, threads) in [1, 4, 4].into_iter().enumerate() {
        let dir = tmp.path().join(format!("run{i}"));
        std::fs::create_dir_all(&dir).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        runs.push(pool.install(|| golden_pipeline(&dir)));
    }
    let identical = runs.windows(2).all(|w| w[0] == w[1]);
    let golden_ok = runs[0]["simulate"] == GOLDEN_TRACE_SHA256;
    check(
        identical && golden_ok,
        format!(
            "{} stage digests identical over 3 runs (1 and 4 threads): {identical}; trace matches golden digest: {golden_ok}",
            runs[0].len()
        ),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, budget: Duration, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let res = f();
        let elapsed = t0.elapsed();
        let over = elapsed > budget;
        let (status, detail) = match res {
            Ok(d) if !over => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; exceeded {budget:?}")),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("{status} [{id:>2}] {name} ({:.2}s): {detail}", elapsed.as_secs_f64());
    };

    report(1, "exact statistical quantities", Duration::from_secs(1), &mut c1_exact_statistics);
    report(2, "gradient oracle", Duration::from_secs(5), &mut c2_gradient_oracle);
    let gold = golden();
    report(3, "decomposition identity", Duration::from_secs(10), &mut || c3_decomposition(&gold));
    report(4, "loss decomposition", Duration::from_secs(10), &mut c4_loss_decomposition);

    let t0 = Instant::now();
    let trained = trained_default();
    let setup = t0.elapsed();
    println!("      default simulator trained and detected in {:.2}s", setup.as_secs_f64());
    report(5, "planted-rock detection", Duration::from_secs(60) - setup, &mut || c5_planted_detection(&trained));
    report(6, "persistence phenomenology", Duration::from_secs(300) - setup, &mut || c6_persistence(&trained));
    report(7, "knockout soundness", Duration::from_secs(600) - setup, &mut || c7_knockout(&trained));
    report(8, "bootstrap calibration", Duration::from_secs(120), &mut c8_bootstrap_calibration);
    report(9, "reweighting contracts", Duration::from_secs(120) - setup, &mut || c9_reweighting(&trained, &gold));
    report(10, "cutoff procedure", Duration::from_secs(30), &mut || c10_cutoff(&gold));
    report(11, "reproducibility", Duration::from_secs(600), &mut c11_reproducibility);

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}
