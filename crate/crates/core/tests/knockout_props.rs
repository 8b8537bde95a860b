use std::collections::{BTreeMap, BTreeSet};

use rocktoken::knockout::*;
use rocktoken::simlab::{build_world, task, SimConfig, SimEnvironment, TeacherPolicy};
use rocktoken::stats::BootstrapResult;
use rocktoken::trace::TokenId;

struct Fixed(Vec<f64>);

impl DecodingPolicy for Fixed {
    fn vocab_size(&self) -> usize {
        self.0.len()
    }
    fn next_token_probs(&self, _: &[TokenId], _: &[TokenId], out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

fn set(v: &[TokenId]) -> BTreeSet<TokenId> {
    v.iter().copied().collect()
}

#[test]
fn ban_renormalizes_remaining_mass() {
    let base = Fixed(vec![0.1, 0.2, 0.3, 0.4]);
    let ko = KnockoutPolicy::new(&base, &set(&[2]), 0);
    let mut out = vec![0.0; 4];
    ko.next_token_probs(&[], &[], &mut out);
    let expect = [0.1 / 0.7, 0.2 / 0.7, 0.0, 0.4 / 0.7];
    for (a, b) in out.iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(ko.starvation_events(), 0);
}

#[test]
fn banning_all_mass_falls_back_and_counts() {
    let base = Fixed(vec![0.0, 0.5, 0.5]);
    let ko = KnockoutPolicy::new(&base, &set(&[1, 2]), 0);
    let mut out = vec![0.0; 3];
    ko.next_token_probs(&[], &[], &mut out);
    assert_eq!(out, vec![1.0, 0.0, 0.0]);
    assert_eq!(ko.starvation_events(), 1);
}

#[test]
fn banning_a_zero_mass_token_is_a_no_op() {
    let base = Fixed(vec![0.25, 0.75, 0.0]);
    let ko = KnockoutPolicy::new(&base, &set(&[2]), 0);
    let mut out = vec![0.0; 3];
    ko.next_token_probs(&[], &[], &mut out);
    assert_eq!(out, vec![0.25, 0.75, 0.0]);
}

fn boot(p: f64) -> BootstrapResult {
    BootstrapResult {
        point_estimate: 0.0,
        ci_low: 0.0,
        ci_high: 0.0,
        p_value: p,
        resamples: 100,
        seed: 0,
    }
}

fn record(candidate: TokenId, dt: f64, pt: f64, dw: f64, pw: f64) -> KnockoutRecord {
    KnockoutRecord {
        candidate,
        window_set: vec![candidate],
        delta_token: dt,
        delta_window: dw,
        bootstrap_token: boot(pt),
        bootstrap_window: boot(pw),
        category: None,
        epsilon: 0.01,
        baseline: vec![1, 1, 0, 1],
        token_arm: vec![],
        window_arm: vec![],
        starvation_events: 0,
    }
}

#[test]
fn categorization_rules() {
    use KnockoutCategory::*;
    let cat = |r: &KnockoutRecord| categorize(r, 0.01, 0.05);
    assert_eq!(cat(&record(1, -0.2, 0.001, 0.0, 1.0)), StrongPillar);
    assert_eq!(cat(&record(1, 0.0, 1.0, -0.2, 0.01)), StrongPillar);
    assert_eq!(cat(&record(1, 0.2, 0.001, 0.0, 1.0)), StrongStumbling);
    // Large effect without rejection, and rejection below ε.
    assert_eq!(cat(&record(1, -0.2, 0.2, 0.0, 1.0)), Neutral);
    assert_eq!(cat(&record(1, -0.005, 0.001, 0.0, 1.0)), Neutral);
    // p exactly at α does not reject.
    assert_eq!(cat(&record(1, -0.2, 0.05, 0.0, 1.0)), Neutral);
    assert_eq!(record(1, -0.1, 0.3, -0.2, 0.01).deciding_delta(), -0.2);
}

#[test]
fn census_counts_and_sign_tests() {
    let mut records: Vec<KnockoutRecord> = (0..10).map(|i| record(i, -0.2, 0.001, 0.0, 1.0)).collect();
    records.extend((10..15).map(|i| record(i, 0.0, 1.0, 0.0, 1.0)));
    for r in &mut records {
        r.category = Some(categorize(r, 0.01, 0.05));
    }
    let core: BTreeSet<TokenId> = (0..7).collect();
    let c = census(&records, &core, 0.05, 0.2).unwrap();
    assert_eq!(c.n_candidates, 15);
    assert_eq!(c.count(KnockoutCategory::StrongPillar), 10);
    assert_eq!(c.count(KnockoutCategory::Neutral), 5);
    assert_eq!(c.sign_split.negatives, 10);
    assert_eq!(c.sign_split.p_value, 0.001953125);
    assert_eq!(c.core_size, 7);
    assert_eq!(c.stable_core.p_value, 0.015625);
    assert_eq!(c.baseline_accuracy, 0.75);
    assert_eq!(c.bonferroni.threshold_or_level, 0.05 / 15.0);
    assert_eq!(c.bonferroni.rejected.len(), 10);
    assert!(census(&[], &core, 0.05, 0.2).is_err());
}

/// Accuracy drops by one indicator per banned token in `harmful`.
struct Toy {
    harmful: BTreeSet<TokenId>,
}

impl Environment for Toy {
    fn evaluate(&self, banned: &BTreeSet<TokenId>, prompts: usize, _: usize, _: u64) -> Evaluation {
        let hit = banned.intersection(&self.harmful).count();
        Evaluation {
            indicators: (0..prompts).map(|i| u8::from(i % 4 != 0 && i % 10 >= hit * 3)).collect(),
            starvation_events: 0,
        }
    }
}

#[test]
fn run_knockouts_shares_one_baseline_and_uses_windows() {
    let env = Toy { harmful: set(&[3, 4]) };
    let cfg = KnockoutConfig {
        prompts: 200,
        resamples: 2000,
        seed: 11,
        ..Default::default()
    };
    let windows: BTreeMap<TokenId, BTreeSet<TokenId>> = [(1, set(&[3, 4])), (3, set(&[]))].into_iter().collect();
    let (baseline, records) = run_knockouts(&env, &[1, 2, 3], &windows, &cfg).unwrap();
    assert_eq!(baseline.indicators.len(), 200);
    let by: BTreeMap<TokenId, &KnockoutRecord> = records.iter().map(|r| (r.candidate, r)).collect();
    assert_eq!(by[&1].delta_token, 0.0);
    assert!(by[&1].delta_window < -0.3);
    assert_eq!(by[&1].window_set, vec![1, 3, 4]);
    assert_eq!(by[&1].category, Some(KnockoutCategory::StrongPillar));
    assert_eq!(by[&2].category, Some(KnockoutCategory::Neutral));
    assert!(by[&3].delta_token < -0.1);
    assert!(records.iter().all(|r| r.baseline == baseline.indicators));
    // Deterministic for a fixed seed.
    let (_, again) = run_knockouts(&env, &[1, 2, 3], &windows, &cfg).unwrap();
    assert_eq!(records, again);
}

#[test]
fn invalid_knockout_configs() {
    let env = Toy { harmful: set(&[]) };
    for cfg in [
        KnockoutConfig { prompts: 0, ..Default::default() },
        KnockoutConfig { resamples: 0, ..Default::default() },
        KnockoutConfig { alpha: 1.0, ..Default::default() },
    ] {
        assert!(run_knockouts(&env, &[1], &BTreeMap::new(), &cfg).is_err());
    }
}

#[test]
fn phantom_tokens_never_change_simulator_accuracy() {
    let world = build_world(&SimConfig::default()).unwrap();
    let env = SimEnvironment::new(&world);
    let phantoms: BTreeSet<TokenId> = task::phantom_tokens(world.vocab_size).collect();
    let base = env.evaluate(&BTreeSet::new(), 50, 3, 4);
    let ko = env.evaluate(&phantoms, 50, 3, 4);
    assert_eq!(base, ko);
    assert_eq!(ko.starvation_events, 0);
}

#[test]
fn teacher_ignores_phantoms_too() {
    let world = build_world(&SimConfig::default()).unwrap();
    let teacher = TeacherPolicy(&world);
    let mut out = vec![0.0; world.vocab_size];
    teacher.next_token_probs(&task::prompt_tokens(3), &[], &mut out);
    assert!(task::phantom_tokens(world.vocab_size).all(|p| out[p as usize] == 0.0));
    assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
