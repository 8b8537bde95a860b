use std::collections::BTreeMap;

use indexmap::IndexMap;
use proptest::prelude::*;
use rocktoken::detect::*;
use rocktoken::trace::{load_corpus, Corpus, TokenId, TrajectoryTrace, Vocabulary};

fn golden() -> Corpus {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    load_corpus(&dir.join("golden_trace.jsonl"), &dir.join("golden_vocab.json")).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// Reference values from a direct Python implementation (numpy percentiles,
// Counter-based fingerprints) run on the golden corpus.
#[test]
fn golden_detection_matches_reference() {
    let r = select_rock_tokens(&golden(), &DetectionConfig::default()).unwrap();
    assert_eq!(r.tau_pre_resolved, 0.190346662);
    assert!(close(r.tau_post_resolved, 0.00833471445600001, 1e-12));
    assert_eq!(r.rock_set, vec![18, 22, 26]);
    let expect = [
        (18, 6.543713827384617, 13, 6, 13),
        (22, 6.155375722571428, 14, 11, 14),
        (26, 1.1724766311673334, 2, 2, 3),
    ];
    for (i, (tok, rctx, ph, kept, freq)) in expect.into_iter().enumerate() {
        let a = &r.tokens[i];
        assert_eq!(a.token_id, tok);
        assert!(close(a.rock_score_ctx, rctx, 1e-9), "{tok}: {}", a.rock_score_ctx);
        assert_eq!((a.ph_count, a.rock_occurrences, a.freq), (ph, kept, freq));
    }
    assert!(close(r.median_density, 0.13777089783281732, 1e-12));
    assert!(r.tokens[3..].iter().all(|a| a.rock_score_ctx == 0.0));
}

fn brute_similarity(tokens: &[TokenId], i: usize, other: &[TokenId], j: usize, w: usize) -> f64 {
    let bag = |t: &[TokenId], p: usize| {
        let mut m: BTreeMap<TokenId, u32> = BTreeMap::new();
        for (k, &x) in t.iter().enumerate() {
            if k != p && k + w >= p && k <= p + w {
                *m.entry(x).or_default() += 1;
            }
        }
        m
    };
    let (a, b) = (bag(tokens, i), bag(other, j));
    let mut keys: Vec<&TokenId> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    let num: u32 = keys.iter().map(|k| a.get(k).copied().unwrap_or(0).min(b.get(k).copied().unwrap_or(0))).sum();
    let den: u32 = keys.iter().map(|k| a.get(k).copied().unwrap_or(0).max(b.get(k).copied().unwrap_or(0))).sum();
    if den == 0 {
        1.0
    } else {
        f64::from(num) / f64::from(den)
    }
}

fn corpus_from(seqs: Vec<(Vec<TokenId>, Vec<f64>, Vec<f64>)>, vocab: usize) -> Corpus {
    let trajectories = seqs
        .into_iter()
        .enumerate()
        .map(|(i, (tokens, pre, post))| {
            let mut losses = IndexMap::new();
            losses.insert("pre".to_string(), pre);
            losses.insert("post".to_string(), post);
            TrajectoryTrace {
                trajectory_id: i as u64,
                prompt_id: i as u64,
                tokens,
                losses,
                dists: None,
            }
        })
        .collect();
    Corpus::new(trajectories, Vocabulary::new((0..vocab).map(|i| format!("t{i}")).collect())).unwrap()
}

fn arb_corpus() -> impl Strategy<Value = Corpus> {
    prop::collection::vec(
        (1usize..25).prop_flat_map(|len| {
            (
                prop::collection::vec(0u32..8, len),
                prop::collection::vec(0.0f64..2.0, len),
                prop::collection::vec(0.0f64..2.0, len),
            )
        }),
        1..8,
    )
    .prop_map(|s| corpus_from(s, 8))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rock_occurrences_match_brute_force(c in arb_corpus(), w in 1usize..4, gamma in 0.0f64..1.0, eta in 0.0f64..1.0) {
        let cfg = DetectionConfig {
            tau_pre: Threshold::Absolute(0.8),
            tau_post: Threshold::Absolute(0.8),
            w,
            gamma,
            eta,
            ..Default::default()
        };
        let r = select_rock_tokens(&c, &cfg).unwrap();
        let mut ph: BTreeMap<TokenId, Vec<(usize, usize)>> = BTreeMap::new();
        for (ti, t) in c.trajectories.iter().enumerate() {
            for p in 0..t.len() {
                if t.losses["pre"][p] >= 0.8 && t.losses["post"][p] >= 0.8 {
                    ph.entry(t.tokens[p]).or_default().push((ti, p));
                }
            }
        }
        let mut kept: BTreeMap<TokenId, u64> = BTreeMap::new();
        for (tok, occ) in &ph {
            let n = occ.len();
            for (i, &(ta, pa)) in occ.iter().enumerate() {
                if n < 2 {
                    continue;
                }
                let hits = occ.iter().enumerate().filter(|&(j, &(tb, pb))| {
                    j != i && brute_similarity(&c.trajectories[ta].tokens, pa, &c.trajectories[tb].tokens, pb, w) >= gamma
                }).count();
                if hits as f64 / (n - 1) as f64 >= eta {
                    *kept.entry(*tok).or_default() += 1;
                }
            }
        }
        for a in &r.tokens {
            prop_assert_eq!(a.ph_count, ph.get(&a.token_id).map_or(0, |v| v.len() as u64));
            prop_assert_eq!(a.rock_occurrences, kept.get(&a.token_id).copied().unwrap_or(0));
            let sum: f64 = c.trajectories.iter().flat_map(|t| t.tokens.iter().zip(&t.losses["post"]))
                .filter(|(x, _)| **x == a.token_id).map(|(_, l)| l).sum();
            prop_assert!((a.rock_score - sum).abs() <= 1e-9 * sum.max(1.0));
            prop_assert!((a.rock_score_ctx - a.rock_score * a.ccr).abs() <= 1e-12 * a.rock_score.max(1.0));
        }
    }

    #[test]
    fn trajectory_order_does_not_matter(c in arb_corpus()) {
        let cfg = DetectionConfig { tau_pre: Threshold::Percentile(60.0), tau_post: Threshold::Percentile(60.0), ..Default::default() };
        let mut rev = c.clone();
        rev.trajectories.reverse();
        prop_assert_eq!(select_rock_tokens(&c, &cfg).unwrap(), select_rock_tokens(&rev, &cfg).unwrap());
    }
}

#[test]
fn percentile_threshold_is_linear_interpolation() {
    let c = corpus_from(vec![(vec![0, 1, 2, 3, 4], vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0, 0.0])], 5);
    assert_eq!(resolve_threshold(&c, "pre", Threshold::Percentile(80.0)).unwrap(), 3.2);
    assert_eq!(resolve_threshold(&c, "post", Threshold::Absolute(0.25)).unwrap(), 0.25);
    assert!(resolve_threshold(&c, "mid", Threshold::Percentile(50.0)).is_err());
}

#[test]
fn threshold_selection_keeps_scores_at_or_above_tau() {
    let c = golden();
    let r = select_rock_tokens(
        &c,
        &DetectionConfig {
            selection: Selection::Threshold(2.0),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(r.rock_set, vec![18, 22]);
    let k1 = select_rock_tokens(
        &c,
        &DetectionConfig {
            selection: Selection::TopK(1),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(k1.rock_set, vec![18]);
}

#[test]
fn capped_consistency_is_seeded_and_reported() {
    let c = golden();
    let exact = select_rock_tokens(&c, &DetectionConfig::default()).unwrap();
    let capped = select_rock_tokens(
        &c,
        &DetectionConfig {
            max_pairwise: 5,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(exact.capped_tokens.is_empty());
    assert_eq!(capped.capped_tokens, vec![18, 22]);
    assert_eq!(capped, select_rock_tokens(&c, &DetectionConfig { max_pairwise: 5, ..Default::default() }).unwrap());
}

#[test]
fn invalid_configs_are_rejected() {
    let c = golden();
    for cfg in [
        DetectionConfig { w: 0, ..Default::default() },
        DetectionConfig { gamma: 1.5, ..Default::default() },
        DetectionConfig { tau_pre: Threshold::Percentile(100.0), ..Default::default() },
        DetectionConfig { post: "later".into(), ..Default::default() },
    ] {
        assert!(select_rock_tokens(&c, &cfg).is_err());
    }
}

#[test]
fn categories_of_simulator_surfaces() {
    assert_eq!(categorize_token("7"), Category::Digit);
    assert_eq!(categorize_token("\\boxed"), Category::MathDelimiter);
    assert_eq!(categorize_token("\n\n"), Category::MarkdownWhitespace);
    assert_eq!(categorize_token(" So"), Category::DiscourseMarker);
    assert_eq!(categorize_token("apple"), Category::Other);
}
