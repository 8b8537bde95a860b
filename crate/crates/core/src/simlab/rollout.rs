//! Ancestral sampling, trace emission and task evaluation.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::task::{self, check, prompt_tokens, END};
use super::world::{log_softmax, row_kl, Checkpoint, SimWorld};
use super::SimError;
use crate::knockout::{DecodingPolicy, Environment, Evaluation, KnockoutPolicy};
use crate::rng::{derive_seed, substream};
use crate::trace::{canonical_float, Corpus, DistPair, TokenId, TrajectoryTrace, TruncatedDist};

/// Samples a completion with one uniform draw per step (inverse CDF), so
/// policies that differ only in some probabilities stay aligned step by step.
pub fn generate<P: DecodingPolicy + ?Sized>(
    policy: &P,
    prompt: &[TokenId],
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut probs = vec![0.0; policy.vocab_size()];
    while out.len() < max_len {
        policy.next_token_probs(prompt, &out, &mut probs);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                pick = Some(i);
                if acc > u {
                    break;
                }
            }
        }
        let tok = pick.unwrap_or(END as usize) as TokenId;
        out.push(tok);
        if tok == END {
            break;
        }
    }
    out
}

fn dense_dist(lp: &[f64], top_k: Option<usize>) -> TruncatedDist {
    let probs: Vec<f64> = lp.iter().map(|l| canonical_float(l.exp())).collect();
    match top_k {
        Some(k) => {
            let mut d = TruncatedDist::from_dense(&probs, k);
            d.tail_mass = canonical_float(d.tail_mass);
            d
        }
        None => TruncatedDist {
            entries: probs
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(i, &p)| (i as TokenId, p))
                .collect(),
            tail_mass: 0.0,
        },
    }
}

/// Samples `rollouts` completions per prompt from the current student and
/// records the exact per-position reverse KL under every checkpoint.
/// Trajectory `i·rollouts + r` uses substream `(seed, i·rollouts + r)`.
pub fn rollout(
    world: &SimWorld,
    checkpoints: &[Checkpoint],
    prompts: u64,
    rollouts: usize,
    seed: u64,
) -> Result<Corpus, SimError> {
    if checkpoints.is_empty() {
        return Err(SimError::Config("rollout needs at least one checkpoint".into()));
    }
    let policy = world.student_policy();
    let n = prompts as usize * rollouts;
    let trajectories: Vec<TrajectoryTrace> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let prompt_id = (idx / rollouts) as u64;
            let prompt = prompt_tokens(prompt_id);
            let mut rng = substream(seed, idx as u64);
            let tokens = generate(&policy, &prompt, world.config.max_len, &mut rng);
            let rows: Vec<usize> = (0..tokens.len()).map(|t| world.row_index(&prompt, &tokens[..t])).collect();
            let mut losses = IndexMap::new();
            let mut dists = IndexMap::new();
            for c in checkpoints {
                let mut l = Vec::with_capacity(rows.len());
                let mut d = Vec::with_capacity(rows.len());
                for &row in &rows {
                    let lp = log_softmax(world.row(&c.logits, row));
                    l.push(canonical_float(row_kl(&lp, world.teacher_lp(row))));
                    if world.config.emit_dists {
                        d.push(DistPair {
                            student: dense_dist(&lp, world.config.dist_top_k),
                            teacher: dense_dist(world.teacher_lp(row), world.config.dist_top_k),
                        });
                    }
                }
                losses.insert(c.name.clone(), l);
                dists.insert(c.name.clone(), d);
            }
            TrajectoryTrace {
                trajectory_id: idx as u64,
                prompt_id,
                tokens,
                losses,
                dists: world.config.emit_dists.then_some(dists),
            }
        })
        .collect();
    Ok(Corpus::new(trajectories, task::vocabulary(world.vocab_size))?)
}

/// Per-prompt indicator: 1 iff a strict majority of the prompt's rollouts
/// pass the checker. Rollout `r` of prompt `i` uses substream `(seed, i·rollouts + r)`.
pub fn evaluate_accuracy<P: DecodingPolicy + ?Sized>(
    world: &SimWorld,
    policy: &P,
    prompts: usize,
    rollouts: usize,
    seed: u64,
) -> Vec<u8> {
    (0..prompts)
        .into_par_iter()
        .map(|i| {
            let prompt = prompt_tokens(i as u64);
            let correct = (0..rollouts)
                .filter(|&r| {
                    let mut rng = substream(seed, (i * rollouts + r) as u64);
                    let c = generate(policy, &prompt, world.config.max_len, &mut rng);
                    check(&prompt, &c, &world.separators)
                })
                .count();
            u8::from(2 * correct > rollouts)
        })
        .collect()
}

/// The student on the addition task, as a knockout environment.
pub struct SimEnvironment<'a> {
    pub world: &'a SimWorld,
    pub logits: &'a [f64],
}

impl<'a> SimEnvironment<'a> {
    pub fn new(world: &'a SimWorld) -> Self {
        Self {
            world,
            logits: &world.student,
        }
    }
}

impl Environment for SimEnvironment<'_> {
    fn evaluate(&self, banned: &BTreeSet<TokenId>, prompts: usize, rollouts: usize, seed: u64) -> Evaluation {
        let base = super::world::StudentPolicy {
            world: self.world,
            logits: self.logits,
        };
        let policy = KnockoutPolicy::new(&base, banned, END);
        let indicators = evaluate_accuracy(self.world, &policy, prompts, rollouts, derive_seed(seed, "eval"));
        Evaluation {
            indicators,
            starvation_events: policy.starvation_events(),
        }
    }
}
