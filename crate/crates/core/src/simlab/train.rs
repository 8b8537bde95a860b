//! On-policy reverse-KL training of the student table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rollout::generate;
use super::task::prompt_tokens;
use super::world::{log_softmax, row_gradient, Checkpoint, SimWorld};
use super::SimError;
use crate::numeric::pairwise_sum;
use crate::rng::{derive_seed, substream};
use crate::trace::{Corpus, TokenId};

/// Per-position loss weights for a trajectory.
pub trait MaskProvider: Sync {
    fn weights(&self, trajectory_id: u64, tokens: &[TokenId]) -> Result<Vec<f64>, SimError>;
}

/// λ = 1 everywhere.
pub struct Baseline;

impl MaskProvider for Baseline {
    fn weights(&self, _: u64, tokens: &[TokenId]) -> Result<Vec<f64>, SimError> {
        Ok(vec![1.0; tokens.len()])
    }
}

/// λ at every occurrence of a rock token and within `radius` of one, 1 elsewhere.
pub struct RockFreeze {
    pub rock_set: BTreeSet<TokenId>,
    pub radius: usize,
    pub lambda: f64,
}

impl MaskProvider for RockFreeze {
    fn weights(&self, _: u64, tokens: &[TokenId]) -> Result<Vec<f64>, SimError> {
        let mut w = vec![1.0; tokens.len()];
        for (t, tok) in tokens.iter().enumerate() {
            if self.rock_set.contains(tok) {
                let hi = (t + self.radius).min(tokens.len() - 1);
                for x in &mut w[t.saturating_sub(self.radius)..=hi] {
                    *x = self.lambda;
                }
            }
        }
        Ok(w)
    }
}

/// Precomputed masks keyed by trajectory id; unknown ids get weight 1.
pub struct FixedMasks(pub BTreeMap<u64, Vec<f64>>);

impl MaskProvider for FixedMasks {
    fn weights(&self, trajectory_id: u64, tokens: &[TokenId]) -> Result<Vec<f64>, SimError> {
        match self.0.get(&trajectory_id) {
            None => Ok(vec![1.0; tokens.len()]),
            Some(w) if w.len() == tokens.len() => Ok(w.clone()),
            Some(w) => Err(SimError::Mask {
                trajectory_id,
                expected: tokens.len(),
                got: w.len(),
            }),
        }
    }
}

pub enum RolloutSource<'a> {
    /// Fresh samples from the current student each step.
    Online,
    /// Replays a fixed corpus in order, cycling.
    Corpus(&'a Corpus),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean unweighted per-position reverse KL of the batch before the update.
    pub mean_kl: f64,
    pub active_terms: u64,
    pub positions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointKl {
    pub name: String,
    pub step: usize,
    pub per_token: Vec<(TokenId, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<CheckpointKl>,
}

impl TrainLog {
    pub fn total_active_terms(&self) -> u64 {
        self.steps.iter().map(|s| s.active_terms).sum()
    }

    pub fn total_positions(&self) -> u64 {
        self.steps.iter().map(|s| s.positions).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SimError> {
        let mut text = String::from("step,mean_kl,active_terms,positions\n");
        for s in &self.steps {
            text.push_str(&format!("{},{},{},{}\n", s.step, s.mean_kl, s.active_terms, s.positions));
        }
        std::fs::write(path, text).map_err(|e| SimError::Export(e.to_string()))
    }

    pub fn write_token_kl_csv(&self, path: &Path) -> Result<(), SimError> {
        let mut text = String::from("checkpoint,step,token_id,kl\n");
        for c in &self.checkpoints {
            for (t, kl) in &c.per_token {
                text.push_str(&format!("{},{},{},{}\n", c.name, c.step, t, kl));
            }
        }
        std::fs::write(path, text).map_err(|e| SimError::Export(e.to_string()))
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub checkpoints: Vec<Checkpoint>,
}

struct Sampled {
    id: u64,
    prompt: [TokenId; 4],
    tokens: Vec<TokenId>,
}

/// Runs `config.steps` optimizer steps. Each step draws `batch_size`
/// trajectories, sums the exact row gradients of every position with
/// positive weight (scaled by the weight), divides by the batch size and
/// applies the optimizer. Snapshots are taken at the configured checkpoints.
pub fn train(
    world: &mut SimWorld,
    source: RolloutSource<'_>,
    masks: &dyn MaskProvider,
) -> Result<TrainOutcome, SimError> {
    let cfg = world.config.clone();
    let v = world.vocab_size;
    let mut specs: Vec<(usize, &str)> = cfg.checkpoints.iter().map(|c| (c.step(cfg.steps), c.name.as_str())).collect();
    specs.sort();
    let mut outcome = TrainOutcome {
        log: TrainLog {
            steps: Vec::with_capacity(cfg.steps),
            checkpoints: Vec::new(),
        },
        checkpoints: Vec::new(),
    };
    let snapshot = |world: &SimWorld, step: usize, out: &mut TrainOutcome| {
        for &(s, name) in specs.iter().filter(|(s, _)| *s == step) {
            out.checkpoints.push(Checkpoint::of(world, name, s));
            out.log.checkpoints.push(super::CheckpointKl {
                name: name.to_string(),
                step: s,
                per_token: world.per_token_kl(&world.student),
            });
        }
    };
    snapshot(world, 0, &mut outcome);
    let prompt_seed = derive_seed(cfg.seed, "train-prompts");
    let rollout_seed = derive_seed(cfg.seed, "train-rollouts");

    for step in 1..=cfg.steps {
        let batch: Vec<Sampled> = match &source {
            RolloutSource::Online => {
                let policy = world.student_policy();
                (0..cfg.batch_size)
                    .into_par_iter()
                    .map(|b| {
                        let id = ((step - 1) * cfg.batch_size + b) as u64;
                        let pid = substream(prompt_seed, id).gen_range(0..cfg.train_prompts);
                        let prompt = prompt_tokens(pid);
                        let mut rng = substream(rollout_seed, id);
                        let tokens = generate(&policy, &prompt, cfg.max_len, &mut rng);
                        Sampled { id, prompt, tokens }
                    })
                    .collect()
            }
            RolloutSource::Corpus(c) => {
                if c.trajectories.is_empty() {
                    return Err(SimError::Config("replay corpus is empty".into()));
                }
                (0..cfg.batch_size)
                    .map(|b| {
                        let t = &c.trajectories[((step - 1) * cfg.batch_size + b) % c.trajectories.len()];
                        Sampled {
                            id: t.trajectory_id,
                            prompt: prompt_tokens(t.prompt_id),
                            tokens: t.tokens.clone(),
                        }
                    })
                    .collect()
            }
        };

        // Per-row weight totals; the gradient of a row depends only on the row.
        let mut row_weight: BTreeMap<usize, f64> = BTreeMap::new();
        let mut kls = Vec::new();
        let mut active = 0u64;
        for s in &batch {
            let w = masks.weights(s.id, &s.tokens)?;
            if w.len() != s.tokens.len() {
                return Err(SimError::Mask {
                    trajectory_id: s.id,
                    expected: s.tokens.len(),
                    got: w.len(),
                });
            }
            for (t, &wt) in w.iter().enumerate() {
                let row = world.row_index(&s.prompt, &s.tokens[..t]);
                kls.push(world.kl_at(&world.student, row));
                if wt > 0.0 {
                    active += 1;
                    *row_weight.entry(row).or_insert(0.0) += wt;
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        let grads: Vec<(usize, Vec<f64>)> = row_weight
            .par_iter()
            .map(|(&row, &w)| {
                let lp = log_softmax(world.row(&world.student, row));
                let g = row_gradient(&lp, world.teacher_lp(row));
                (row * v, g.into_iter().map(|x| x * w * scale).collect())
            })
            .collect();
        if let Some((off, _)) = grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(SimError::NonFinite {
                step,
                detail: format!("gradient of row {} is not finite", off / v),
            });
        }
        let before = world.student.clone();
        world.optimizer.step(&mut world.student, &grads);
        if let Some(i) = (0..before.len()).find(|&i| before[i].is_finite() && !world.student[i].is_finite()) {
            return Err(SimError::NonFinite {
                step,
                detail: format!("logit of token {} in row {} became {}", i % v, i / v, world.student[i]),
            });
        }
        let positions = kls.len() as u64;
        outcome.log.steps.push(StepRecord {
            step,
            mean_kl: if kls.is_empty() { 0.0 } else { pairwise_sum(&kls) / kls.len() as f64 },
            active_terms: active,
            positions,
        });
        snapshot(world, step, &mut outcome);
    }
    let order: Vec<&str> = cfg.checkpoints.iter().map(|c| c.name.as_str()).collect();
    outcome
        .checkpoints
        .sort_by_key(|c| order.iter().position(|n| *n == c.name));
    outcome
        .log
        .checkpoints
        .sort_by_key(|c| order.iter().position(|n| *n == c.name));
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::super::{build_world, SimConfig};
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            steps: 5,
            batch_size: 4,
            ..SimConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_freezes() {
        let mut cfg = small();
        cfg.optimizer.learning_rate = 0.0;
        let mut w = build_world(&cfg).unwrap();
        let before = w.student.clone();
        let out = train(&mut w, RolloutSource::Online, &Baseline).unwrap();
        assert_eq!(w.student, before);
        assert_eq!(out.checkpoints[0].logits, out.checkpoints[1].logits);
    }

    #[test]
    fn stationary_at_teacher() {
        let mut cfg = small();
        cfg.noise_std = 0.0;
        cfg.planted_rock_tokens.clear();
        let mut w = build_world(&cfg).unwrap();
        assert_eq!(w.student, w.teacher_logits);
        let out = train(&mut w, RolloutSource::Online, &Baseline).unwrap();
        assert_eq!(w.student, w.teacher_logits);
        assert!(out.log.steps.iter().all(|s| s.mean_kl == 0.0));
    }

    #[test]
    fn rock_freeze_counts_active_terms() {
        let mut w = build_world(&small()).unwrap();
        let mask = RockFreeze {
            rock_set: w.config.planted_rock_tokens.iter().copied().collect(),
            radius: 0,
            lambda: 0.0,
        };
        let out = train(&mut w, RolloutSource::Online, &mask).unwrap();
        assert!(out.log.total_active_terms() < out.log.total_positions());
    }
}
