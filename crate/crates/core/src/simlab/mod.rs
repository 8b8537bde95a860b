//! Tabular on-policy distillation simulator.
//!
//! A fixed teacher table and a trainable student logit table over order-k
//! token histories, a verifiable addition task, planted rock tokens with a
//! saturating student bias, and an optional load-bearing separator.

mod optimizer;
mod probe;
mod rollout;
pub mod task;
mod train;
mod world;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::trace::{TokenId, TraceError};

pub use optimizer::OptimizerState;
pub use probe::{optimizer_suppression_probe, ProbeArm, ProbeReport};
pub use rollout::{evaluate_accuracy, generate, rollout, SimEnvironment};
pub use train::{
    train, Baseline, CheckpointKl, FixedMasks, MaskProvider, RockFreeze, RolloutSource, StepRecord, TrainLog,
    TrainOutcome,
};
pub use world::{
    build_world, log_softmax, row_gradient, row_kl, Checkpoint, RowKind, SimWorld, StudentPolicy, TeacherPolicy,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("non-finite update at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("mask for trajectory {trajectory_id} has {got} weights for {expected} positions")]
    Mask {
        trajectory_id: u64,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("csv export failed: {0}")]
    Export(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdaptiveMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 4.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn adaptive_moment(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::AdaptiveMoment,
            learning_rate,
            ..Self::default()
        }
    }
}

/// A named snapshot taken after `fraction × steps` optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSpec {
    pub name: String,
    pub fraction: f64,
}

impl CheckpointSpec {
    pub fn new(name: &str, fraction: f64) -> Self {
        Self {
            name: name.into(),
            fraction,
        }
    }

    pub fn step(&self, steps: usize) -> usize {
        (self.fraction * steps as f64).round() as usize
    }
}

fn pillar_ser<S: serde::Serializer>(v: &Option<TokenId>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(id) => s.serialize_u32(*id),
        None => s.serialize_str("none"),
    }
}

fn pillar_de<'de, D: Deserializer<'de>>(d: D) -> Result<Option<TokenId>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Id(TokenId),
        Word(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Id(id)) => Ok(Some(id)),
        Some(Raw::Word(w)) if w == "none" => Ok(None),
        Some(Raw::Word(w)) => Err(serde::de::Error::custom(format!(
            "planted_pillar_token must be a token id or \"none\", got {w:?}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub vocab_size: usize,
    pub markov_order: usize,
    pub zipf_exponent: f64,
    pub planted_rock_tokens: Vec<TokenId>,
    /// Student logit offset on planted tokens wherever they are grammatical.
    pub planted_offset: f64,
    /// Sole accepted answer separator; `None` accepts both separator tokens.
    #[serde(deserialize_with = "pillar_de", serialize_with = "pillar_ser")]
    pub planted_pillar_token: Option<TokenId>,
    /// Standard deviation of the student's initial per-entry logit noise.
    pub noise_std: f64,
    /// Teacher mass on a reasoning row's grammatical tokens.
    pub grammar_mass: f64,
    /// Teacher mass on the separator(s) in reasoning rows.
    pub separator_mass: f64,
    /// Share of reasoning rows that carry a style token.
    pub style_rate: f64,
    pub max_len: usize,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub train_prompts: u64,
    pub checkpoints: Vec<CheckpointSpec>,
    /// Trace emission size.
    pub prompts: u64,
    pub rollouts_per_prompt: usize,
    pub emit_dists: bool,
    /// Keep only the top entries of each stored distribution; all when unset.
    pub dist_top_k: Option<usize>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            markov_order: 2,
            zipf_exponent: 1.2,
            planted_rock_tokens: task::default_planted(),
            planted_offset: 20.0,
            planted_pillar_token: Some(task::SEP),
            noise_std: 0.5,
            grammar_mass: 0.89,
            separator_mass: 0.06,
            style_rate: 0.5,
            max_len: 128,
            optimizer: OptimizerConfig::default(),
            steps: 400,
            batch_size: 16,
            train_prompts: 100,
            checkpoints: vec![CheckpointSpec::new("pre", 0.0), CheckpointSpec::new("post", 1.0)],
            prompts: 250,
            rollouts_per_prompt: 4,
            emit_dists: true,
            dist_top_k: None,
            seed: 5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Config(m));
        if self.vocab_size < task::MIN_VOCAB {
            return err(format!("vocab_size {} below minimum {}", self.vocab_size, task::MIN_VOCAB));
        }
        if !(1..=2).contains(&self.markov_order) {
            return err(format!("markov_order {} not in 1..=2", self.markov_order));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return err(format!("zipf_exponent {} must be positive", self.zipf_exponent));
        }
        let phantom = task::phantom_tokens(self.vocab_size);
        for &t in &self.planted_rock_tokens {
            if t as usize >= self.vocab_size || phantom.contains(&t) {
                return err(format!("planted token {t} outside the emittable vocabulary"));
            }
        }
        if let Some(p) = self.planted_pillar_token {
            if p != task::SEP && p != task::MARKER {
                return err(format!(
                    "planted_pillar_token {p} must be a separator ({} or {})",
                    task::SEP,
                    task::MARKER
                ));
            }
        }
        if !(self.planted_offset.is_finite() && self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return err("planted_offset and noise_std must be finite, noise_std non-negative".into());
        }
        let tail = 1.0 - self.grammar_mass - self.separator_mass;
        if !(self.grammar_mass > 0.0 && self.separator_mass > 0.0 && tail > 0.0) {
            return err("grammar_mass and separator_mass must be positive and sum below 1".into());
        }
        if !(0.0..=1.0).contains(&self.style_rate) {
            return err(format!("style_rate {} outside [0,1]", self.style_rate));
        }
        if self.max_len < 3 || self.batch_size == 0 || self.train_prompts == 0 {
            return err("max_len ≥ 3, batch_size and train_prompts positive".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return err(format!("learning_rate {} must be finite and non-negative", o.learning_rate));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0) {
            return err("betas must lie in [0,1) and epsilon be positive".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.checkpoints {
            if !(0.0..=1.0).contains(&c.fraction) {
                return err(format!("checkpoint {} fraction {} outside [0,1]", c.name, c.fraction));
            }
            if !names.insert(&c.name) {
                return err(format!("duplicate checkpoint {}", c.name));
            }
        }
        if self.checkpoints.is_empty() {
            return err("at least one checkpoint required".into());
        }
        if self.dist_top_k == Some(0) {
            return err("dist_top_k must be positive".into());
        }
        Ok(())
    }

    /// Tokens that terminate reasoning and open the answer.
    pub fn separators(&self) -> Vec<TokenId> {
        match self.planted_pillar_token {
            Some(p) => vec![p],
            None => vec![task::SEP, task::MARKER],
        }
    }
}
