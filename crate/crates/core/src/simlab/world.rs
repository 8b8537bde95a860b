//! Teacher and student tables.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optimizer::OptimizerState;
use super::task::{self, answer_digit, is_digit, END};
use super::{SimConfig, SimError};
use crate::knockout::DecodingPolicy;
use crate::rng::{derive_seed, substream};
use crate::trace::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// Reasoning row dominated by one content word.
    Content,
    /// Reasoning row shared between a style token and a content word.
    Style,
    /// Follows the answer digit; predicts end-of-sequence.
    End,
    /// Follows a separator; predicts the answer digit.
    Answer,
}

const TRIGGER_SPLIT: usize = 4;

pub struct SimWorld {
    pub config: SimConfig,
    pub vocab_size: usize,
    pub separators: Vec<TokenId>,
    pub kinds: Vec<RowKind>,
    /// Tokens carrying grammar mass in each row.
    pub grammar: Vec<Vec<TokenId>>,
    /// Rows in which a planted token received the student offset.
    pub planted_rows: Vec<usize>,
    pub teacher_logits: Vec<f64>,
    pub teacher_logprobs: Vec<f64>,
    pub student: Vec<f64>,
    pub optimizer: OptimizerState,
}

/// Named snapshot of the student table.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub name: String,
    pub step: usize,
    pub logits: Vec<f64>,
}

impl Checkpoint {
    pub fn of(world: &SimWorld, name: &str, step: usize) -> Self {
        Self {
            name: name.into(),
            step,
            logits: world.student.clone(),
        }
    }
}

/// Log-softmax that keeps −∞ entries at −∞.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Exact reverse KL(π_θ ‖ π_T) from log-probabilities; zero-probability
/// student entries contribute nothing.
pub fn row_kl(student_lp: &[f64], teacher_lp: &[f64]) -> f64 {
    student_lp
        .iter()
        .zip(teacher_lp)
        .filter(|(s, _)| s.is_finite())
        .map(|(&s, &t)| s.exp() * (s - t))
        .sum()
}

/// Gradient of the reverse KL with respect to the student logits,
/// `p ⊙ ((ln p − ln q) − KL)`.
pub fn row_gradient(student_lp: &[f64], teacher_lp: &[f64]) -> Vec<f64> {
    let kl = row_kl(student_lp, teacher_lp);
    student_lp
        .iter()
        .zip(teacher_lp)
        .map(|(&s, &t)| if s.is_finite() { s.exp() * ((s - t) - kl) } else { 0.0 })
        .collect()
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn zipf_pick<R: Rng>(rng: &mut R, cdf: &[f64]) -> usize {
    let u = rng.gen::<f64>() * cdf[cdf.len() - 1];
    cdf.iter().position(|&c| c > u).unwrap_or(cdf.len() - 1)
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|k| (k as f64).powf(-s)).collect()
}

pub fn build_world(config: &SimConfig) -> Result<SimWorld, SimError> {
    config.validate()?;
    let v = config.vocab_size;
    let separators = config.separators();
    let reasoning_rows = v.pow(config.markov_order as u32);
    let n_rows = reasoning_rows + task::DIGITS as usize;
    let content: Vec<TokenId> = task::content_tokens(v).collect();
    let styles: Vec<TokenId> = task::style_tokens().collect();
    let mut content_cdf = zipf_weights(content.len(), config.zipf_exponent);
    for i in 1..content_cdf.len() {
        content_cdf[i] += content_cdf[i - 1];
    }

    // Non-grammatical tail mass, Zipf-spread over a seeded ordering of the emittable ids.
    let mut order: Vec<TokenId> = (0..(v - task::PHANTOMS) as TokenId).collect();
    order.shuffle(&mut substream(derive_seed(config.seed, "tail-order"), 0));
    let tw = zipf_weights(order.len(), config.zipf_exponent);
    let tw_sum: f64 = tw.iter().sum();
    let mut tail = vec![0.0; v];
    for (&t, w) in order.iter().zip(&tw) {
        tail[t as usize] = w / tw_sum;
    }
    let tail_mass = 1.0 - config.grammar_mass - config.separator_mass;

    // Style tokens are triggered by (last token, previous token mod TRIGGER_SPLIT)
    // keys over content words, balanced across style tokens by Zipf weight.
    let split = if config.markov_order == 2 { TRIGGER_SPLIT } else { 1 };
    let mut keys: Vec<(f64, usize, usize)> = (0..content.len())
        .flat_map(|i| (0..split).map(move |j| (i, j)))
        .map(|(i, j)| (((i + 1) as f64).powf(-config.zipf_exponent) / split as f64, i, j))
        .collect();
    keys.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut load = vec![0.0f64; styles.len()];
    let mut style_of = vec![None; v * split];
    for (w, i, j) in keys {
        let bin = (0..styles.len()).min_by(|&x, &y| load[x].total_cmp(&load[y])).unwrap_or(0);
        load[bin] += w;
        style_of[content[i] as usize * split + j] = Some(styles[bin]);
    }

    let teacher_seed = derive_seed(config.seed, "teacher");
    let student_seed = derive_seed(config.seed, "student");
    let mut kinds = Vec::with_capacity(n_rows);
    let mut grammar = Vec::with_capacity(n_rows);
    let mut teacher_logits = Vec::with_capacity(n_rows * v);
    let mut teacher_logprobs = Vec::with_capacity(n_rows * v);
    let mut student = Vec::with_capacity(n_rows * v);
    let mut planted_rows = Vec::new();
    let mut q = vec![0.0; v];
    for row in 0..n_rows {
        let mut rng = substream(teacher_seed, row as u64);
        q.iter_mut().zip(&tail).for_each(|(q, t)| *q = tail_mass * t);
        let (a, b) = if row < reasoning_rows {
            if config.markov_order == 2 {
                ((row / v) as TokenId, (row % v) as TokenId)
            } else {
                (END, row as TokenId)
            }
        } else {
            (END, END)
        };
        let (kind, gram) = if row >= reasoning_rows {
            let d = (row - reasoning_rows) as TokenId;
            q[d as usize] += 1.0 - tail_mass;
            (RowKind::Answer, vec![d])
        } else if is_digit(b) && (config.markov_order == 1 || separators.contains(&a)) {
            q[END as usize] += 1.0 - tail_mass;
            (RowKind::End, vec![END])
        } else {
            for &s in &separators {
                q[s as usize] += config.separator_mass / separators.len() as f64;
            }
            let c = content[zipf_pick(&mut rng, &content_cdf)];
            let style = rng.gen::<f64>() < config.style_rate;
            if let (true, Some(s)) = (style, style_of[b as usize * split + a as usize % split]) {
                let u = rng.gen_range(0.3..0.7);
                q[s as usize] += config.grammar_mass * u;
                q[c as usize] += config.grammar_mass * (1.0 - u);
                (RowKind::Style, vec![s, c])
            } else {
                q[c as usize] += config.grammar_mass;
                (RowKind::Content, vec![c])
            }
        };
        let logits: Vec<f64> = q.iter().map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect();
        let mut srng = substream(student_seed, row as u64);
        let mut planted = false;
        for (i, &l) in logits.iter().enumerate() {
            let mut s = l;
            if l.is_finite() {
                if config.noise_std > 0.0 {
                    s += config.noise_std * standard_normal(&mut srng);
                }
                if gram.contains(&(i as TokenId)) && config.planted_rock_tokens.contains(&(i as TokenId)) {
                    s += config.planted_offset;
                    planted = true;
                }
            }
            student.push(s);
        }
        if planted {
            planted_rows.push(row);
        }
        teacher_logprobs.extend(log_softmax(&logits));
        teacher_logits.extend(logits);
        kinds.push(kind);
        grammar.push(gram);
    }
    Ok(SimWorld {
        optimizer: OptimizerState::new(&config.optimizer, student.len()),
        config: config.clone(),
        vocab_size: v,
        separators,
        kinds,
        grammar,
        planted_rows,
        teacher_logits,
        teacher_logprobs,
        student,
    })
}

impl SimWorld {
    pub fn n_rows(&self) -> usize {
        self.kinds.len()
    }

    fn reasoning_rows(&self) -> usize {
        self.vocab_size.pow(self.config.markov_order as u32)
    }

    /// Row predicting the token after `history`, given the prompt.
    pub fn row_index(&self, prompt: &[TokenId], history: &[TokenId]) -> usize {
        let at = |k: usize| -> TokenId {
            if k <= history.len() {
                history[history.len() - k]
            } else {
                prompt[prompt.len() + history.len() - k]
            }
        };
        let last = at(1);
        if self.separators.contains(&last) {
            return self.reasoning_rows() + answer_digit(prompt) as usize;
        }
        match self.config.markov_order {
            1 => last as usize,
            _ => at(2) as usize * self.vocab_size + last as usize,
        }
    }

    pub fn row<'a>(&self, table: &'a [f64], row: usize) -> &'a [f64] {
        &table[row * self.vocab_size..(row + 1) * self.vocab_size]
    }

    pub fn teacher_lp(&self, row: usize) -> &[f64] {
        self.row(&self.teacher_logprobs, row)
    }

    /// Reverse KL of `logits` against the teacher at one row.
    pub fn kl_at(&self, logits: &[f64], row: usize) -> f64 {
        row_kl(&log_softmax(self.row(logits, row)), self.teacher_lp(row))
    }

    /// Per-token KL over the whole table: for each token, the mean row KL over
    /// the rows where it is grammatical, weighted by the student's probability
    /// of emitting it there.
    pub fn per_token_kl(&self, logits: &[f64]) -> Vec<(TokenId, f64)> {
        let mut acc = vec![(0.0, 0.0); self.vocab_size];
        for row in 0..self.n_rows() {
            let lp = log_softmax(self.row(logits, row));
            let kl = row_kl(&lp, self.teacher_lp(row));
            for &t in &self.grammar[row] {
                let p = lp[t as usize].exp();
                acc[t as usize].0 += p * kl;
                acc[t as usize].1 += p;
            }
        }
        acc.into_iter()
            .enumerate()
            .filter(|(_, (_, w))| *w > 0.0)
            .map(|(t, (s, w))| (t as TokenId, s / w))
            .collect()
    }

    /// Planted-token entries of the student table, in row order.
    pub fn planted_logits(&self, logits: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for &row in &self.planted_rows {
            for &t in &self.grammar[row] {
                if self.config.planted_rock_tokens.contains(&t) {
                    out.push(logits[row * self.vocab_size + t as usize]);
                }
            }
        }
        out
    }

    pub fn student_policy(&self) -> StudentPolicy<'_> {
        StudentPolicy {
            world: self,
            logits: &self.student,
        }
    }
}

/// Samples from a student table.
pub struct StudentPolicy<'a> {
    pub world: &'a SimWorld,
    pub logits: &'a [f64],
}

impl DecodingPolicy for StudentPolicy<'_> {
    fn vocab_size(&self) -> usize {
        self.world.vocab_size
    }

    fn next_token_probs(&self, prompt: &[TokenId], history: &[TokenId], out: &mut [f64]) {
        let row = self.world.row_index(prompt, history);
        for (o, l) in out.iter_mut().zip(log_softmax(self.world.row(self.logits, row))) {
            *o = l.exp();
        }
    }
}

/// Samples from the teacher table.
pub struct TeacherPolicy<'a>(pub &'a SimWorld);

impl DecodingPolicy for TeacherPolicy<'_> {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size
    }

    fn next_token_probs(&self, prompt: &[TokenId], history: &[TokenId], out: &mut [f64]) {
        let row = self.0.row_index(prompt, history);
        for (o, l) in out.iter_mut().zip(self.0.teacher_lp(row)) {
            *o = l.exp();
        }
    }
}
