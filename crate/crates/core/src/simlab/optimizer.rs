//! Plain SGD and a dense adaptive-moment optimizer over the logit table.

use super::{OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, n: usize) -> Self {
        let (m, v) = match config.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::AdaptiveMoment => (vec![0.0; n], vec![0.0; n]),
        };
        Self {
            config: config.clone(),
            t: 0,
            m,
            v,
        }
    }

    /// Applies one step. `grad` is sparse: (offset, row gradient) pairs.
    /// Entries at −∞ are never touched.
    pub fn step(&mut self, params: &mut [f64], grad: &[(usize, Vec<f64>)]) {
        self.t += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (off, g) in grad {
                    for (p, gi) in params[*off..*off + g.len()].iter_mut().zip(g) {
                        if p.is_finite() {
                            *p -= lr * gi;
                        }
                    }
                }
            }
            OptimizerKind::AdaptiveMoment => {
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.epsilon);
                let mut dense = vec![0.0; params.len()];
                for (off, g) in grad {
                    dense[*off..*off + g.len()].copy_from_slice(g);
                }
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for i in 0..params.len() {
                    if !params[i].is_finite() {
                        continue;
                    }
                    let g = dense[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    if self.m[i] != 0.0 {
                        params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_and_adam_first_step() {
        let mut p = vec![1.0, f64::NEG_INFINITY, 0.0];
        let mut s = OptimizerState::new(&OptimizerConfig::default(), 3);
        s.config.learning_rate = 0.5;
        s.step(&mut p, &[(0, vec![0.2, 0.3, -0.2])]);
        assert_eq!(p, vec![0.9, f64::NEG_INFINITY, 0.1]);

        let mut p = vec![1.0, 2.0];
        let mut s = OptimizerState::new(&OptimizerConfig::adaptive_moment(0.1), 2);
        s.step(&mut p, &[(0, vec![0.5])]);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert_eq!(p[1], 2.0);
    }
}
