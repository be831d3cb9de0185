//! First-order optimizers over [`Params`] collections.
//!
//! `Adam` carries bias-corrected first and second moments; `AdaGrad` carries
//! a squared-gradient accumulator. Both size their state lazily on the first
//! step so one optimizer value can be constructed before the model is.

use crate::error::{Error, Result};
use crate::numerics::params::Params;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    AdaGrad { eps: f64 },
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: u64,
    /// First moment for Adam; squared-gradient accumulator for AdaGrad.
    m: Vec<f64>,
    /// Second moment for Adam; unused for AdaGrad.
    v: Vec<f64>,
}

impl Optimizer {
    /// Adam with the customary defaults: lr 0.001, beta1 0.9, beta2 0.999,
    /// eps 1e-8.
    pub fn adam_default() -> Self {
        Optimizer::adam(0.001, 0.9, 0.999, 1e-8)
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam { beta1, beta2, eps },
            lr,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adagrad(lr: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::AdaGrad { eps: 1e-8 },
            lr,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. `params` and `grads` must expose identical layouts.
    pub fn step(&mut self, params: &mut dyn Params, grads: &dyn Params) -> Result<()> {
        let n = params.param_count();
        if grads.param_count() != n {
            return Err(Error::Dimension(format!(
                "optimizer step: {} parameters but {} gradients",
                n,
                grads.param_count()
            )));
        }
        if self.m.is_empty() {
            self.m = vec![0.0; n];
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.v = vec![0.0; n];
            }
        } else if self.m.len() != n {
            return Err(Error::State(format!(
                "optimizer was sized for {} parameters, got {}",
                self.m.len(),
                n
            )));
        }

        let mut grad_blocks: Vec<&[f64]> = Vec::new();
        grads.visit(&mut |s| grad_blocks.push(s));

        self.step_count += 1;
        let mut cursor = 0usize;
        let mut block = 0usize;
        let kind = self.kind;
        let lr = self.lr;
        let t = self.step_count as i32;
        let m = &mut self.m;
        let v = &mut self.v;
        params.visit_mut(&mut |theta| {
            let g = grad_blocks[block];
            assert_eq!(theta.len(), g.len(), "optimizer block {} length mismatch", block);
            match kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for i in 0..theta.len() {
                        let j = cursor + i;
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[i];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                OptimizerKind::AdaGrad { eps } => {
                    for i in 0..theta.len() {
                        let j = cursor + i;
                        m[j] += g[i] * g[i];
                        theta[i] -= lr * g[i] / (m[j] + eps).sqrt();
                    }
                }
            }
            cursor += theta.len();
            block += 1;
        });
        Ok(())
    }
}

/// One sparse AdaGrad update on a single embedding row: the accumulator row
/// lives beside the parameter row rather than inside an [`Optimizer`].
pub fn adagrad_update(theta: &mut [f64], grad: &[f64], accum: &mut [f64], lr: f64, eps: f64) {
    debug_assert_eq!(theta.len(), grad.len());
    debug_assert_eq!(theta.len(), accum.len());
    for i in 0..theta.len() {
        accum[i] += grad[i] * grad[i];
        theta[i] -= lr * grad[i] / (accum[i] + eps).sqrt();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linalg::Vector;

    #[test]
    fn zero_gradient_is_a_no_op_for_adagrad() {
        let mut theta = Vector::from_vec(vec![1.0, -2.0]);
        let g = Vector::zeros(2);
        let mut opt = Optimizer::adagrad(0.05);
        opt.step(&mut theta, &g).unwrap();
        assert_eq!(theta.as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn adagrad_first_step_with_unit_gradient() {
        // Accumulator goes to 1, so the step is lr / sqrt(1 + eps) ~= lr.
        let mut theta = Vector::from_vec(vec![0.0]);
        let g = Vector::from_vec(vec![1.0]);
        let mut opt = Optimizer::adagrad(0.05);
        opt.step(&mut theta, &g).unwrap();
        assert!((theta[0] - (-0.05)).abs() < 1e-9);
    }

    #[test]
    fn adagrad_two_steps_hand_computed() {
        // g = 2 both times: step1 = lr*2/sqrt(4), step2 = lr*2/sqrt(8).
        let lr = 0.1;
        let mut theta = Vector::from_vec(vec![0.0]);
        let g = Vector::from_vec(vec![2.0]);
        let mut opt = Optimizer::adagrad(lr);
        opt.step(&mut theta, &g).unwrap();
        opt.step(&mut theta, &g).unwrap();
        let expected = -(lr * 2.0 / (4.0f64 + 1e-8).sqrt()) - (lr * 2.0 / (8.0f64 + 1e-8).sqrt());
        assert!((theta[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_equals_lr_signed() {
        // With bias correction, step one moves by exactly lr * sign(g) up to eps.
        let mut theta = Vector::from_vec(vec![0.0, 0.0]);
        let g = Vector::from_vec(vec![3.0, -0.25]);
        let mut opt = Optimizer::adam_default();
        opt.step(&mut theta, &g).unwrap();
        assert!((theta[0] - (-0.001)).abs() < 1e-6);
        assert!((theta[1] - 0.001).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_hand_rolled_reference() {
        let (lr, b1, b2, eps) = (0.001, 0.9, 0.999, 1e-8);
        let grads = [0.5, -1.5, 0.25];
        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }

        let mut p = Vector::from_vec(vec![1.0]);
        let mut opt = Optimizer::adam(lr, b1, b2, eps);
        for &g in &grads {
            opt.step(&mut p, &Vector::from_vec(vec![g])).unwrap();
        }
        assert!((p[0] - theta).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_mismatched_gradients() {
        let mut theta = Vector::zeros(3);
        let g = Vector::zeros(2);
        let mut opt = Optimizer::adam_default();
        assert!(opt.step(&mut theta, &g).is_err());
    }

    #[test]
    fn sparse_kernel_matches_dense_adagrad() {
        let mut dense = Vector::from_vec(vec![0.4, -0.7]);
        let mut opt = Optimizer::adagrad(0.05);
        let g = Vector::from_vec(vec![0.3, 1.1]);
        opt.step(&mut dense, &g).unwrap();
        opt.step(&mut dense, &g).unwrap();

        let mut sparse = [0.4, -0.7];
        let mut accum = [0.0, 0.0];
        adagrad_update(&mut sparse, g.as_slice(), &mut accum, 0.05, 1e-8);
        adagrad_update(&mut sparse, g.as_slice(), &mut accum, 0.05, 1e-8);
        for i in 0..2 {
            assert!((dense[i] - sparse[i]).abs() < 1e-15);
        }
    }
}
