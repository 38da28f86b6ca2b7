//! Parameter initialization and the Adam optimizer.

use crate::tensor::{Prng, Tensor};
use rand::Rng;

/// Xavier/Glorot uniform init: U(-limit, limit), limit = sqrt(6/(fan_in+fan_out)).
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut Prng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random::<f64>() * 2.0 * limit - limit)
        .collect();
    Tensor::matrix(rows, cols, data).unwrap().with_grad()
}

pub fn zeros_param(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

pub fn ones_param(n: usize) -> Tensor {
    Tensor::vector(vec![1.0; n]).unwrap().with_grad()
}

/// Adam with bias correction. Moment slots are keyed by position, so `step`
/// must always receive the same parameters in the same order.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update to every parameter that has a gradient, then clears
    /// the gradients. Parameters without a gradient keep their moments.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed between steps");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad.take() else { continue };
            assert_eq!(grad.len(), p.numel());
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = p.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use rand::SeedableRng;

    #[test]
    fn xavier_respects_limit_and_seed() {
        let mut rng = Prng::seed_from_u64(3);
        let w = xavier_uniform(8, 4, &mut rng);
        let limit = (6.0 / 12.0f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(w.requires_grad);
        let mut rng2 = Prng::seed_from_u64(3);
        let w2 = xavier_uniform(8, 4, &mut rng2);
        assert_eq!(w.data(), w2.data());
    }

    #[test]
    fn adam_first_step_is_lr_sized_and_converges_on_quadratic() {
        // f(w) = (w - 3)^2
        let mut w = Tensor::scalar(0.0).unwrap().with_grad();
        let mut opt = Adam::new(0.1);
        for step in 0..400 {
            let mut tape = Tape::new();
            let v = tape.leaf(&w);
            let c = tape.constant_scalar(3.0).unwrap();
            let d = tape.sub(v, c).unwrap();
            let loss = tape.sum_squares(d).unwrap();
            tape.backward(loss).unwrap();
            w.grad = tape.grad(v).map(|g| g.to_vec());
            let before = w.data()[0];
            opt.step(&mut [&mut w]);
            if step == 0 {
                // bias-corrected first step is lr * g/(|g| + eps) ~= lr
                let moved = (w.data()[0] - before).abs();
                assert!((moved - 0.1).abs() < 1e-6, "first step {moved}");
            }
        }
        assert!((w.data()[0] - 3.0).abs() < 1e-3, "converged to {}", w.data()[0]);
    }

    #[test]
    fn adam_trajectories_are_bitwise_reproducible() {
        let run = || {
            let mut rng = Prng::seed_from_u64(7);
            let mut w = xavier_uniform(3, 3, &mut rng);
            let mut opt = Adam::new(0.01);
            let mut trace = Vec::new();
            for _ in 0..20 {
                let mut tape = Tape::new();
                let v = tape.leaf(&w);
                let loss = tape.sum_squares(v).unwrap();
                tape.backward(loss).unwrap();
                w.grad = tape.grad(v).map(|g| g.to_vec());
                opt.step(&mut [&mut w]);
                trace.extend_from_slice(w.data());
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_composes_with_initialized_weights() {
        let mut rng = Prng::seed_from_u64(11);
        let w = xavier_uniform(4, 3, &mut rng);
        let err = grad_check(
            |tape, v| {
                let wv = tape.constant(w.clone());
                let y = tape.matmul(v, wv)?;
                let a = tape.gelu(y)?;
                tape.sum_squares(a)
            },
            &Tensor::matrix(2, 4, vec![0.3, -0.8, 1.1, 0.2, -0.4, 0.9, -1.3, 0.5]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}
