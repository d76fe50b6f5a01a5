//! First-order optimizers over flat parameter lists.

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. `params` and `grads` must keep the same
    /// order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "parameter/gradient shape mismatch");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// SGD with heavy-ball momentum and coupled L2 weight decay,
/// the usual `v = mu * v + (g + wd * w); w -= lr * v` form.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let vel = &mut self.velocity[i];
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let d = gj + self.weight_decay * *w;
                vel[j] = self.momentum * vel[j] + d;
                *w -= lr * vel[j];
            }
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut adam = Adam::new(0.1);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&g]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        for g0 in [1e-4, 0.3, 25.0, -7.0] {
            let mut p = Tensor::vector(vec![0.0]);
            let g = Tensor::vector(vec![g0]);
            let mut adam = Adam::new(0.01);
            adam.step(&mut [&mut p], &[&g]);
            let expected = -0.01 * g0 / (g0.abs() + 1e-8);
            assert!((p.item() - expected).abs() < 1e-9, "g={g0}: {}", p.item());
            assert!((p.item().abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn descends_a_parabola() {
        let mut x = Tensor::vector(vec![1.0]);
        let mut adam = Adam::new(0.1);
        for _ in 0..100 {
            let g = Tensor::vector(vec![2.0 * x.item()]);
            adam.step(&mut [&mut x], &[&g]);
        }
        assert!(x.item().abs() < 0.1, "x = {}", x.item());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = Tensor::vector(vec![0.0]);
        let g = Tensor::vector(vec![1.0]);
        let mut sgd = Sgd::new(0.9, 0.0);
        sgd.step(1.0, &mut [&mut p], &[&g]);
        sgd.step(1.0, &mut [&mut p], &[&g]);
        assert!((p.item() + 2.9).abs() < 1e-12);
    }
}
