//! Adaptive-moment (Adam) updates over flat parameter slices.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay. Moments are kept in `f64` regardless of the
/// parameter type.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Changes the learning rate for subsequent steps; moments are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Applies one update to `params` from `grad`.
    pub fn step<T: Real>(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g.as_f64();
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *p -= T::lit(update);
        }
    }

    /// Like [`Adam::step`] with the update of coordinate `i` multiplied by `scale[i]`.
    pub fn step_scaled<T: Real>(&mut self, params: &mut [T], grad: &[T], scale: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        assert_eq!(scale.len(), self.m.len());
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for ((((p, &g), m), v), &s) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v).zip(scale) {
            let g = g.as_f64();
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let update = s * lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *p -= T::lit(update);
        }
    }

    /// The update `step` would apply, without mutating anything.
    pub fn peek_update<T: Real>(&self, grad: &[T]) -> Vec<f64> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.t + 1;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        grad.iter()
            .zip(&self.m)
            .zip(&self.v)
            .map(|((&g, &m), &v)| {
                let g = g.as_f64();
                let m = beta1 * m + (1.0 - beta1) * g;
                let v = beta2 * v + (1.0 - beta2) * g * g;
                lr * (m / bc1) / ((v / bc2).sqrt() + eps)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected first step is lr * sign(g) (up to eps)
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), 3);
        let mut p = vec![1.0f64, 1.0, 1.0];
        adam.step(&mut p, &[2.0, -0.5, 0.0]);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] - 1.1).abs() < 1e-7);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), 2);
        let mut p = vec![3.0f64, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            adam.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2);
    }

    #[test]
    fn peek_matches_step() {
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), 2);
        let mut p = vec![0.0f64, 0.0];
        adam.step(&mut p, &[1.0, 2.0]);
        let predicted = adam.peek_update(&[0.5f64, -1.0]);
        let before = p.clone();
        adam.step(&mut p, &[0.5, -1.0]);
        for i in 0..2 {
            assert!((before[i] - p[i] - predicted[i]).abs() < 1e-15);
        }
    }
}
