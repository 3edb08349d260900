use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr0 * (1 - epoch / epochs)^exponent`.
    Poly { exponent: f64 },
    Constant,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Poly { exponent: 0.9 }
    }
}

pub fn lr_at(epoch: usize, epochs: usize, lr0: f64, schedule: LrSchedule) -> f64 {
    match schedule {
        LrSchedule::Constant => lr0,
        LrSchedule::Poly { exponent } => lr0 * (1.0 - epoch as f64 / epochs.max(1) as f64).max(0.0).powf(exponent),
    }
}

/// SGD with Nesterov momentum: `v = μv + g`, `p -= lr (g + μv)`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f32,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64) -> Self {
        Sgd {
            momentum: momentum as f32,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.velocity.len());
        let (mu, lr) = (self.momentum, lr as f32);
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = mu * *v + g;
            *p -= lr * (g + mu * *v);
        }
    }
}

/// Rescales `grads` so their Euclidean norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_values() {
        let poly = LrSchedule::default();
        assert_eq!(lr_at(0, 750, 0.01, poly), 0.01);
        assert!((lr_at(375, 750, 0.01, poly) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((lr_at(375, 750, 0.01, poly) - 0.005359).abs() < 1e-6);
        let last = lr_at(749, 750, 0.01, poly);
        assert!(last > 0.0 && (last - 0.01 * (1.0f64 / 750.0).powf(0.9)).abs() < 1e-15);
        assert_eq!(lr_at(300, 750, 0.005, LrSchedule::Constant), 0.005);
    }

    #[test]
    fn nesterov_matches_hand_unrolled_updates() {
        let mut opt = Sgd::new(1, 0.5);
        let mut p = [1.0f32];
        opt.step(&mut p, &[2.0], 0.1);
        // v = 2, p = 1 - 0.1 * (2 + 1) = 0.7
        assert!((p[0] - 0.7).abs() < 1e-6);
        opt.step(&mut p, &[1.0], 0.1);
        // v = 0.5*2 + 1 = 2, p = 0.7 - 0.1 * (1 + 1) = 0.5
        assert!((p[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0f32, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
        let mut h = vec![0.1f32];
        clip_grad_norm(&mut h, 1.0);
        assert_eq!(h, vec![0.1]);
    }
}
