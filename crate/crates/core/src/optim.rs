//! Adam with coupled L2 weight decay, and the step learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::config::TrainConfig;
use crate::math;
use crate::nn::{Param, ParamVisitor};

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * math::powi(cfg.decay_factor, (epoch / cfg.decay_every) as i32)
}

/// Adam over every trainable parameter reached by a visitor. The decay term
/// is added to the gradient before the moment updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    /// First and second moments, in visiting order of the trainable parameters.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    /// One update; gradients are consumed (zeroed).
    pub fn step(&mut self, lr: f64, visit_all: impl FnOnce(&mut ParamVisitor<'_>)) {
        let wd = self.weight_decay;
        self.step_grouped(lr, |_| (1.0, wd), visit_all);
    }

    /// As [`Adam::step`], with per-parameter settings: `group(name)` gives a
    /// learning-rate multiplier and the weight decay to use.
    pub fn step_grouped(
        &mut self,
        lr: f64,
        group: impl Fn(&str) -> (f64, f64),
        visit_all: impl FnOnce(&mut ParamVisitor<'_>),
    ) {
        self.t += 1;
        let bc1 = 1.0 - math::powi(self.beta1, self.t as i32);
        let bc2 = 1.0 - math::powi(self.beta2, self.t as i32);
        let mut idx = 0;
        let mut update = |name: &str, p: &mut Param| {
            if !p.trainable {
                return;
            }
            let (scale, wd) = group(name);
            let lr = lr * scale;
            if idx == self.m.len() {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            assert_eq!(m.len(), p.len(), "optimizer state does not match parameter {idx}");
            for j in 0..p.len() {
                let g = p.grad[j] + wd * p.value[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                p.value[j] -= lr * (m[j] / bc1) / (math::sqrt(v[j] / bc2) + self.eps);
                p.grad[j] = 0.0;
            }
            idx += 1;
        };
        visit_all(&mut update);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_every_twenty_epochs() {
        let cfg = TrainConfig::full_scale();
        assert_eq!(lr_schedule(0, &cfg), 1.75e-4);
        assert_eq!(lr_schedule(19, &cfg), 1.75e-4);
        assert_eq!(lr_schedule(20, &cfg), 8.75e-5);
        assert!((lr_schedule(129, &cfg) - 1.75e-4 * 0.5f64.powi(6)).abs() < 1e-20);
    }

    #[test]
    fn desk_schedule() {
        let cfg = TrainConfig::desk();
        assert_eq!(lr_schedule(9, &cfg), 3e-3);
        assert_eq!(lr_schedule(10, &cfg), 1.5e-3);
        assert_eq!(lr_schedule(29, &cfg), 7.5e-4);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = Param::new(&[3], vec![1.0, -2.0, 0.5]);
        p.grad = vec![0.3, -4.0, 0.0];
        let mut adam = Adam::new(0.9, 0.999, 1e-8, 0.0);
        adam.step(0.01, |f| f("p", &mut p));
        assert!((p.value[0] - 0.99).abs() < 1e-9);
        assert!((p.value[1] + 1.99).abs() < 1e-9);
        assert_eq!(p.value[2], 0.5);
        assert!(p.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn groups_target_named_params() {
        let mut a = Param::new(&[1], vec![1.0]);
        let mut b = Param::new(&[1], vec![1.0]);
        a.grad = vec![1.0];
        b.grad = vec![1.0];
        let mut adam = Adam::new(0.9, 0.999, 1e-8, 0.0);
        adam.step_grouped(
            0.01,
            |n| if n == "b" { (10.0, 0.0) } else { (1.0, 0.0) },
            |f| {
                f("a", &mut a);
                f("b", &mut b);
            },
        );
        assert!((a.value[0] - 0.99).abs() < 1e-9);
        assert!((b.value[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn buffers_are_untouched() {
        let mut b = Param::buffer(&[2], 3.0);
        b.grad = vec![1.0, 1.0];
        let mut adam = Adam::new(0.9, 0.999, 1e-8, 5e-4);
        adam.step(0.1, |f| f("b", &mut b));
        assert_eq!(b.value, vec![3.0, 3.0]);
        assert!(adam.m.is_empty());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(&[2], vec![3.0, -1.0]);
        let mut adam = Adam::new(0.9, 0.999, 1e-8, 0.0);
        for _ in 0..2000 {
            p.grad = p.value.iter().map(|x| 2.0 * (x - 0.5)).collect();
            adam.step(0.01, |f| f("p", &mut p));
        }
        assert!(p.value.iter().all(|x| (x - 0.5).abs() < 1e-3));
    }
}
