//! AdamW with decoupled weight decay, warmup schedules and gradient clipping.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::model::Param;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup, then flat at the peak.
    Constant,
    /// Linear warmup, then cosine decay to zero at the last step.
    Cosine,
}

/// Learning rate at `step`: `peak · step / warmup` during warmup.
pub fn learning_rate(step: usize, warmup: usize, total: usize, peak: f64, schedule: LrSchedule) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    match schedule {
        LrSchedule::Constant => peak,
        LrSchedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let t = ((step - warmup) as f64 / span).min(1.0);
            0.5 * peak * (1.0 + num_traits::Float::cos(core::f64::consts::PI * t))
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .params
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.params.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Update count per parameter, for bias correction.
    t: Vec<u64>,
}

impl AdamW {
    pub fn new<T>(params: &[Param<T>], betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            t: vec![0; params.len()],
        }
    }

    /// One update. Parameters without a gradient are left untouched, decay
    /// included. Weight decay applies to matrices only (not biases, norms).
    pub fn step<T: Scalar>(&mut self, params: &mut [Param<T>], grads: &Gradients<T>, lr: f64) {
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.params.get(i).and_then(Option::as_ref) else {
                continue;
            };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - num_traits::Float::powi(self.beta1, t);
            let bc2 = 1.0 - num_traits::Float::powi(self.beta2, t);
            let decay = if p.is_matrix() { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                let gk = g[k].f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                let w = p.data[k].f64();
                let upd = w - decay * w - lr * mh / (vh.sqrt() + self.eps);
                p.data[k] = T::of(upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoints() {
        assert_eq!(learning_rate(0, 100, 1000, 1e-4, LrSchedule::Constant), 0.0);
        assert_eq!(learning_rate(100, 100, 1000, 1e-4, LrSchedule::Constant), 1e-4);
        assert_eq!(learning_rate(50, 100, 1000, 1e-4, LrSchedule::Constant), 5e-5);
        assert_eq!(learning_rate(900, 100, 1000, 1e-4, LrSchedule::Constant), 1e-4);
        assert!((learning_rate(100, 100, 1000, 1e-4, LrSchedule::Cosine) - 1e-4).abs() < 1e-18);
        assert!(learning_rate(1000, 100, 1000, 1e-4, LrSchedule::Cosine).abs() < 1e-18);
        assert_eq!(learning_rate(5, 0, 10, 1e-3, LrSchedule::Constant), 1e-3);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = Gradients {
            params: vec![Some(vec![3.0f64, 0.0]), None, Some(vec![4.0])],
        };
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        let after: f64 = g.params.iter().flatten().flatten().map(|v| v * v).sum();
        assert!((after.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr_and_skips_missing_grads() {
        let mut params = vec![
            Param { name: "w".into(), shape: vec![1, 2], data: vec![1.0f64, -1.0] },
            Param { name: "b".into(), shape: vec![1], data: vec![0.5] },
        ];
        let mut opt = AdamW::new(&params, (0.9, 0.999), 1e-12, 0.0);
        let g = Gradients { params: vec![Some(vec![0.3, -2.0]), None] };
        opt.step(&mut params, &g, 0.01);
        assert!((params[0].data[0] - 0.99).abs() < 1e-9);
        assert!((params[0].data[1] + 0.99).abs() < 1e-9);
        assert_eq!(params[1].data[0], 0.5);
    }

    #[test]
    fn decay_is_decoupled_and_matrix_only() {
        let mut params = vec![
            Param { name: "w".into(), shape: vec![1, 1], data: vec![2.0f64] },
            Param { name: "b".into(), shape: vec![1], data: vec![2.0] },
        ];
        let mut opt = AdamW::new(&params, (0.9, 0.999), 1e-8, 0.1);
        let g = Gradients { params: vec![Some(vec![0.0]), Some(vec![0.0])] };
        opt.step(&mut params, &g, 0.5);
        assert!((params[0].data[0] - 1.9).abs() < 1e-12);
        assert_eq!(params[1].data[0], 2.0);
    }
}
