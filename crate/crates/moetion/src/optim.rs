//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::{quantize, Tensor};

const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moment state.
struct Moments {
    m: Tensor,
    v: Tensor,
}

pub struct AdamW {
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    step: u64,
    state: BTreeMap<usize, Moments>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Paper defaults: beta = (0.9, 0.99), no weight decay.
    pub fn default_betas() -> Self {
        AdamW::new(0.9, 0.99, 0.0)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable parameter that has a gradient.
    /// Rejects non-finite gradients before touching any state.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                context: "gradients".into(),
                step: self.step + 1,
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let moments = self.state.entry(id.index()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape().to_vec()),
                v: Tensor::zeros(g.shape().to_vec()),
            });
            assert_eq!(
                moments.m.shape(),
                g.shape(),
                "moment shape mismatch for {}",
                store.name(id)
            );
            let theta = store.value_mut(id);
            for i in 0..g.numel() {
                let gv = g.data()[i];
                let m = quantize(self.beta1 * moments.m.data()[i] + (1.0 - self.beta1) * gv);
                let v = quantize(self.beta2 * moments.v.data()[i] + (1.0 - self.beta2) * gv * gv);
                moments.m.data_mut()[i] = m;
                moments.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let mut p = theta.data()[i];
                if self.weight_decay != 0.0 {
                    p *= 1.0 - lr * self.weight_decay;
                }
                theta.data_mut()[i] = quantize(p - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Learning-rate schedule over a fixed step budget.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub initial: f64,
    pub minimum: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            kind: ScheduleKind::Constant,
            initial: lr,
            minimum: lr,
            total_steps: 1,
        }
    }

    pub fn cosine(initial: f64, minimum: f64, total_steps: u64) -> Self {
        assert!(total_steps > 0, "cosine schedule needs total_steps > 0");
        LrSchedule {
            kind: ScheduleKind::Cosine,
            initial,
            minimum,
            total_steps,
        }
    }

    pub fn rate(&self, t: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.initial,
            ScheduleKind::Cosine => cosine_lr(t, self.total_steps, self.initial, self.minimum),
        }
    }
}

/// Cosine annealing: `lr_min + 0.5 (lr0 - lr_min) (1 + cos(pi t / T))`.
pub fn cosine_lr(t: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    assert!(total > 0, "cosine_lr with T = 0");
    assert!(t <= total, "cosine_lr with t > T");
    let frac = t as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use crate::tensor::{Precision, PrecisionGuard};
    use approx::assert_abs_diff_eq;

    fn single_param_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(vec![1], vec![v]), true);
        (s, id)
    }

    fn grads_for(store: &ParamStore, id: ParamId, g: f64) -> Gradients {
        let mut tape = crate::tape::Tape::new();
        let w = tape.param(store, id);
        let scaled = tape.scale(w, g);
        let loss = tape.sum(scaled);
        tape.backward(loss);
        tape.param_grads()
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let (mut s, id) = single_param_store(1.5);
        let mut opt = AdamW::default_betas();
        let grads = grads_for(&s, id, 0.0);
        opt.step(&mut s, &grads, 0.1).unwrap();
        assert_eq!(s.value(id).item(), 1.5);
    }

    #[test]
    fn first_step_is_bias_corrected_unit_update() {
        let _g = PrecisionGuard::new(Precision::F64);
        let (mut s, id) = single_param_store(0.0);
        let mut opt = AdamW::default_betas();
        let grads = grads_for(&s, id, 1.0);
        opt.step(&mut s, &grads, 0.1).unwrap();
        // m_hat = v_hat = 1 after bias correction, so the update is -lr.
        assert_abs_diff_eq!(s.value(id).item(), -0.1, epsilon = 1e-6);
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let _g = PrecisionGuard::new(Precision::F64);
        let (mut s, id) = single_param_store(0.5);
        let mut opt = AdamW::new(0.9, 0.99, 0.0);
        let (lr, g1, g2) = (0.05, 0.8, -0.3);

        // Independent scalar recurrence.
        let (b1, b2) = (0.9, 0.99);
        let mut theta = 0.5;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1_pow(b1, t));
            let vh = v / (1.0 - b1_pow(b2, t));
            theta -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }

        for g in [g1, g2] {
            let grads = grads_for(&s, id, g);
            opt.step(&mut s, &grads, lr).unwrap();
        }
        assert_abs_diff_eq!(s.value(id).item(), theta, epsilon = 1e-12);
    }

    fn b1_pow(b: f64, t: i32) -> f64 {
        b.powi(t)
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut s, id) = single_param_store(1.0);
        let mut opt = AdamW::default_betas();
        let mut bad = Gradients::default();
        bad.insert(id, Tensor::from_vec(vec![1], vec![f64::NAN]));
        let err = opt.step(&mut s, &bad, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        // No state was touched.
        assert_eq!(opt.step_count(), 0);
        assert_eq!(s.value(id).item(), 1.0);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_abs_diff_eq!(cosine_lr(0, 100, 3e-3, 1e-5), 3e-3, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_lr(100, 100, 3e-3, 1e-5), 1e-5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            cosine_lr(50, 100, 3e-3, 1e-5),
            (3e-3 + 1e-5) / 2.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn cosine_is_monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for t in 0..=200 {
            let r = cosine_lr(t, 200, 1.0, 0.01);
            assert!(r <= prev + 1e-15);
            prev = r;
        }
    }

    #[test]
    #[should_panic(expected = "T = 0")]
    fn cosine_zero_total_rejected() {
        cosine_lr(0, 0, 1.0, 0.0);
    }
}
