//! Adam and learning-rate schedules.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(n: usize) -> Self {
        Self::with_hyperparameters(n, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected Adam update of `params`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::invalid("adam: parameter, gradient and state lengths differ"));
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NumericalFailure(alloc::format!(
                "adam: non-finite gradient entry {k} ({}) at step {}",
                grad[k],
                self.t + 1
            )));
        }
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (libm::sqrt(vh) + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `max(floor, base · factor^⌊epoch / interval⌋)`.
    StepDecay {
        base: f64,
        factor: f64,
        interval: usize,
        floor: f64,
    },
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule::Constant { lr }
    }

    pub fn step_decay(base: f64, factor: f64, interval: usize, floor: f64) -> Self {
        LrSchedule::StepDecay {
            base,
            factor,
            interval,
            floor,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::StepDecay {
                base,
                factor,
                interval,
                floor,
            } => {
                let k = epoch / interval.max(1);
                let lr = base * libm::pow(factor, k as f64);
                if lr > floor {
                    lr
                } else {
                    floor
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { lr } => lr > 0.0 && lr.is_finite(),
            LrSchedule::StepDecay {
                base,
                factor,
                interval,
                floor,
            } => base > 0.0 && factor > 0.0 && factor <= 1.0 && interval > 0 && floor >= 0.0 && base.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("learning-rate schedule has invalid parameters"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_signed_lr() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, 1.0, 1.0];
        s.step(&mut p, &[2.0, -0.5, 1e-3], 1e-2).unwrap();
        for (x, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - (1.0 + sign * 1e-2)).abs() < 1e-7);
        }
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = AdamState::new(2);
        let mut p = vec![0.3, -0.4];
        s.step(&mut p, &[1.0, 1.0], 0.1).unwrap();
        let before = p.clone();
        let m_before = s.m.clone();
        s.step(&mut p, &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(p, before);
        assert!(s.m.iter().zip(&m_before).all(|(a, b)| a.abs() < b.abs()));
        let mut s2 = AdamState::new(2);
        let mut q = vec![0.3, -0.4];
        s2.step(&mut q, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(q, vec![0.3, -0.4]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = AdamState::new(1);
        let mut p = vec![0.0];
        assert!(s.step(&mut p, &[f64::NAN], 0.1).is_err());
        assert_eq!(s.t, 0);
    }

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::constant(1e-4).lr_at(123_456), 1e-4);
        let s = LrSchedule::step_decay(1e-4, 0.8, 1000, 1e-6);
        assert_eq!(s.lr_at(999), 1e-4);
        assert!((s.lr_at(1000) - 8e-5).abs() < 1e-20);
        assert_eq!(s.lr_at(1_000_000), 1e-6);
        assert!(LrSchedule::step_decay(1e-4, 0.8, 0, 1e-6).validate().is_err());
    }
}
