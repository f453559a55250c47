//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use super::params::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad adam config {self:?}")))
        }
    }
}

/// Moments for every parameter block, laid out in visit order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(vec![0.0; t.len()]));
        let v = m.clone();
        Self { config, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> impl Iterator<Item = &f64> {
        self.v.iter().flatten()
    }

    /// One update of `params` against `grads`, which must share its structure.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut grad_blocks = Vec::with_capacity(self.m.len());
        grads.visit(&mut |_, t| grad_blocks.push(t.as_slice().to_vec()));
        let mut shapes_ok = grad_blocks.len() == self.m.len();
        let mut idx = 0;
        params.visit(&mut |_, t| {
            shapes_ok &= grad_blocks.get(idx).is_some_and(|g| g.len() == t.len())
                && self.m.get(idx).is_some_and(|m| m.len() == t.len());
            idx += 1;
        });
        if !shapes_ok || idx != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                "grads shaped like params",
                "mismatched blocks",
            ));
        }

        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut idx = 0;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, t| {
            adam_update(
                t.as_mut_slice(),
                &grad_blocks[idx],
                &mut m_all[idx],
                &mut v_all[idx],
                &c,
                bc1,
                bc2,
            );
            idx += 1;
        });
        Ok(())
    }
}

fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    c: &AdamConfig,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..p.len() {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor2;

    #[derive(Clone)]
    struct Two(Tensor2, Tensor2);

    impl Parameters for Two {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2)) {
            f("a", &self.0);
            f("b", &self.1);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2)) {
            f("a", &mut self.0);
            f("b", &mut self.1);
        }
    }

    fn two(a: &[f64], b: &[f64]) -> Two {
        Two(Tensor2::row_vector(a), Tensor2::row_vector(b))
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = AdamConfig::default();
        assert_eq!(c.lr, 1e-7);
        assert_eq!(c.beta1, 0.9);
        assert_eq!(c.beta2, 0.999);
        assert_eq!(c.eps, 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = two(&[1.0, -2.0], &[3.0]);
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default().with_lr(0.1), &p);
        for _ in 0..3 {
            let z = p.zeroed();
            s.step(&mut p, &z).unwrap();
        }
        assert_eq!(p.0, before.0);
        assert_eq!(p.1, before.1);
        assert_eq!(s.step_count(), 3);
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let lr = 0.01;
        let mut p = two(&[0.5], &[0.5]);
        let g = two(&[3.0], &[-0.2]);
        let mut s = AdamState::new(AdamConfig::default().with_lr(lr), &p);
        s.step(&mut p, &g).unwrap();
        // t=1: m̂ = g, v̂ = g², update = lr·g/(|g| + ε)
        let expect_a = 0.5 - lr * 3.0 / (3.0 + 1e-8);
        let expect_b = 0.5 + lr * 0.2 / (0.2 + 1e-8);
        assert!((p.0[(0, 0)] - expect_a).abs() < 1e-15);
        assert!((p.1[(0, 0)] - expect_b).abs() < 1e-15);
        assert!(((0.5 - p.0[(0, 0)]) - lr).abs() < 1e-9);
    }

    #[test]
    fn deterministic_and_nonnegative_second_moment() {
        let g = two(&[0.3, -1.1], &[2.0]);
        let run = || {
            let mut p = two(&[1.0, 2.0], &[3.0]);
            let mut s = AdamState::new(AdamConfig::default().with_lr(1e-3), &p);
            for _ in 0..5 {
                s.step(&mut p, &g).unwrap();
            }
            assert!(s.second_moments().all(|v| *v >= 0.0));
            p
        };
        let (a, b) = (run(), run());
        let bits = |p: &Two| {
            p.0.as_slice()
                .iter()
                .chain(p.1.as_slice())
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = two(&[1.0, 2.0], &[3.0]);
        let g = two(&[1.0], &[3.0]);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        assert!(s.step(&mut p, &g).is_err());
        assert_eq!(s.step_count(), 0);
    }
}
