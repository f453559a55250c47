//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{with_entry_mut, Parameters};
use crate::tensor::Tensor2;

/// Denominator floor of [`rel_err`]; keeps near-zero gradients from turning
/// floating-point noise into huge relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over entries of `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| entry_rel_err(a, n))
        .fold(0.0, f64::max)
}

fn entry_rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Central-difference gradient of scalar `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor2, step: f64, mut f: impl FnMut(&Tensor2) -> f64) -> Tensor2 {
    let mut work = x.clone();
    let mut out = Tensor2::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = work.as_slice()[i];
        work.as_mut_slice()[i] = orig + step;
        let plus = f(&work);
        work.as_mut_slice()[i] = orig - step;
        let minus = f(&work);
        work.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (plus - minus) / (2.0 * step);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }

    pub fn worst_block(&self) -> Option<&BlockReport> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Which entries of each block to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most `per_block` entries per block, drawn with the given seed.
    Sample { per_block: usize, seed: u64 },
}

/// Compares `analytic` (structured like `params`) against central differences of `loss`.
pub fn check_parameters<P, F>(
    params: &P,
    analytic: &P,
    step: f64,
    coverage: Coverage,
    mut loss: F,
) -> GradCheckReport
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    let mut grads = Vec::new();
    analytic.visit(&mut |_, t| grads.push(t.as_slice().to_vec()));
    let mut blocks = Vec::new();
    params.visit(&mut |name, t| blocks.push((name.to_string(), t.len())));

    let mut rng = match coverage {
        Coverage::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::All => None,
    };

    let mut work = params.clone();
    let mut reports = Vec::with_capacity(blocks.len());
    for (b, (name, len)) in blocks.into_iter().enumerate() {
        let entries: Vec<usize> = match (coverage, rng.as_mut()) {
            (Coverage::Sample { per_block, .. }, Some(rng)) if per_block < len => {
                let mut idx = sample(rng, len, per_block).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &e in &entries {
            let mut orig = 0.0;
            with_entry_mut(&mut work, b, e, |v| {
                orig = *v;
                *v = orig + step;
            });
            let plus = loss(&work);
            with_entry_mut(&mut work, b, e, |v| *v = orig - step);
            let minus = loss(&work);
            with_entry_mut(&mut work, b, e, |v| *v = orig);
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads[b][e];
            max_rel = max_rel.max(entry_rel_err(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        reports.push(BlockReport {
            name,
            entries_checked: entries.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    GradCheckReport { step, blocks: reports }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_grad_of_quadratic() {
        let x = Tensor2::row_vector(&[1.0, -2.0, 0.5]);
        let g = numeric_grad(&x, DEFAULT_STEP, |t| t.as_slice().iter().map(|v| v * v).sum());
        assert!(rel_err(g.as_slice(), &[2.0, -4.0, 1.0]) < 1e-9);
    }

    #[test]
    fn floor_bounds_tiny_gradients() {
        assert!(rel_err(&[1e-12], &[0.0]) < 1e-5);
        assert!((rel_err(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-15);
    }
}
