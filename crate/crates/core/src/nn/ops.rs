//! Differentiable primitives with hand-written backward passes.
//!
//! Every forward function here has a matching `*_backward` that maps the
//! upstream gradient to gradients of its inputs and parameters. Weights use
//! the `[out × in]` layout, so a linear map is `X·Wᵀ + b` row-wise.

use crate::error::{Error, Result};
use crate::tensor::{axpy, Tensor2};

/// Additive mask value applied before softmax for forbidden positions.
pub const MASK_VALUE: f64 = -1e9;

/// Variance regularizer of [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub input: Tensor2,
}

/// `out = X·Wᵀ + b`, with `W: [out × in]`, `b: [out]`, `X: [n × in]`.
pub fn linear(weight: &Tensor2, bias: &[f64], input: &Tensor2) -> Result<Tensor2> {
    if bias.len() != weight.rows() {
        return Err(Error::shape("linear bias", weight.rows(), bias.len()));
    }
    let mut out = input.matmul_t(weight)?;
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn linear_backward(weight: &Tensor2, input: &Tensor2, grad_out: &Tensor2) -> Result<LinearGrads> {
    grad_out.expect_shape("linear_backward", (input.rows(), weight.rows()))?;
    Ok(LinearGrads {
        weight: grad_out.t_matmul(input)?,
        bias: grad_out.col_sums(),
        input: grad_out.matmul(weight)?,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient through row-wise softmax given its output `y`.
pub fn softmax_rows_backward(y: &Tensor2, grad_out: &Tensor2) -> Result<Tensor2> {
    grad_out.expect_shape("softmax_rows_backward", y.shape())?;
    let mut dx = Tensor2::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let yr = y.row(i);
        let gr = grad_out.row(i);
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yy), &g) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
            *d = yy * (g - inner);
        }
    }
    Ok(dx)
}

/// Per-vector normalization cache needed by the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor2,
    pub inv_std: Vec<f64>,
}

/// Layer normalization of a single vector: `gain ⊙ (x − μ)/√(σ² + ε) + bias`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let t = Tensor2::row_vector(x);
    let (out, _) = layer_norm_rows(&t, gain, bias)?;
    Ok(out.into_vec())
}

/// Layer normalization applied independently to every row.
pub fn layer_norm_rows(x: &Tensor2, gain: &[f64], bias: &[f64]) -> Result<(Tensor2, LayerNormCache)> {
    let n = x.cols();
    if n < 2 {
        return Err(Error::invalid(format!(
            "layer_norm needs at least 2 features, got {n}"
        )));
    }
    if gain.len() != n || bias.len() != n {
        return Err(Error::shape(
            "layer_norm affine",
            n,
            format!("gain {} / bias {}", gain.len(), bias.len()),
        ));
    }
    let mut normalized = Tensor2::zeros(x.rows(), n);
    let mut out = Tensor2::zeros(x.rows(), n);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        for (j, v) in row.iter().enumerate() {
            let xh = (v - mean) * inv;
            normalized[(i, j)] = xh;
            out[(i, j)] = gain[j] * xh + bias[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

#[derive(Debug, Clone)]
pub struct LayerNormGrads {
    pub input: Tensor2,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn layer_norm_rows_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    grad_out: &Tensor2,
) -> Result<LayerNormGrads> {
    let xh = &cache.normalized;
    grad_out.expect_shape("layer_norm_rows_backward", xh.shape())?;
    let n = xh.cols() as f64;
    let mut dx = Tensor2::zeros(xh.rows(), xh.cols());
    let mut dgain = vec![0.0; xh.cols()];
    let mut dbias = vec![0.0; xh.cols()];
    for i in 0..xh.rows() {
        let g = grad_out.row(i);
        let xr = xh.row(i);
        let dxh: Vec<f64> = g.iter().zip(gain).map(|(a, b)| a * b).collect();
        let sum_dxh: f64 = dxh.iter().sum();
        let sum_dxh_xh: f64 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum();
        let scale = cache.inv_std[i] / n;
        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
            *d = scale * (n * dxh[j] - sum_dxh - xr[j] * sum_dxh_xh);
        }
        for j in 0..xr.len() {
            dgain[j] += g[j] * xr[j];
            dbias[j] += g[j];
        }
    }
    Ok(LayerNormGrads {
        input: dx,
        gain: dgain,
        bias: dbias,
    })
}

/// Mean categorical cross-entropy over the rows of `logits`, labels in `1..=C`.
///
/// Returns the loss together with `∂L/∂logits = (softmax − onehot)/N`.
pub fn cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::shape("cross_entropy labels", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::invalid("cross_entropy over zero observations"));
    }
    let mut grad = Tensor2::zeros(n, c);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y < 1 || y > c {
            return Err(Error::invalid(format!(
                "label {y} at row {i} outside 1..={c}"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y - 1];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = (row[j] - lse).exp();
        }
        grad[(i, y - 1)] -= 1.0;
    }
    grad.scale(1.0 / n as f64);
    Ok((loss / n as f64, grad))
}

/// Elementwise sigmoid gate `out = σ(X·Wᵀ + b) ⊙ X`; returns `(out, gate)`.
pub fn gate(weight: &Tensor2, bias: &[f64], input: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    let pre = linear(weight, bias, input)?;
    if pre.cols() != input.cols() {
        return Err(Error::shape("gate width", input.cols(), pre.cols()));
    }
    let g = pre.map(sigmoid);
    let out = g.zip_map(input, |a, b| a * b)?;
    Ok((out, g))
}

#[derive(Debug, Clone)]
pub struct GateGrads {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub input: Tensor2,
}

pub fn gate_backward(
    weight: &Tensor2,
    input: &Tensor2,
    gate_values: &Tensor2,
    grad_out: &Tensor2,
) -> Result<GateGrads> {
    grad_out.expect_shape("gate_backward", input.shape())?;
    // out = g ⊙ x, g = σ(pre)
    let mut dpre = Tensor2::zeros(input.rows(), input.cols());
    let mut dx = Tensor2::zeros(input.rows(), input.cols());
    for i in 0..input.rows() {
        let (x, g, d) = (input.row(i), gate_values.row(i), grad_out.row(i));
        for j in 0..x.len() {
            dpre[(i, j)] = d[j] * x[j] * g[j] * (1.0 - g[j]);
            dx[(i, j)] = d[j] * g[j];
        }
    }
    let lin = linear_backward(weight, input, &dpre)?;
    dx.add_assign(&lin.input)?;
    Ok(GateGrads {
        weight: lin.weight,
        bias: lin.bias,
        input: dx,
    })
}

/// Adds `grad` into `acc` (bias-style vectors).
pub(crate) fn accumulate(acc: &mut [f64], grad: &[f64]) {
    axpy(1.0, grad, acc);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_grad, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn linear_identity_and_one_hot() {
        let x = Tensor2::from_vec(2, 3, vec![1., 2., 3., -1., 0., 4.]).unwrap();
        let out = linear(&Tensor2::identity(3), &[0.0; 3], &x).unwrap();
        assert_eq!(out, x);

        let w = Tensor2::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let e1 = Tensor2::from_vec(1, 3, vec![0., 1., 0.]).unwrap();
        let out = linear(&w, &[0.0; 2], &e1).unwrap();
        assert_eq!(out.as_slice(), &[2.0, 5.0]);
    }

    #[test]
    fn linear_dimension_mismatch() {
        let w = Tensor2::zeros(2, 3);
        assert!(linear(&w, &[0.0; 2], &Tensor2::zeros(1, 4)).is_err());
        assert!(linear(&w, &[0.0; 3], &Tensor2::zeros(1, 3)).is_err());
    }

    #[test]
    fn linear_gradient_matches_central_differences() {
        let mut r = rng();
        let w = Tensor2::random_normal(3, 4, 1.0, &mut r);
        let b: Vec<f64> = Tensor2::random_normal(1, 3, 1.0, &mut r).into_vec();
        let x = Tensor2::random_normal(2, 4, 1.0, &mut r);
        let up = Tensor2::random_normal(2, 3, 1.0, &mut r);
        let loss = |w: &Tensor2, b: &[f64], x: &Tensor2| {
            let o = linear(w, b, x).unwrap();
            o.zip_map(&up, |a, c| a * c).unwrap().sum()
        };
        let g = linear_backward(&w, &x, &up).unwrap();

        let nw = numeric_grad(&w, 1e-5, |t| loss(t, &b, &x));
        let nx = numeric_grad(&x, 1e-5, |t| loss(&w, &b, t));
        let bt = Tensor2::row_vector(&b);
        let nb = numeric_grad(&bt, 1e-5, |t| loss(&w, t.as_slice(), &x));
        assert!(rel_err(g.weight.as_slice(), nw.as_slice()) < 1e-6);
        assert!(rel_err(g.input.as_slice(), nx.as_slice()) < 1e-6);
        assert!(rel_err(&g.bias, nb.as_slice()) < 1e-6);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&Tensor2::filled(1, 4, 3.3));
        for v in y.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let y = softmax_rows(&Tensor2::row_vector(&[0.0, MASK_VALUE]));
        assert_eq!(y.as_slice(), &[1.0, 0.0]);
        let y = softmax_rows(&Tensor2::row_vector(&[0.0, f64::NEG_INFINITY]));
        assert_eq!(y.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_backward_matches_central_differences() {
        let mut r = rng();
        let x = Tensor2::random_normal(3, 5, 2.0, &mut r);
        let up = Tensor2::random_normal(3, 5, 1.0, &mut r);
        let y = softmax_rows(&x);
        let dx = softmax_rows_backward(&y, &up).unwrap();
        let nx = numeric_grad(&x, 1e-5, |t| {
            softmax_rows(t).zip_map(&up, |a, b| a * b).unwrap().sum()
        });
        assert!(rel_err(dx.as_slice(), nx.as_slice()) < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[3.0; 5], &[1.0; 5], &[0.0; 5]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));

        // mean 0, variance 1: x̂ = ±1/√(1+ε)
        let out = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2]).unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((out[0] - expect).abs() < 1e-15);
        assert!((out[1] + expect).abs() < 1e-15);

        let x = [0.3, -2.0, 5.0, 1.25];
        let bias = [0.5, -1.0, 2.0, 0.1];
        let out = layer_norm(&x, &[2.0; 4], &bias).unwrap();
        let mean_out = out.iter().sum::<f64>() / 4.0;
        let mean_bias = bias.iter().sum::<f64>() / 4.0;
        assert!((mean_out - mean_bias).abs() < 1e-12);

        assert!(layer_norm(&[1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn layer_norm_gradient_matches_central_differences() {
        let mut r = rng();
        let x = Tensor2::random_normal(3, 6, 1.0, &mut r);
        let gain = Tensor2::random_normal(1, 6, 1.0, &mut r);
        let bias = Tensor2::random_normal(1, 6, 1.0, &mut r);
        let up = Tensor2::random_normal(3, 6, 1.0, &mut r);
        let f = |x: &Tensor2, g: &Tensor2, b: &Tensor2| {
            let (o, _) = layer_norm_rows(x, g.as_slice(), b.as_slice()).unwrap();
            o.zip_map(&up, |a, c| a * c).unwrap().sum()
        };
        let (_, cache) = layer_norm_rows(&x, gain.as_slice(), bias.as_slice()).unwrap();
        let g = layer_norm_rows_backward(&cache, gain.as_slice(), &up).unwrap();
        let nx = numeric_grad(&x, 1e-5, |t| f(t, &gain, &bias));
        let ng = numeric_grad(&gain, 1e-5, |t| f(&x, t, &bias));
        let nb = numeric_grad(&bias, 1e-5, |t| f(&x, &gain, t));
        assert!(rel_err(g.input.as_slice(), nx.as_slice()) < 1e-5);
        assert!(rel_err(&g.gain, ng.as_slice()) < 1e-5);
        assert!(rel_err(&g.bias, nb.as_slice()) < 1e-5);
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor2::row_vector(&[0.0, 800.0, 0.0]);
        let (loss, _) = cross_entropy(&logits, &[2]).unwrap();
        assert_eq!(loss, 0.0);

        let (loss, _) = cross_entropy(&Tensor2::zeros(3, 5), &[1, 3, 5]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
        assert!((loss - 1.60944).abs() < 1e-5);

        assert!(cross_entropy(&Tensor2::zeros(1, 5), &[0]).is_err());
        assert!(cross_entropy(&Tensor2::zeros(1, 5), &[6]).is_err());
    }

    #[test]
    fn cross_entropy_batch_is_mean_of_rows() {
        let mut r = rng();
        let logits = Tensor2::random_normal(2, 4, 1.5, &mut r);
        let labels = [3, 1];
        let (loss, grad) = cross_entropy(&logits, &labels).unwrap();

        // per-row recomputation: −log softmax(row)[y]
        let single = |i: usize| {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[labels[i] - 1].exp() / z).ln()
        };
        assert!((loss - 0.5 * (single(0) + single(1))).abs() < 1e-12);

        let num = numeric_grad(&logits, 1e-5, |t| cross_entropy(t, &labels).unwrap().0);
        assert!(rel_err(grad.as_slice(), num.as_slice()) < 1e-6);
    }

    #[test]
    fn gate_open_and_zero() {
        let mut r = rng();
        let x = Tensor2::random_normal(2, 4, 1.0, &mut r);
        let w = Tensor2::random_normal(4, 4, 0.1, &mut r);
        let (out, _) = gate(&w, &[60.0; 4], &x).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-20);
        let (out, _) = gate(&w, &[0.3; 4], &Tensor2::zeros(3, 4)).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }
}
