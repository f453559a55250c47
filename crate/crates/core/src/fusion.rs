//! Visual attention gates, mutual attention fusion and the frame classifier head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{gate, linear};
use crate::nn::Parameters;
use crate::pseudo_label::SegmentBoundaries;
use crate::tensor::Tensor2;

/// The position-wise 1×1 map of mutual attention.
#[derive(Debug, Clone, PartialEq)]
pub struct MutualParams {
    pub w_m: Tensor2,
    pub b_m: Tensor2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w_s: Tensor2,
    pub b_s: Tensor2,
    pub w_st: Tensor2,
    pub b_st: Tensor2,
    /// `None` when mutual attention is ablated: the fused product passes through unchanged.
    pub mutual: Option<MutualParams>,
    pub w_c: Tensor2,
    pub b_c: Tensor2,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, num_classes: usize, mutual: bool, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let w_s = Tensor2::random_normal(dim, dim, std, rng);
        let w_st = Tensor2::random_normal(dim, dim, std, rng);
        let mutual = mutual.then(|| MutualParams {
            w_m: Tensor2::random_normal(dim, dim, std, rng),
            b_m: Tensor2::zeros(1, dim),
        });
        Self {
            w_s,
            b_s: Tensor2::zeros(1, dim),
            w_st,
            b_st: Tensor2::zeros(1, dim),
            mutual,
            w_c: Tensor2::random_normal(num_classes, dim, std, rng),
            b_c: Tensor2::zeros(1, num_classes),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_s.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.w_c.rows()
    }
}

impl Parameters for FusionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2)) {
        f("visual.w_s", &self.w_s);
        f("visual.b_s", &self.b_s);
        f("visual.w_st", &self.w_st);
        f("visual.b_st", &self.b_st);
        if let Some(m) = &self.mutual {
            f("mutual.w_m", &m.w_m);
            f("mutual.b_m", &m.b_m);
        }
        f("head.w_c", &self.w_c);
        f("head.b_c", &self.b_c);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2)) {
        f("visual.w_s", &mut self.w_s);
        f("visual.b_s", &mut self.b_s);
        f("visual.w_st", &mut self.w_st);
        f("visual.b_st", &mut self.b_st);
        if let Some(m) = &mut self.mutual {
            f("mutual.w_m", &mut m.w_m);
            f("mutual.b_m", &mut m.b_m);
        }
        f("head.w_c", &mut self.w_c);
        f("head.b_c", &mut self.b_c);
    }
}

/// `σ(f·Wᵀ + b) ⊙ f` for every feature row; returns `(features, gate)`.
pub fn visual_attention(features: &Tensor2, weight: &Tensor2, bias: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    if weight.shape() != (features.cols(), features.cols()) {
        return Err(Error::shape(
            "visual_attention",
            format!("{0}x{0} gate", features.cols()),
            format!("{}x{}", weight.rows(), weight.cols()),
        ));
    }
    gate(weight, bias.as_slice(), features)
}

/// Copies row `assignment[i]` of `rows` into output row `i`.
pub fn broadcast_rows(rows: &Tensor2, assignment: &[usize]) -> Result<Tensor2> {
    let mut out = Tensor2::zeros(assignment.len(), rows.cols());
    for (i, &s) in assignment.iter().enumerate() {
        if s >= rows.rows() {
            return Err(Error::invalid(format!(
                "frame {i} assigned to segment {s}, only {} segments",
                rows.rows()
            )));
        }
        out.row_mut(i).copy_from_slice(rows.row(s));
    }
    Ok(out)
}

/// Gives every frame its enclosing segment's row.
pub fn broadcast_segments(
    segment_rows: &Tensor2,
    boundaries: &SegmentBoundaries,
    num_frames: usize,
) -> Result<Tensor2> {
    if boundaries.frame_count() != num_frames {
        return Err(Error::invalid(format!(
            "segments cover {} frames, video has {num_frames}",
            boundaries.frame_count()
        )));
    }
    if boundaries.len() != segment_rows.rows() {
        return Err(Error::shape(
            "broadcast_segments",
            boundaries.len(),
            segment_rows.rows(),
        ));
    }
    broadcast_rows(segment_rows, &boundaries.segment_of_frames())
}

#[derive(Debug, Clone)]
pub struct MutualOutput {
    /// Fused product `Z_ta ⊙ Z_as ⊙ Z_ast` per frame.
    pub product: Tensor2,
    /// Sigmoid gate values; `None` when the gate is ablated.
    pub gate: Option<Tensor2>,
    pub z_ma: Tensor2,
}

/// Per frame: `H = Z_ta ⊙ Z_as ⊙ Z_ast`, `Z_ma = σ(H·W_mᵀ + b_m) ⊙ H`.
pub fn mutual_attention(
    z_ta: &[f64],
    z_as: &Tensor2,
    z_ast_frames: &Tensor2,
    params: Option<&MutualParams>,
) -> Result<MutualOutput> {
    let d = z_ta.len();
    if z_as.cols() != d || z_ast_frames.cols() != d {
        return Err(Error::shape(
            "mutual_attention width",
            d,
            format!("{} / {}", z_as.cols(), z_ast_frames.cols()),
        ));
    }
    z_ast_frames.expect_shape("mutual_attention frames", z_as.shape())?;
    let mut product = Tensor2::zeros(z_as.rows(), d);
    for i in 0..z_as.rows() {
        let (a, s) = (z_as.row(i), z_ast_frames.row(i));
        for (j, h) in product.row_mut(i).iter_mut().enumerate() {
            *h = z_ta[j] * a[j] * s[j];
        }
    }
    match params {
        Some(p) => {
            let (z_ma, g) = gate(&p.w_m, p.b_m.as_slice(), &product)?;
            Ok(MutualOutput {
                product,
                gate: Some(g),
                z_ma,
            })
        }
        None => Ok(MutualOutput {
            z_ma: product.clone(),
            product,
            gate: None,
        }),
    }
}

/// Per-frame logits `Z_ma·W_cᵀ + b_c`.
pub fn classify_frames(z_ma: &Tensor2, w_c: &Tensor2, b_c: &Tensor2) -> Result<Tensor2> {
    linear(w_c, b_c.as_slice(), z_ma)
}

/// Mean of member-frame logits for each of `num_segments` segments.
pub fn pool_segment_logits(logits: &Tensor2, assignment: &[usize], num_segments: usize) -> Result<Tensor2> {
    if assignment.len() != logits.rows() {
        return Err(Error::shape("pool_segment_logits", logits.rows(), assignment.len()));
    }
    let mut out = Tensor2::zeros(num_segments, logits.cols());
    let mut counts = vec![0usize; num_segments];
    for (i, &s) in assignment.iter().enumerate() {
        if s >= num_segments {
            return Err(Error::invalid(format!("frame {i} in segment {s} >= {num_segments}")));
        }
        counts[s] += 1;
        for (o, v) in out.row_mut(s).iter_mut().zip(logits.row(i)) {
            *o += v;
        }
    }
    for (s, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::invalid(format!("segment {s} has no frames")));
        }
        for v in out.row_mut(s) {
            *v /= c as f64;
        }
    }
    Ok(out)
}

/// Scatters segment-logit gradients back to frames (inverse of the mean pooling).
pub fn pool_segment_logits_backward(
    grad_segments: &Tensor2,
    assignment: &[usize],
) -> Tensor2 {
    let mut counts = vec![0usize; grad_segments.rows()];
    for &s in assignment {
        counts[s] += 1;
    }
    let mut out = Tensor2::zeros(assignment.len(), grad_segments.cols());
    for (i, &s) in assignment.iter().enumerate() {
        let inv = 1.0 / counts[s] as f64;
        for (o, g) in out.row_mut(i).iter_mut().zip(grad_segments.row(s)) {
            *o = g * inv;
        }
    }
    out
}
