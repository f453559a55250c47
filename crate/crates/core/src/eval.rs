//! Budgeted summary selection and F-beta scoring against annotator selections.

use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, GroundTruthMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pseudo_label::aggregate_annotators;
use crate::tensor::Tensor2;
use crate::train::PreparedVideo;

const ROW_SUM_TOL: f64 = 1e-9;

/// `Σ_c c·p(c)` for each row of a `[n × C]` distribution, classes numbered from 1.
pub fn expected_score(dist: &Tensor2) -> Result<Vec<f64>> {
    (0..dist.rows())
        .map(|i| {
            let row = dist.row(i);
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!(
                    "row {i} is not a distribution (sum {total})"
                )));
            }
            Ok(row.iter().enumerate().map(|(c, p)| (c + 1) as f64 * p).sum())
        })
        .collect()
}

/// Averages repeated-frame scores back onto the `original_len` source frames.
pub fn collapse_repeats(scores: &[f64], index_map: &[usize], original_len: usize) -> Result<Vec<f64>> {
    if scores.len() != index_map.len() {
        return Err(Error::shape("collapse_repeats", index_map.len(), scores.len()));
    }
    let mut sum = vec![0.0; original_len];
    let mut count = vec![0usize; original_len];
    for (&s, &src) in scores.iter().zip(index_map) {
        if src >= original_len {
            return Err(Error::invalid(format!("index map entry {src} ≥ {original_len}")));
        }
        sum[src] += s;
        count[src] += 1;
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("source frame {i} never repeated")));
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
}

/// `⌈budget·n⌉`, reading products within 1e-9 of an integer as that integer.
pub fn selection_size(n: usize, budget: f64) -> usize {
    let x = budget * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
    (k as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarySelection {
    pub mask: Vec<bool>,
    pub budget: f64,
    pub scores: Vec<f64>,
}

impl SummarySelection {
    pub fn selected(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// Marks the `⌈budget·n⌉` highest scores; equal scores go to the earlier frame.
pub fn select_summary(scores: &[f64], budget: f64) -> Result<SummarySelection> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::invalid(format!("budget {budget} outside (0, 1]")));
    }
    if scores.is_empty() {
        return Err(Error::invalid("no frames to select from"));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score of frame {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &i in &order[..selection_size(scores.len(), budget)] {
        mask[i] = true;
    }
    Ok(SummarySelection {
        mask,
        budget,
        scores: scores.to_vec(),
    })
}

pub fn precision_recall(pred: &[bool], gt: &[bool]) -> (f64, f64) {
    let hits = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count() as f64;
    let npred = pred.iter().filter(|p| **p).count() as f64;
    let ngt = gt.iter().filter(|g| **g).count() as f64;
    let p = if npred > 0.0 { hits / npred } else { 0.0 };
    let r = if ngt > 0.0 { hits / ngt } else { 0.0 };
    (p, r)
}

/// Mean over annotators of `(1+β²)·p·r / (β²·p + r)`.
pub fn f_beta(pred: &[bool], gt_masks: &[Vec<bool>], beta: f64) -> Result<f64> {
    if gt_masks.is_empty() {
        return Err(Error::invalid("no ground-truth selections"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta {beta} must be positive")));
    }
    let b2 = beta * beta;
    let mut total = 0.0;
    for (a, gt) in gt_masks.iter().enumerate() {
        if gt.len() != pred.len() {
            return Err(Error::shape(
                "f_beta",
                pred.len(),
                format!("{} (annotator {a})", gt.len()),
            ));
        }
        let (p, r) = precision_recall(pred, gt);
        if p > 0.0 || r > 0.0 {
            total += (1.0 + b2) * p * r / (b2 * p + r);
        }
    }
    Ok(total / gt_masks.len() as f64)
}

/// Budgeted ground-truth masks, one per annotator or one from their mean.
pub fn ground_truth_masks(video: &PreparedVideo, budget: f64, mode: GroundTruthMode) -> Result<Vec<Vec<bool>>> {
    match mode {
        GroundTruthMode::PerAnnotator => video
            .annotations
            .annotators
            .iter()
            .map(|s| Ok(select_summary(s, budget)?.mask))
            .collect(),
        GroundTruthMode::Consensus => {
            let mean = aggregate_annotators(&video.annotations)?;
            Ok(vec![select_summary(&mean, budget)?.mask])
        }
    }
}

/// Expected scores on the original frames, selected at `budget`.
pub fn summarize(model: &Model, video: &PreparedVideo, tokens: Option<&[u32]>, budget: f64) -> Result<SummarySelection> {
    let mut input = video.input();
    if let Some(t) = tokens {
        input.tokens = t;
    }
    let probs = model.params.frame_probabilities(input)?;
    let repeated = expected_score(&probs)?;
    let scores = collapse_repeats(&repeated, &video.index_map, video.original_frame_count())?;
    select_summary(&scores, budget)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub f_beta: f64,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub per_video: Vec<VideoScore>,
    pub mean_f_beta: f64,
    pub beta: f64,
    pub budget: f64,
    pub ground_truth: GroundTruthMode,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

/// Hashes recorded in an [`EvalReport`].
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub split: String,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

pub fn evaluate(
    model: &Model,
    videos: &[&PreparedVideo],
    config: &EvalConfig,
    provenance: Provenance,
) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::invalid(format!("split `{}` has no videos", provenance.split)));
    }
    let mut per_video = Vec::with_capacity(videos.len());
    for v in videos {
        let pred = summarize(model, v, None, config.budget)?;
        let gts = ground_truth_masks(v, config.budget, config.ground_truth)?;
        per_video.push(VideoScore {
            video_id: v.video_id.clone(),
            f_beta: f_beta(&pred.mask, &gts, config.beta)?,
            selected: pred.selected(),
        });
    }
    let mean_f_beta = per_video.iter().map(|s| s.f_beta).sum::<f64>() / per_video.len() as f64;
    Ok(EvalReport {
        split: provenance.split,
        per_video,
        mean_f_beta,
        beta: config.beta,
        budget: config.budget,
        ground_truth: config.ground_truth,
        config_hash: provenance.config_hash,
        checkpoint_hash: provenance.checkpoint_hash,
    })
}
