//! Segment-level pseudo labels: frame scores are averaged over two-second
//! windows and discretized into the same classes as the frame labels.

use serde::{Deserialize, Serialize};

use crate::dataset::{score_in_domain, AnnotationSet, ScoreKind};
use crate::error::{Error, Result};

/// Segment length in seconds.
pub const SEGMENT_SECONDS: u32 = 2;

/// Number of two-second segments covering `frame_count` frames at `fps`.
pub fn segment_count(frame_count: usize, fps: u32) -> usize {
    let len = segment_len(fps);
    frame_count.div_ceil(len.max(1))
}

fn segment_len(fps: u32) -> usize {
    (SEGMENT_SECONDS * fps) as usize
}

/// Contiguous `[start, end)` frame ranges covering a video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentBoundaries {
    ranges: Vec<(usize, usize)>,
}

impl SegmentBoundaries {
    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.1)
    }

    /// Builds boundaries from arbitrary ranges, checking they tile `[0, n)`.
    pub fn from_ranges(ranges: Vec<(usize, usize)>) -> Result<Self> {
        let mut next = 0;
        for &(s, e) in &ranges {
            if s != next || e <= s {
                return Err(Error::invalid(format!(
                    "segment ({s}, {e}) breaks contiguous coverage at frame {next}"
                )));
            }
            next = e;
        }
        Ok(Self { ranges })
    }

    /// Segment index of every frame.
    pub fn segment_of_frames(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.frame_count());
        for (k, &(s, e)) in self.ranges.iter().enumerate() {
            out.extend(std::iter::repeat_n(k, e - s));
        }
        out
    }

    /// Segment index of every repeated frame, given the frame-repeat `index_map`.
    pub fn lift(&self, index_map: &[usize]) -> Result<Vec<usize>> {
        let of = self.segment_of_frames();
        index_map
            .iter()
            .map(|&src| {
                of.get(src).copied().ok_or_else(|| {
                    Error::invalid(format!(
                        "index_map points at frame {src}, segments cover {}",
                        of.len()
                    ))
                })
            })
            .collect()
    }
}

pub fn segment_boundaries(frame_count: usize, fps: u32) -> Result<SegmentBoundaries> {
    if frame_count == 0 || fps == 0 {
        return Err(Error::invalid(format!(
            "segment_boundaries needs positive inputs, got frame_count={frame_count}, fps={fps}"
        )));
    }
    let len = segment_len(fps);
    let ranges = (0..frame_count)
        .step_by(len)
        .map(|s| (s, (s + len).min(frame_count)))
        .collect();
    Ok(SegmentBoundaries { ranges })
}

/// Maps a (mean) score to a class id in `1..=num_classes`.
///
/// Integer categories round half away from zero; unit-interval scores fall
/// into `num_classes` equal-width bins, a score on an edge `k/C` belonging to
/// the upper bin and `1.0` to the last.
pub fn discretize(score: f64, kind: ScoreKind, num_classes: usize) -> usize {
    match kind {
        ScoreKind::IntegerCategories => (score.round().max(1.0) as usize).min(num_classes),
        ScoreKind::ContinuousUnitInterval => {
            let c = num_classes as f64;
            1 + (1..num_classes).filter(|&k| score >= k as f64 / c).count()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLabel {
    pub start: usize,
    pub end: usize,
    pub mean: f64,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPseudoLabels {
    pub segments: Vec<SegmentLabel>,
}

impl SegmentPseudoLabels {
    pub fn classes(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.class).collect()
    }

    pub fn boundaries(&self) -> SegmentBoundaries {
        SegmentBoundaries {
            ranges: self.segments.iter().map(|s| (s.start, s.end)).collect(),
        }
    }
}

/// Mean score and class for every two-second segment of `scores`.
pub fn generate_pseudo_labels(
    scores: &[f64],
    fps: u32,
    num_classes: usize,
    kind: ScoreKind,
) -> Result<SegmentPseudoLabels> {
    if scores.is_empty() {
        return Err(Error::invalid("no frame scores"));
    }
    if let Some((i, s)) = scores
        .iter()
        .enumerate()
        .find(|(_, &s)| !score_domain_ok(s, kind, num_classes))
    {
        return Err(Error::invalid(format!(
            "frame {i}: score {s} outside {kind:?} domain"
        )));
    }
    let bounds = segment_boundaries(scores.len(), fps)?;
    let segments = bounds
        .ranges
        .iter()
        .map(|&(start, end)| {
            let window = &scores[start..end];
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            SegmentLabel {
                start,
                end,
                mean,
                class: discretize(mean, kind, num_classes),
            }
        })
        .collect();
    Ok(SegmentPseudoLabels { segments })
}

// Aggregated integer scores are annotator means, so only the range is checked.
fn score_domain_ok(s: f64, kind: ScoreKind, num_classes: usize) -> bool {
    match kind {
        ScoreKind::IntegerCategories => s.is_finite() && s >= 1.0 && s <= num_classes as f64,
        ScoreKind::ContinuousUnitInterval => score_in_domain(s, kind, num_classes),
    }
}

/// Per-frame mean over annotators.
pub fn aggregate_annotators(annotations: &AnnotationSet) -> Result<Vec<f64>> {
    let first = annotations
        .annotators
        .first()
        .ok_or_else(|| Error::invalid("no annotators"))?;
    let n = first.len();
    let mut sum = vec![0.0; n];
    for (a, seq) in annotations.annotators.iter().enumerate() {
        if seq.len() != n {
            return Err(Error::invalid(format!(
                "annotator {a} has {} scores, expected {n}",
                seq.len()
            )));
        }
        for (acc, v) in sum.iter_mut().zip(seq) {
            *acc += v;
        }
    }
    let k = annotations.annotators.len() as f64;
    Ok(sum.into_iter().map(|s| s / k).collect())
}
