//! Synthetic dataset bundles for tests, demos and smoke runs.
//!
//! Frame importance is a hidden per-segment latent plus per-frame jitter, and
//! frame features carry that latent along a fixed direction, so scores are
//! learnable from features and smooth within each two-second segment. The
//! `⌈budget·n⌉` highest-latent frames of every video get the top class from
//! every annotator; annotators disagree only below that cut, so the ground
//! truth selection of every annotator is the same set.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    write_dataset, AnnotationSet, Dataset, DatasetManifest, FeatureTensor, Granularity, ScoreKind,
    Video, VideoFiles, VideoMeta,
};
use crate::error::{Error, Result};
use crate::eval::selection_size;
use crate::pseudo_label::segment_boundaries;
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub dataset_name: String,
    pub videos: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: u32,
    pub num_classes: usize,
    pub score_kind: ScoreKind,
    pub annotators: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub min_query_tokens: usize,
    pub max_query_tokens: usize,
    /// Share of frames that receive the top class.
    pub budget: f64,
    /// Strength of the latent along the hidden feature direction.
    pub signal: f64,
    /// Chance that an annotator moves a non-top frame by one class.
    pub disagreement: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dataset_name: "synthetic".into(),
            videos: 10,
            min_frames: 16,
            max_frames: 32,
            fps: 1,
            num_classes: 5,
            score_kind: ScoreKind::IntegerCategories,
            annotators: 3,
            feature_dim: 512,
            vocab_size: 32,
            min_query_tokens: 1,
            max_query_tokens: 4,
            budget: 0.15,
            signal: 3.0,
            disagreement: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let ok = self.videos > 0
            && self.min_frames > 0
            && self.min_frames <= self.max_frames
            && self.fps > 0
            && self.num_classes >= 2
            && self.annotators > 0
            && self.feature_dim >= 2
            && self.vocab_size >= 2
            && self.min_query_tokens <= self.max_query_tokens
            && self.budget > 0.0
            && self.budget < 1.0
            && (0.0..=1.0).contains(&self.disagreement);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad synthetic spec {self:?}")))
        }
    }
}

fn unit_normal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Builds an in-memory dataset; `root` is empty until it is written.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let direction = unit_normal(&mut rng, d);
    let offset: Vec<f64> = (0..d).map(|_| 1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();

    let mut videos = Vec::with_capacity(spec.videos);
    for v in 0..spec.videos {
        let id = format!("vid{v:03}");
        let n = rng.gen_range(spec.min_frames..=spec.max_frames);
        let bounds = segment_boundaries(n, spec.fps)?;

        let mut latent = vec![0.0; n];
        for &(start, end) in bounds.ranges() {
            let level: f64 = rng.sample(StandardNormal);
            for l in &mut latent[start..end] {
                *l = level + 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }

        let mut frames = Vec::with_capacity(n * d);
        for &l in &latent {
            for j in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                frames.push((offset[j] + spec.signal * l * direction[j] + 0.5 * noise) as f32);
            }
        }
        let mut segments = Vec::with_capacity(bounds.len() * d);
        for &(start, end) in bounds.ranges() {
            for j in 0..d {
                let sum: f64 = (start..end).map(|i| frames[i * d + j] as f64).sum();
                segments.push((sum / (end - start) as f64) as f32);
            }
        }

        let classes = base_classes(&latent, spec.num_classes, spec.budget);
        let top = spec.num_classes;
        let annotators = (0..spec.annotators)
            .map(|_| {
                classes
                    .iter()
                    .map(|&c| {
                        let c = if c < top && rng.gen_bool(spec.disagreement) {
                            let moved = if rng.gen_bool(0.5) { c + 1 } else { c.saturating_sub(1) };
                            moved.clamp(1, top - 1)
                        } else {
                            c
                        };
                        match spec.score_kind {
                            ScoreKind::IntegerCategories => c as f64,
                            ScoreKind::ContinuousUnitInterval => {
                                (c as f64 - 1.0 + rng.gen_range(0.0..0.999)) / top as f64
                            }
                        }
                    })
                    .collect()
            })
            .collect();

        let q = rng.gen_range(spec.min_query_tokens..=spec.max_query_tokens);
        let query_tokens = (0..q)
            .map(|_| rng.gen_range(1..spec.vocab_size as u32))
            .collect();

        videos.push(Video {
            meta: VideoMeta {
                video_id: id.clone(),
                frame_count: n,
                segment_count: bounds.len(),
                query_tokens,
                annotator_count: Some(spec.annotators),
                files: VideoFiles::standard(&id),
            },
            frames: FeatureTensor::new(Granularity::Frame, n, d, frames)?,
            segments: FeatureTensor::new(Granularity::Segment, bounds.len(), d, segments)?,
            annotations: AnnotationSet { annotators },
        });
    }

    let manifest = DatasetManifest {
        dataset_name: spec.dataset_name.clone(),
        fps: spec.fps,
        num_classes: spec.num_classes,
        score_kind: spec.score_kind,
        max_frames: videos.iter().map(|v| v.meta.frame_count).max().unwrap_or(1),
        vocab_size: spec.vocab_size,
        feature_dim: d,
        videos: videos.iter().map(|v| v.meta.clone()).collect(),
    };
    manifest.validate()?;
    Ok(Dataset {
        manifest,
        root: PathBuf::new(),
        videos,
    })
}

/// Top `⌈budget·n⌉` latents get class `C`; the rest are spread over `1..C-1` by rank.
fn base_classes(latent: &[f64], num_classes: usize, budget: f64) -> Vec<usize> {
    let n = latent.len();
    let k = selection_size(n, budget);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| latent[b].total_cmp(&latent[a]).then(a.cmp(&b)));
    let mut classes = vec![num_classes; n];
    let rest = n - k;
    let lower = num_classes - 1;
    for (rank, &i) in order[k..].iter().enumerate() {
        // rank 0 is the highest remaining latent.
        let from_bottom = rest - 1 - rank;
        classes[i] = 1 + from_bottom * lower / rest.max(1);
    }
    classes
}

/// Generates a bundle and writes it, plus a matching `vocab.json`, under `dir`.
pub fn write(dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    let ds = generate(spec)?;
    let manifest = write_dataset(dir, &ds.manifest, &ds.videos)?;
    Vocab::from_tokens((1..spec.vocab_size).map(|i| format!("w{i}"))).save(&dir.join("vocab.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_dataset;

    fn small() -> SynthSpec {
        SynthSpec {
            videos: 4,
            feature_dim: 8,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        for (x, y) in a.videos.iter().zip(&b.videos) {
            assert_eq!(x.frames, y.frames);
            assert_eq!(x.annotations, y.annotations);
        }
        for v in &a.videos {
            v.annotations
                .validate(&v.meta.video_id, a.manifest.score_kind, a.manifest.num_classes)
                .unwrap();
        }
    }

    #[test]
    fn top_class_set_has_budget_size_and_is_shared() {
        let ds = generate(&small()).unwrap();
        for v in &ds.videos {
            let n = v.meta.frame_count;
            let k = selection_size(n, 0.15);
            let sets: Vec<Vec<usize>> = v
                .annotations
                .annotators
                .iter()
                .map(|s| (0..n).filter(|&i| s[i] == 5.0).collect())
                .collect();
            assert_eq!(sets[0].len(), k);
            assert!(sets.iter().all(|s| s == &sets[0]));
        }
    }

    #[test]
    fn base_classes_spread_over_lower_range() {
        let latent: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let c = base_classes(&latent, 5, 0.15);
        assert_eq!(&c[17..], &[5, 5, 5]);
        assert_eq!(c[0], 1);
        assert_eq!(c[16], 4);
        assert!(c.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn written_bundle_loads() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            score_kind: ScoreKind::ContinuousUnitInterval,
            ..small()
        };
        let path = write(dir.path(), &spec).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.videos.len(), 4);
        let vocab = Vocab::load(&dir.path().join("vocab.json")).unwrap();
        assert_eq!(vocab.size(), spec.vocab_size);
    }
}
