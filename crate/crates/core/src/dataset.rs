//! Dataset bundles: a JSON manifest plus raw float32 feature files and JSON
//! annotations, frame-repeat length equalization, and seeded splits.
//!
//! Bundle layout, relative to the manifest's directory:
//!
//! ```text
//! manifest.json
//! features/<video_id>.frames.f32     little-endian f32, row-major [frame_count × d]
//! features/<video_id>.segments.f32   little-endian f32, row-major [segment_count × d]
//! annotations/<video_id>.json        {"annotators": [[s_1, …, s_n], …]}
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo_label::segment_count;
use crate::tensor::Tensor2;

pub const FEATURE_DIM: usize = 512;

fn default_feature_dim() -> usize {
    FEATURE_DIM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    IntegerCategories,
    ContinuousUnitInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoFiles {
    pub frame_features: String,
    pub segment_features: String,
    pub annotations: String,
}

impl VideoFiles {
    /// Conventional relative paths for `video_id`.
    pub fn standard(video_id: &str) -> Self {
        Self {
            frame_features: format!("features/{video_id}.frames.f32"),
            segment_features: format!("features/{video_id}.segments.f32"),
            annotations: format!("annotations/{video_id}.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub frame_count: usize,
    pub segment_count: usize,
    #[serde(default)]
    pub query_tokens: Vec<u32>,
    /// Optional; checked against the annotation file when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_count: Option<usize>,
    pub files: VideoFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub fps: u32,
    pub num_classes: usize,
    pub score_kind: ScoreKind,
    pub max_frames: usize,
    pub vocab_size: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    pub videos: Vec<VideoMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Frame,
    Segment,
}

/// Row-major `[num_items × dim]` float32 features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub granularity: Granularity,
    num_items: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(granularity: Granularity, num_items: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != num_items * dim {
            return Err(Error::shape(
                "FeatureTensor::new",
                format!("{num_items}x{dim}"),
                format!("{} values", values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature value at row {}, col {}",
                i / dim.max(1),
                i % dim.max(1)
            )));
        }
        Ok(Self {
            granularity,
            num_items,
            dim,
            values,
        })
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Widened copy used for training math.
    pub fn to_tensor(&self) -> Tensor2 {
        let data = self.values.iter().map(|&v| f64::from(v)).collect();
        Tensor2::from_vec(self.num_items, self.dim, data).expect("shape checked at construction")
    }

    pub fn from_le_bytes(granularity: Granularity, dim: usize, bytes: &[u8]) -> Result<Self> {
        if dim == 0 || !bytes.len().is_multiple_of(dim * 4) {
            return Err(Error::shape(
                "FeatureTensor::from_le_bytes",
                format!("multiple of {} bytes", dim * 4),
                bytes.len(),
            ));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
            .collect::<Vec<_>>();
        Self::new(granularity, values.len() / dim, dim, values)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn select_rows(&self, index_map: &[usize]) -> Self {
        let mut values = Vec::with_capacity(index_map.len() * self.dim);
        for &src in index_map {
            values.extend_from_slice(self.row(src));
        }
        Self {
            granularity: self.granularity,
            num_items: index_map.len(),
            dim: self.dim,
            values,
        }
    }
}

/// Per-annotator frame score sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub annotators: Vec<Vec<f64>>,
}

impl AnnotationSet {
    pub fn frame_count(&self) -> usize {
        self.annotators.first().map_or(0, Vec::len)
    }

    pub fn annotator_count(&self) -> usize {
        self.annotators.len()
    }

    /// Checks equal lengths and the score domain for `kind` with `num_classes` categories.
    pub fn validate(&self, video: &str, kind: ScoreKind, num_classes: usize) -> Result<()> {
        if self.annotators.is_empty() {
            return Err(Error::dataset(video, "annotators", "no annotators"));
        }
        let n = self.frame_count();
        for (a, seq) in self.annotators.iter().enumerate() {
            if seq.len() != n {
                return Err(Error::dataset(
                    video,
                    "annotators",
                    format!("annotator {a} has {} scores, annotator 0 has {n}", seq.len()),
                ));
            }
            for (i, &s) in seq.iter().enumerate() {
                if !score_in_domain(s, kind, num_classes) {
                    return Err(Error::dataset(
                        video,
                        "annotators",
                        format!("annotator {a}, frame {i}: score {s} outside {kind:?} domain"),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn score_in_domain(s: f64, kind: ScoreKind, num_classes: usize) -> bool {
    match kind {
        ScoreKind::IntegerCategories => {
            s.fract() == 0.0 && s >= 1.0 && s <= num_classes as f64
        }
        ScoreKind::ContinuousUnitInterval => (0.0..=1.0).contains(&s),
    }
}

#[derive(Debug, Clone)]
pub struct Video {
    pub meta: VideoMeta,
    pub frames: FeatureTensor,
    pub segments: FeatureTensor,
    pub annotations: AnnotationSet,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn video(&self, id: &str) -> Option<&Video> {
        self.videos.iter().find(|v| v.meta.video_id == id)
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.videos.iter().map(|v| v.meta.video_id.clone()).collect()
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

impl DatasetManifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        let ds = &self.dataset_name;
        if self.num_classes < 2 {
            return Err(Error::dataset(ds, "num_classes", "need at least 2 classes"));
        }
        if self.fps == 0 {
            return Err(Error::dataset(ds, "fps", "must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::dataset(ds, "feature_dim", "must be positive"));
        }
        let mut seen = HashSet::new();
        for v in &self.videos {
            let id = v.video_id.as_str();
            if !seen.insert(id) {
                return Err(Error::dataset(id, "video_id", "duplicate video id"));
            }
            if v.frame_count == 0 {
                return Err(Error::dataset(id, "frame_count", "must be at least 1"));
            }
            if v.frame_count > self.max_frames {
                return Err(Error::dataset(
                    id,
                    "frame_count",
                    format!("{} exceeds max_frames {}", v.frame_count, self.max_frames),
                ));
            }
            let expected = segment_count(v.frame_count, self.fps);
            if v.segment_count != expected {
                return Err(Error::dataset(
                    id,
                    "segment_count",
                    format!(
                        "{} does not match {expected} two-second segments at {} fps",
                        v.segment_count, self.fps
                    ),
                ));
            }
            if let Some(&t) = v.query_tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::dataset(
                    id,
                    "query_tokens",
                    format!("token id {t} >= vocab_size {}", self.vocab_size),
                ));
            }
            if v.annotator_count == Some(0) {
                return Err(Error::dataset(id, "annotator_count", "must be at least 1"));
            }
        }
        Ok(())
    }
}

fn load_features(
    root: &Path,
    video: &str,
    field: &'static str,
    rel: &str,
    granularity: Granularity,
    rows: usize,
    dim: usize,
) -> Result<FeatureTensor> {
    let path = root.join(rel);
    let bytes = fs::read(&path)
        .map_err(|e| Error::dataset(video, field, format!("{}: {e}", path.display())))?;
    let expected = rows * dim * 4;
    if bytes.len() != expected {
        return Err(Error::dataset(
            video,
            field,
            format!(
                "shape mismatch: expected {rows}x{dim} ({expected} bytes), file has {} bytes ({} rows)",
                bytes.len(),
                bytes.len() as f64 / (dim * 4) as f64
            ),
        ));
    }
    FeatureTensor::from_le_bytes(granularity, dim, &bytes)
        .map_err(|e| Error::dataset(video, field, e.to_string()))
}

/// Loads and fully validates the bundle described by `manifest_path`.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::from_path(manifest_path)?;
    manifest.validate()?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let dim = manifest.feature_dim;

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for meta in &manifest.videos {
        let id = meta.video_id.as_str();
        let frames = load_features(
            &root,
            id,
            "frame_features",
            &meta.files.frame_features,
            Granularity::Frame,
            meta.frame_count,
            dim,
        )?;
        let segments = load_features(
            &root,
            id,
            "segment_features",
            &meta.files.segment_features,
            Granularity::Segment,
            meta.segment_count,
            dim,
        )?;
        let ann_path = root.join(&meta.files.annotations);
        let annotations: AnnotationSet = if ann_path.exists() {
            read_json(&ann_path)?
        } else {
            return Err(Error::dataset(
                id,
                "annotations",
                format!("{} missing", ann_path.display()),
            ));
        };
        annotations.validate(id, manifest.score_kind, manifest.num_classes)?;
        if annotations.frame_count() != meta.frame_count {
            return Err(Error::dataset(
                id,
                "annotations",
                format!(
                    "{} scores per annotator, frame_count is {}",
                    annotations.frame_count(),
                    meta.frame_count
                ),
            ));
        }
        if let Some(n) = meta.annotator_count {
            if n != annotations.annotator_count() {
                return Err(Error::dataset(
                    id,
                    "annotator_count",
                    format!("manifest says {n}, file has {}", annotations.annotator_count()),
                ));
            }
        }
        videos.push(Video {
            meta: meta.clone(),
            frames,
            segments,
            annotations,
        });
    }
    Ok(Dataset {
        manifest,
        root,
        videos,
    })
}

/// Writes a bundle in the on-disk layout; the inverse of [`load_dataset`].
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, videos: &[Video]) -> Result<PathBuf> {
    for v in videos {
        let files = &v.meta.files;
        for (rel, bytes) in [
            (&files.frame_features, v.frames.to_le_bytes()),
            (&files.segment_features, v.segments.to_le_bytes()),
        ] {
            write_file(&dir.join(rel), &bytes)?;
        }
        let ann = serde_json::to_vec(&v.annotations).expect("annotations serialize");
        write_file(&dir.join(&files.annotations), &ann)?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    write_file(&path, &text)?;
    Ok(path)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Source-frame index for each of `target_len` output positions.
///
/// Frames are duplicated in temporal order; each source frame appears
/// `⌊M/n⌋` or `⌈M/n⌉` times and the earliest frames take the extra repeats.
pub fn repeat_index_map(frame_count: usize, target_len: usize) -> Result<Vec<usize>> {
    if frame_count == 0 {
        return Err(Error::invalid("frame_repeat of an empty video"));
    }
    if frame_count > target_len {
        return Err(Error::invalid(format!(
            "frame_count {frame_count} exceeds target length {target_len}"
        )));
    }
    let base = target_len / frame_count;
    let extra = target_len % frame_count;
    let mut map = Vec::with_capacity(target_len);
    for src in 0..frame_count {
        let reps = base + usize::from(src < extra);
        map.extend(std::iter::repeat_n(src, reps));
    }
    Ok(map)
}

/// Stretches a video to `target_len` frames by repeating frames and their scores.
pub fn frame_repeat(
    features: &FeatureTensor,
    scores: &AnnotationSet,
    target_len: usize,
) -> Result<(FeatureTensor, AnnotationSet, Vec<usize>)> {
    if features.granularity != Granularity::Frame {
        return Err(Error::invalid("frame_repeat expects frame-level features"));
    }
    if scores.frame_count() != features.num_items() {
        return Err(Error::shape(
            "frame_repeat scores",
            features.num_items(),
            scores.frame_count(),
        ));
    }
    let map = repeat_index_map(features.num_items(), target_len)?;
    let annotators = scores
        .annotators
        .iter()
        .map(|seq| map.iter().map(|&i| seq[i]).collect())
        .collect();
    Ok((features.select_rows(&map), AnnotationSet { annotators }, map))
}

/// Train/validation/test sizes, in videos.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub const TVSUM: SplitCounts = SplitCounts { train: 40, val: 5, test: 5 };
    pub const SUMME: SplitCounts = SplitCounts { train: 19, val: 3, test: 3 };
    pub const QUERYVS: SplitCounts = SplitCounts { train: 114, val: 38, test: 38 };

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Published split for a known benchmark of the right size, else 80/10/10.
    pub fn default_for(dataset_name: &str, total: usize) -> Self {
        let known = match dataset_name.to_ascii_lowercase().as_str() {
            "tvsum" => Some(Self::TVSUM),
            "summe" => Some(Self::SUMME),
            "queryvs" => Some(Self::QUERYVS),
            _ => None,
        };
        if let Some(k) = known.filter(|k| k.total() == total) {
            return k;
        }
        let val = (total as f64 * 0.1).round() as usize;
        let test = val;
        let train = total.saturating_sub(val + test);
        Self { train, val, test }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn get(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" | "validation" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Seeded shuffle of `video_ids` cut into consecutive train/val/test runs.
pub fn split_dataset(video_ids: &[String], counts: SplitCounts, seed: u64) -> Result<Split> {
    if counts.total() != video_ids.len() {
        return Err(Error::invalid(format!(
            "split counts {}+{}+{} do not sum to {} videos",
            counts.train,
            counts.val,
            counts.test,
            video_ids.len()
        )));
    }
    let mut ids = video_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids.split_off(counts.train + counts.val);
    let val = ids.split_off(counts.train);
    Ok(Split {
        seed,
        train: ids,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i:03}")).collect()
    }

    #[test]
    fn repeat_published_lengths() {
        let map = repeat_index_map(217, 647).unwrap();
        assert_eq!(map.len(), 647);
        assert_eq!(map[0], 0);
        assert_eq!(*map.last().unwrap(), 216);
    }

    #[test]
    fn repeat_identity_when_full_length() {
        assert_eq!(repeat_index_map(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        let f = FeatureTensor::new(Granularity::Frame, 2, 2, vec![1., 2., 3., 4.]).unwrap();
        let s = AnnotationSet { annotators: vec![vec![1.0, 2.0]] };
        let (f2, s2, _) = frame_repeat(&f, &s, 2).unwrap();
        assert_eq!(f2, f);
        assert_eq!(s2, s);
    }

    #[test]
    fn repeat_three_into_seven() {
        let map = repeat_index_map(3, 7).unwrap();
        assert_eq!(map, vec![0, 0, 0, 1, 1, 2, 2]);
    }

    /// Enumerates every non-decreasing surjective map of `m` slots onto `n` frames whose
    /// repeat counts are ⌊m/n⌋ or ⌈m/n⌉ with the extras on the earliest frames.
    fn brute_force_maps(n: usize, m: usize) -> Vec<Vec<usize>> {
        fn rec(n: usize, m: usize, counts: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if counts.len() == n {
                if counts.iter().sum::<usize>() == m {
                    out.push(counts.clone());
                }
                return;
            }
            for c in 1..=m {
                counts.push(c);
                rec(n, m, counts, out);
                counts.pop();
            }
        }
        let mut all = Vec::new();
        rec(n, m, &mut Vec::new(), &mut all);
        let (lo, hi) = (m / n, m.div_ceil(n));
        all.into_iter()
            .filter(|c| c.iter().all(|&k| k == lo || k == hi))
            .filter(|c| c.windows(2).all(|w| w[0] >= w[1]))
            .map(|c| {
                c.iter()
                    .enumerate()
                    .flat_map(|(i, &k)| std::iter::repeat_n(i, k))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn repeat_matches_enumerated_uniform_maps() {
        for n in 1..=5 {
            for m in n..=9 {
                let maps = brute_force_maps(n, m);
                assert_eq!(maps.len(), 1, "n={n} m={m}");
                assert_eq!(repeat_index_map(n, m).unwrap(), maps[0]);
            }
        }
        let counts: Vec<usize> = (0..3)
            .map(|i| repeat_index_map(3, 7).unwrap().iter().filter(|&&s| s == i).count())
            .collect();
        assert_eq!(counts, vec![3, 2, 2]);
    }

    #[test]
    fn repeat_too_long_is_error() {
        assert!(repeat_index_map(8, 7).is_err());
        assert!(repeat_index_map(0, 7).is_err());
    }

    #[test]
    fn published_split_sizes() {
        let s = split_dataset(&ids(50), SplitCounts::TVSUM, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (40, 5, 5));
        let s = split_dataset(&ids(25), SplitCounts::SUMME, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (19, 3, 3));
        assert_eq!(SplitCounts::default_for("TVSum", 50), SplitCounts::TVSUM);
        assert_eq!(SplitCounts::default_for("QueryVS", 190), SplitCounts::QUERYVS);
        assert_eq!(
            SplitCounts::default_for("other", 10),
            SplitCounts { train: 8, val: 1, test: 1 }
        );
    }

    #[test]
    fn split_is_deterministic_partition() {
        let all = ids(30);
        let c = SplitCounts { train: 20, val: 5, test: 5 };
        let a = split_dataset(&all, c, 9).unwrap();
        let b = split_dataset(&all, c, 9).unwrap();
        assert_eq!(a, b);
        let other = split_dataset(&all, c, 10).unwrap();
        let mut u1: Vec<_> = a.train.iter().chain(&a.val).chain(&a.test).cloned().collect();
        let mut u2: Vec<_> = other.train.iter().chain(&other.val).chain(&other.test).cloned().collect();
        u1.sort();
        u2.sort();
        assert_eq!(u1, all);
        assert_eq!(u2, all);
        assert!(split_dataset(&all, SplitCounts { train: 20, val: 5, test: 4 }, 0).is_err());
    }

    #[test]
    fn score_domains() {
        assert!(score_in_domain(5.0, ScoreKind::IntegerCategories, 5));
        assert!(!score_in_domain(5.5, ScoreKind::IntegerCategories, 5));
        assert!(!score_in_domain(0.0, ScoreKind::IntegerCategories, 5));
        assert!(score_in_domain(0.0, ScoreKind::ContinuousUnitInterval, 5));
        assert!(!score_in_domain(1.01, ScoreKind::ContinuousUnitInterval, 5));
    }
}
