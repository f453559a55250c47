//! Two-phase training: segment-level pretraining on pseudo labels, then
//! frame-level fine-tuning. One video per Adam step.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Phase, RunConfig, TrainConfig};
use crate::dataset::{frame_repeat, AnnotationSet, Dataset, DatasetManifest, Split, Video};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams, Target, VideoInput};
use crate::nn::ops::cross_entropy;
use crate::nn::{checkpoint, AdamState, Parameters};
use crate::pseudo_label::{
    aggregate_annotators, discretize, generate_pseudo_labels, SegmentPseudoLabels,
};
use crate::tensor::Tensor2;

/// A video with length-equalized features and both label granularities.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub video_id: String,
    /// `[M × d]` frames after frame repeat.
    pub frames: Tensor2,
    pub segments: Tensor2,
    /// Segment of each repeated frame.
    pub segment_of: Vec<usize>,
    /// Source frame of each repeated frame.
    pub index_map: Vec<usize>,
    /// Class of each repeated frame.
    pub frame_labels: Vec<usize>,
    pub pseudo_labels: SegmentPseudoLabels,
    pub tokens: Vec<u32>,
    /// Raw annotator scores on the original frames.
    pub annotations: AnnotationSet,
}

impl PreparedVideo {
    pub fn input(&self) -> VideoInput<'_> {
        VideoInput {
            frames: &self.frames,
            segments: &self.segments,
            segment_of: &self.segment_of,
            tokens: &self.tokens,
        }
    }

    pub fn original_frame_count(&self) -> usize {
        self.annotations.frame_count()
    }

    pub fn segment_labels(&self) -> Vec<usize> {
        self.pseudo_labels.classes()
    }
}

pub fn prepare_video(video: &Video, manifest: &DatasetManifest) -> Result<PreparedVideo> {
    let id = &video.meta.video_id;
    let c = manifest.num_classes;
    let mean = aggregate_annotators(&video.annotations)?;
    let pseudo_labels = generate_pseudo_labels(&mean, manifest.fps, c, manifest.score_kind)
        .map_err(|e| Error::dataset(id, "pseudo_labels", e.to_string()))?;
    if pseudo_labels.segments.len() != video.segments.num_items() {
        return Err(Error::dataset(
            id,
            "segment_features",
            format!(
                "{} pseudo-labelled segments but {} segment feature rows",
                pseudo_labels.segments.len(),
                video.segments.num_items()
            ),
        ));
    }
    let (frames, _, index_map) = frame_repeat(&video.frames, &video.annotations, manifest.max_frames)?;
    let segment_of = pseudo_labels.boundaries().lift(&index_map)?;
    let frame_labels = index_map
        .iter()
        .map(|&i| discretize(mean[i], manifest.score_kind, c))
        .collect();
    Ok(PreparedVideo {
        video_id: id.clone(),
        frames: frames.to_tensor(),
        segments: video.segments.to_tensor(),
        segment_of,
        index_map,
        frame_labels,
        pseudo_labels,
        tokens: video.meta.query_tokens.clone(),
        annotations: video.annotations.clone(),
    })
}

pub fn prepare_dataset(dataset: &Dataset) -> Result<Vec<PreparedVideo>> {
    dataset
        .videos
        .iter()
        .map(|v| prepare_video(v, &dataset.manifest))
        .collect()
}

/// Looks up `ids` in `videos`, keeping the order of `ids`.
pub fn select<'a>(videos: &'a [PreparedVideo], ids: &[String]) -> Result<Vec<&'a PreparedVideo>> {
    ids.iter()
        .map(|id| {
            videos
                .iter()
                .find(|v| &v.video_id == id)
                .ok_or_else(|| Error::invalid(format!("unknown video `{id}`")))
        })
        .collect()
}

/// Mean cross-entropy of `logits` against class ids `1..=C`.
pub fn compute_loss(logits: &Tensor2, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy(logits, labels)?.0)
}

fn target<'a>(video: &'a PreparedVideo, phase: Phase, segment_labels: &'a [usize]) -> Target<'a> {
    match phase {
        Phase::Pretrain => Target::Segments(segment_labels),
        Phase::Finetune => Target::Frames(&video.frame_labels),
    }
}

/// Mean per-video loss over `videos` at the given granularity.
pub fn mean_loss(model: &Model, videos: &[&PreparedVideo], phase: Phase) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::invalid("mean loss over no videos"));
    }
    let mut total = 0.0;
    for v in videos {
        let seg = v.segment_labels();
        total += model.params.loss(v.input(), target(v, phase, &seg))?;
    }
    Ok(total / videos.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// 1-based.
    pub epoch: usize,
    /// Mean of the per-step losses seen during the epoch.
    pub train_loss: f64,
    /// Validation loss after the epoch's last update.
    pub val_loss: Option<f64>,
    /// Training-set loss after the epoch's last update; computed when a target loss is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub epochs_requested: usize,
    pub epochs: Vec<EpochLoss>,
    pub stopped_early: bool,
    /// Validation loss before the first update.
    pub initial_val_loss: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub config_hash: String,
    pub param_count: usize,
    pub block_names: Vec<String>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

pub fn pretrain(
    model: &mut Model,
    train: &[&PreparedVideo],
    val: &[&PreparedVideo],
    config: &TrainConfig,
) -> Result<TrainReport> {
    run_phase(model, train, val, config, Phase::Pretrain)
}

pub fn finetune(
    model: &mut Model,
    train: &[&PreparedVideo],
    val: &[&PreparedVideo],
    config: &TrainConfig,
) -> Result<TrainReport> {
    run_phase(model, train, val, config, Phase::Finetune)
}

fn run_phase(
    model: &mut Model,
    train: &[&PreparedVideo],
    val: &[&PreparedVideo],
    config: &TrainConfig,
    phase: Phase,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training videos"));
    }
    let started = Instant::now();
    let frozen = config.freeze_trunk && phase == Phase::Finetune;
    let segment_labels: Vec<Vec<usize>> = train.iter().map(|v| v.segment_labels()).collect();

    let mut adam = AdamState::new(config.adam, &model.params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let validate = |model: &Model| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        let loss = mean_loss(model, val, phase)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("{phase:?} validation loss {loss}")));
        }
        Ok(Some(loss))
    };

    let initial_val_loss = validate(model)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best_val = initial_val_loss.unwrap_or(f64::INFINITY);
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        for &i in &order {
            let video = train[i];
            let (loss, mut grads) =
                model.params.loss_and_grad(video.input(), target(video, phase, &segment_labels[i]))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{phase:?} epoch {epoch}, video `{}`: loss {loss}",
                    video.video_id
                )));
            }
            if frozen {
                freeze_trunk(&mut grads);
            }
            adam.step(&mut model.params, &grads)?;
            sum += loss;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = validate(model)?;
        let train_loss_after = match config.target_loss {
            Some(_) => Some(mean_loss(model, train, phase)?),
            None => None,
        };
        log::debug!("{phase:?} epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        epochs.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
            train_loss_after,
        });

        if config.target_loss.zip(train_loss_after).is_some_and(|(t, l)| l < t) {
            stopped_early = epoch < config.epochs;
            break;
        }
        if let (Some(patience), Some(v)) = (config.patience, val_loss) {
            if v < best_val {
                best_val = v;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    stopped_early = epoch < config.epochs;
                    break;
                }
            }
        }
    }

    Ok(TrainReport {
        phase,
        epochs_requested: config.epochs,
        epochs,
        stopped_early,
        initial_val_loss,
        checkpoint: None,
        seed: config.seed,
        config_hash: String::new(),
        param_count: model.params.param_count(),
        block_names: model.params.block_names(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn freeze_trunk(grads: &mut ModelParams) {
    let head = ModelParams::head_block_names();
    grads.visit_mut(&mut |name, g| {
        if !head.contains(&name) {
            g.fill(0.0);
        }
    });
}

/// Everything stored in a checkpoint header besides the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub split: Split,
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointConfig) -> Result<()> {
    let value = serde_json::to_value(meta).expect("checkpoint config serializes");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    checkpoint::save(path, &model.params, meta.run.train.seed, &meta.run.hash(), value)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointConfig)> {
    let (header, tensors) = checkpoint::load(path)?;
    let meta: CheckpointConfig = serde_json::from_value(header.config)
        .map_err(|e| Error::Checkpoint(format!("config in header: {e}")))?;
    let mut model = Model::new(meta.model.clone(), header.seed)?;
    model.params.load_named(&tensors)?;
    Ok((model, meta))
}

/// Result of [`run_pipeline`]: the trained model and one report per phase run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: Model,
    pub split: Split,
    pub reports: Vec<TrainReport>,
}

/// Splits the dataset, builds the model and runs the requested phase.
///
/// `Phase::Finetune` starts from `init` when given; otherwise it runs
/// pretraining first if the config enables it.
pub fn run_pipeline(
    dataset: &Dataset,
    prepared: &[PreparedVideo],
    config: &RunConfig,
    phase: Phase,
    init: Option<Model>,
) -> Result<PipelineOutput> {
    config.validate()?;
    let counts = config.split_counts(&dataset.manifest);
    let split = crate::dataset::split_dataset(&dataset.video_ids(), counts, config.train.seed)?;
    let train = select(prepared, &split.train)?;
    let val = select(prepared, &split.val)?;
    let model_config = config.model_config(&dataset.manifest);

    let from_checkpoint = init.is_some();
    let mut model = match init {
        Some(m) => {
            if m.config != model_config {
                return Err(Error::invalid(format!(
                    "initial checkpoint was built for {:?}, run needs {model_config:?}",
                    m.config
                )));
            }
            m
        }
        None => Model::new(model_config, config.train.seed)?,
    };

    let mut reports = Vec::new();
    let mut push = |mut r: TrainReport| {
        r.config_hash = config.hash();
        reports.push(r);
    };
    match phase {
        Phase::Pretrain => push(pretrain(&mut model, &train, &val, &config.train)?),
        Phase::Finetune => {
            if !from_checkpoint && config.train.ablation.use_pretraining {
                push(pretrain(&mut model, &train, &val, &config.train)?);
            }
            push(finetune(&mut model, &train, &val, &config.train)?);
        }
    }
    Ok(PipelineOutput {
        model,
        split,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn tiny() -> (Dataset, Vec<PreparedVideo>) {
        let spec = SynthSpec {
            videos: 3,
            min_frames: 6,
            max_frames: 8,
            feature_dim: 6,
            vocab_size: 9,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let prepared = prepare_dataset(&ds).unwrap();
        (ds, prepared)
    }

    fn small_run() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.embed_dim = 4;
        cfg.model.ffn_mult = 2;
        cfg.model.max_query_len = 8;
        cfg.train.epochs = 3;
        cfg.train.adam = cfg.train.adam.with_lr(1e-2);
        cfg.split = Some(crate::dataset::SplitCounts { train: 2, val: 1, test: 0 });
        cfg
    }

    #[test]
    fn loss_examples() {
        let point = Tensor2::from_rows(&[vec![0.0, 800.0, 0.0]]).unwrap();
        assert_eq!(compute_loss(&point, &[2]).unwrap(), 0.0);
        let uniform = Tensor2::zeros(4, 5);
        let l = compute_loss(&uniform, &[1, 2, 3, 5]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);

        let logits = Tensor2::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.7]]).unwrap();
        let labels = [3, 1];
        let per_row: Vec<f64> = (0..2)
            .map(|i| {
                let r = logits.row(i);
                let z: f64 = r.iter().map(|v| v.exp()).sum();
                -(r[labels[i] - 1].exp() / z).ln()
            })
            .collect();
        let want = (per_row[0] + per_row[1]) / 2.0;
        assert!((compute_loss(&logits, &labels).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn preparation_shapes() {
        let (ds, prepared) = tiny();
        for (v, p) in ds.videos.iter().zip(&prepared) {
            let m = ds.manifest.max_frames;
            assert_eq!(p.frames.rows(), m);
            assert_eq!(p.frame_labels.len(), m);
            assert_eq!(p.segment_of.len(), m);
            assert_eq!(p.original_frame_count(), v.meta.frame_count);
            assert_eq!(p.segment_labels().len(), v.meta.segment_count);
            assert!(p.frame_labels.iter().all(|&c| (1..=ds.manifest.num_classes).contains(&c)));
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let (ds, prepared) = tiny();
        let mut cfg = small_run();
        cfg.train.epochs = 0;
        assert!(run_pipeline(&ds, &prepared, &cfg, Phase::Pretrain, None).is_err());
    }

    #[test]
    fn reports_cover_each_epoch() {
        let (ds, prepared) = tiny();
        let cfg = small_run();
        let out = run_pipeline(&ds, &prepared, &cfg, Phase::Finetune, None).unwrap();
        assert_eq!(out.reports.len(), 2);
        assert_eq!(out.reports[0].phase, Phase::Pretrain);
        for r in &out.reports {
            assert_eq!(r.epochs.len(), 3);
            assert!(r.epochs.iter().all(|e| e.train_loss.is_finite() && e.val_loss.unwrap().is_finite()));
            assert_eq!(r.config_hash, cfg.hash());
        }

        let mut no_pre = cfg.clone();
        no_pre.train.ablation.use_pretraining = false;
        let out = run_pipeline(&ds, &prepared, &no_pre, Phase::Finetune, None).unwrap();
        assert_eq!(out.reports.len(), 1);
    }

    #[test]
    fn frozen_trunk_only_moves_head() {
        let (ds, prepared) = tiny();
        let mut cfg = small_run();
        cfg.train.freeze_trunk = true;
        cfg.train.ablation.use_pretraining = false;
        let before = Model::new(cfg.model_config(&ds.manifest), cfg.train.seed).unwrap();
        let out = run_pipeline(&ds, &prepared, &cfg, Phase::Finetune, None).unwrap();
        let head = ModelParams::head_block_names();
        let after = out.model.params.to_named();
        for ((name, a), (_, b)) in after.iter().zip(before.params.to_named()) {
            assert_eq!(head.contains(&name.as_str()), *a != b, "{name}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (ds, prepared) = tiny();
        let cfg = small_run();
        let out = run_pipeline(&ds, &prepared, &cfg, Phase::Pretrain, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let meta = CheckpointConfig {
            run: cfg.clone(),
            model: out.model.config.clone(),
            split: out.split.clone(),
        };
        save_checkpoint(&path, &out.model, &meta).unwrap();
        let (model, back) = load_checkpoint(&path).unwrap();
        assert_eq!(model, out.model);
        assert_eq!(back, meta);
    }
}
