use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use qvsumm::config::{GroundTruthMode, Phase, RunConfig};
use qvsumm::dataset::{load_dataset, ScoreKind, SplitName};
use qvsumm::eval::{evaluate, summarize, Provenance};
use qvsumm::pseudo_label::{aggregate_annotators, generate_pseudo_labels};
use qvsumm::synth::{self, SynthSpec};
use qvsumm::train::{
    load_checkpoint, prepare_dataset, prepare_video, run_pipeline, save_checkpoint, select,
    CheckpointConfig,
};
use qvsumm::vocab::Vocab;

const CHECKPOINT_FILE: &str = "checkpoint.qvs";
const REPORT_FILE: &str = "train_report.json";

#[derive(Parser)]
#[command(name = "qvsumm", version, about = "Query-driven video summarization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset bundle.
    Synth(SynthArgs),
    /// Write segment pseudo labels for every video as `pseudo/<id>.json`.
    PseudoLabels {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on segment pseudo labels.
    Pretrain(TrainArgs),
    /// Train on frame labels, after pretraining unless disabled or `--init` is given.
    Finetune(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvalArgs),
    /// Select a summary for one video and query.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    videos: usize,
    #[arg(long, default_value_t = 16)]
    min_frames: usize,
    #[arg(long, default_value_t = 32)]
    max_frames: usize,
    #[arg(long, default_value_t = 512)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1)]
    fps: u32,
    #[arg(long, default_value_t = 3)]
    annotators: usize,
    #[arg(long, value_enum, default_value_t = Kind::Integer)]
    score_kind: Kind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Integer,
    Continuous,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the checkpoint and training report.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Defaults to the checkpoint's configured budget.
    #[arg(long)]
    budget: Option<f64>,
    /// Defaults to the checkpoint's configured beta.
    #[arg(long)]
    beta: Option<f64>,
    /// Score against the mean-annotator selection only.
    #[arg(long)]
    consensus: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    video: String,
    /// Query text; the video's stored query when omitted.
    #[arg(long)]
    query: Option<String>,
    /// Defaults to `vocab.json` next to the manifest.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    budget: Option<f64>,
    /// Plot data: frame index, expected score, selected flag.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => run_synth(a),
        Command::PseudoLabels { manifest, out } => run_pseudo_labels(&manifest, &out),
        Command::Pretrain(a) => run_train(a, Phase::Pretrain),
        Command::Finetune(a) => run_train(a, Phase::Finetune),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Summarize(a) => run_summarize(a),
    }
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        videos: a.videos,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        feature_dim: a.feature_dim,
        fps: a.fps,
        annotators: a.annotators,
        score_kind: match a.score_kind {
            Kind::Integer => ScoreKind::IntegerCategories,
            Kind::Continuous => ScoreKind::ContinuousUnitInterval,
        },
        seed: a.seed,
        ..SynthSpec::default()
    };
    let manifest = synth::write(&a.out, &spec)?;
    println!("{}", manifest.display());
    Ok(())
}

fn run_pseudo_labels(manifest: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(manifest)?;
    let m = &ds.manifest;
    for v in &ds.videos {
        let mean = aggregate_annotators(&v.annotations)?;
        let labels = generate_pseudo_labels(&mean, m.fps, m.num_classes, m.score_kind)
            .with_context(|| format!("video `{}`", v.meta.video_id))?;
        let path = out.join("pseudo").join(format!("{}.json", v.meta.video_id));
        write_json(&path, &labels)?;
    }
    println!("{} videos labelled", ds.videos.len());
    Ok(())
}

fn run_train(a: TrainArgs, phase: Phase) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => RunConfig::from_json(&read(p)?).with_context(|| format!("{}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    config.train.phase = phase;
    let ds = load_dataset(&a.manifest)?;
    let prepared = prepare_dataset(&ds)?;
    let init = match &a.init {
        Some(p) => Some(load_checkpoint(p)?.0),
        None => None,
    };
    let out = run_pipeline(&ds, &prepared, &config, phase, init)?;

    let ckpt = a.out.join(CHECKPOINT_FILE);
    let meta = CheckpointConfig {
        run: config.clone(),
        model: out.model.config.clone(),
        split: out.split.clone(),
    };
    save_checkpoint(&ckpt, &out.model, &meta)?;
    let mut reports = out.reports;
    if let Some(last) = reports.last_mut() {
        last.checkpoint = Some(ckpt.clone());
    }
    write_json(&a.out.join(REPORT_FILE), &reports)?;
    for r in &reports {
        log::info!(
            "{:?}: {} epochs, final train loss {:?}, {:.1}s",
            r.phase,
            r.epochs.len(),
            r.final_train_loss(),
            r.wall_clock_secs
        );
    }
    println!("{}", ckpt.display());
    Ok(())
}

fn run_evaluate(a: EvalArgs) -> Result<()> {
    let bytes = fs::read(&a.checkpoint).with_context(|| format!("{}", a.checkpoint.display()))?;
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    let split: SplitName = a.split.parse()?;
    let mut eval = meta.run.eval;
    eval.budget = a.budget.unwrap_or(eval.budget);
    eval.beta = a.beta.unwrap_or(eval.beta);
    if a.consensus {
        eval.ground_truth = GroundTruthMode::Consensus;
    }
    let ds = load_dataset(&a.manifest)?;
    let prepared = prepare_dataset(&ds)?;
    let videos = select(&prepared, meta.split.get(split))?;
    let report = evaluate(
        &model,
        &videos,
        &eval,
        Provenance {
            split: a.split.clone(),
            config_hash: meta.run.hash(),
            checkpoint_hash: hex::encode(Sha256::digest(&bytes)),
        },
    )?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    println!("mean F{} = {:.4} over {} videos", report.beta, report.mean_f_beta, report.per_video.len());
    Ok(())
}

fn run_summarize(a: SummarizeArgs) -> Result<()> {
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.manifest)?;
    let Some(video) = ds.video(&a.video) else {
        bail!("no video `{}` in {}", a.video, a.manifest.display());
    };
    let prepared = prepare_video(video, &ds.manifest)?;
    let tokens = match &a.query {
        Some(q) => {
            let path = a.vocab.clone().unwrap_or_else(|| ds.root.join("vocab.json"));
            Some(Vocab::load(&path)?.tokenize(q))
        }
        None => None,
    };
    let budget = a.budget.unwrap_or(meta.run.eval.budget);
    let sel = summarize(&model, &prepared, tokens.as_deref(), budget)?;
    if let Some(p) = &a.csv {
        let mut text = String::from("frame,expected_score,selected\n");
        for (i, (s, m)) in sel.scores.iter().zip(&sel.mask).enumerate() {
            text.push_str(&format!("{i},{s},{}\n", u8::from(*m)));
        }
        write_bytes(p, text.as_bytes())?;
    }
    println!("{}", serde_json::to_string(&sel)?);
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &serde_json::to_vec_pretty(value)?)
}
