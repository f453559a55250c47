use qvsumm::config::{Phase, RunConfig};
use qvsumm::dataset::SplitCounts;
use qvsumm::model::{Model, ModelConfig, Target};
use qvsumm::nn::{AdamConfig, AdamState, Parameters};
use qvsumm::synth::{generate, SynthSpec};
use qvsumm::train::{load_checkpoint, prepare_dataset, run_pipeline, save_checkpoint, CheckpointConfig};

fn config(mutual: bool, booster: bool) -> ModelConfig {
    ModelConfig {
        feature_dim: 16,
        embed_dim: 8,
        max_query_len: 8,
        ffn_mult: 2,
        vocab_size: 10,
        num_classes: 5,
        mutual_attention: mutual,
        semantics_booster: booster,
    }
}

#[test]
fn one_adam_step_rarely_increases_loss() {
    let ds = generate(&SynthSpec {
        videos: 1,
        feature_dim: 16,
        vocab_size: 10,
        seed: 3,
        ..SynthSpec::default()
    })
    .unwrap();
    let video = &prepare_dataset(&ds).unwrap()[0];
    let target = Target::Frames(&video.frame_labels);
    let mut descended = 0;
    for seed in 0..100 {
        let mut model = Model::new(config(true, true), seed).unwrap();
        let (before, grads) = model.params.loss_and_grad(video.input(), target).unwrap();
        let mut adam = AdamState::new(AdamConfig::default().with_lr(1e-4), &model.params);
        adam.step(&mut model.params, &grads).unwrap();
        let after = model.params.loss(video.input(), target).unwrap();
        if after <= before {
            descended += 1;
        }
    }
    assert!(descended >= 95, "loss decreased in only {descended}/100 seeds");
}

#[test]
fn ablations_change_only_their_blocks() {
    let full = Model::new(config(true, true), 0).unwrap().params;
    let no_mutual = Model::new(config(false, true), 0).unwrap().params;
    let bow = Model::new(config(true, false), 0).unwrap().params;

    let names = |p: &qvsumm::model::ModelParams| p.block_names();
    let missing: Vec<String> = names(&full)
        .into_iter()
        .filter(|n| !names(&no_mutual).contains(n))
        .collect();
    assert_eq!(missing, ["mutual.w_m", "mutual.b_m"]);
    assert_eq!(full.param_count() - no_mutual.param_count(), 16 * 16 + 16);

    let bow_names = names(&bow);
    assert!(bow_names.iter().all(|n| !n.starts_with("booster.")));
    assert!(bow_names.contains(&"bow.w".to_string()));
    let shared = |n: &String| !n.starts_with("booster.") && !n.starts_with("bow.");
    assert_eq!(
        names(&full).into_iter().filter(shared).collect::<Vec<_>>(),
        bow_names.into_iter().filter(shared).collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_from_another_architecture_is_rejected() {
    let ds = generate(&SynthSpec {
        videos: 3,
        feature_dim: 8,
        ..SynthSpec::default()
    })
    .unwrap();
    let prepared = prepare_dataset(&ds).unwrap();
    let mut cfg = RunConfig::default();
    cfg.model.embed_dim = 4;
    cfg.train.epochs = 1;
    cfg.split = Some(SplitCounts { train: 2, val: 1, test: 0 });
    let out = run_pipeline(&ds, &prepared, &cfg, Phase::Pretrain, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.qvs");
    let meta = CheckpointConfig {
        run: cfg.clone(),
        model: out.model.config.clone(),
        split: out.split.clone(),
    };
    save_checkpoint(&path, &out.model, &meta).unwrap();
    let (loaded, _) = load_checkpoint(&path).unwrap();

    let mut other = cfg.clone();
    other.train.ablation.use_mutual_attention = false;
    assert!(run_pipeline(&ds, &prepared, &other, Phase::Finetune, Some(loaded.clone())).is_err());
    let resumed = run_pipeline(&ds, &prepared, &cfg, Phase::Finetune, Some(loaded)).unwrap();
    assert_eq!(resumed.reports.len(), 1, "an initial checkpoint skips pretraining");
}
