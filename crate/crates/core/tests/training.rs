mod common;

use ssacrnn::features::FeatureBlock;
use ssacrnn::model::{checkpoint, AttentionKind, Classifier, ClassifierSpec, Stage};
use ssacrnn::par::Execution;
use ssacrnn::pipeline::{cmd_features, load_corpus, Corpus, RunConfig};
use ssacrnn::training::{
    emotion_index, train_stage, OptimizerConfig, Optimizer, SegmentSet, Silent, TrainConfig, TrainOutcome,
};

fn corpus(dir: &std::path::Path, speakers: usize, per_cell: usize) -> (RunConfig, Corpus) {
    let cfg = common::toy_run(dir, &common::synth(speakers, per_cell));
    cmd_features(&cfg).unwrap();
    let c = load_corpus(&cfg).unwrap();
    (cfg, c)
}

fn speaker_set(c: &Corpus) -> (SegmentSet, Vec<String>) {
    let names: Vec<String> = c.speakers.iter().map(|s| s.id.clone()).collect();
    let label = |b: &FeatureBlock| Ok(names.iter().position(|n| *n == b.speaker_id).unwrap());
    // labelled by speaker, balanced over emotions
    let emotions = RunConfig::default().emotions;
    (SegmentSet::from_blocks(&c.blocks, &emotions, label).unwrap(), names)
}

fn train_speakers(cfg: &RunConfig, c: &Corpus, epochs: usize, seed: u64) -> TrainOutcome {
    let (set, names) = speaker_set(c);
    let spec = ClassifierSpec {
        embedding: 16,
        ..ClassifierSpec::speaker(cfg.crnn.clone(), names.len())
    };
    let model = Classifier::new(spec, names, seed).unwrap();
    let tc = TrainConfig {
        batch_size: 8,
        max_epochs: epochs,
        patience: None,
        seed,
        optimizer: OptimizerConfig {
            learning_rate: 3e-3,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::for_stage(Stage::Sp)
    };
    train_stage(model, &set, &set, &tc, Execution::Parallel, &mut Silent).unwrap()
}

#[test]
fn speaker_tower_separates_toy_speakers() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, c) = corpus(dir.path(), 4, 2);
    let out = train_speakers(&cfg, &c, 50, 1);
    assert_eq!(out.best_uar, 1.0, "{}", out.log());
    assert!(out.best_epoch <= 50);

    // epoch-mean loss keeps falling after the first few epochs
    let losses: Vec<f64> = out.history.iter().map(|r| r.mean_loss).collect();
    let rises = losses[5..].windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 1, "{losses:?}");
}

#[test]
fn same_seed_same_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, c) = corpus(dir.path(), 4, 1);
    let a = train_speakers(&cfg, &c, 3, 7);
    let b = train_speakers(&cfg, &c, 3, 7);
    assert_eq!(a.model.params(), b.model.params());
    let other = train_speakers(&cfg, &c, 3, 8);
    assert_ne!(a.model.params(), other.model.params());
}

#[test]
fn emotion_training_leaves_the_speaker_tower_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, c) = corpus(dir.path(), 4, 1);
    let mut sp = train_speakers(&cfg, &c, 2, 3).model;
    sp.freeze();
    let path = dir.path().join("sp.ckpt");
    let meta = checkpoint::CheckpointMeta {
        stage: Stage::Sp,
        variant: "ssa-crnn-r".into(),
        seed: 3,
        sp_checkpoint_hash: None,
        excluded_speakers: Vec::new(),
        epoch: 2,
        validation_uar: 0.0,
    };
    let before = checkpoint::save(&path, &sp, &meta).unwrap();
    let frozen = sp.params().clone();

    let label = |b: &FeatureBlock| emotion_index(&cfg.emotions, &b.emotion_label);
    let mut set = SegmentSet::from_blocks(&c.blocks, &cfg.emotions, label).unwrap();
    let unfrozen = train_speakers(&cfg, &c, 1, 3).model;
    assert!(set.attach_speaker_states(&unfrozen, Execution::Parallel).is_err());
    set.attach_speaker_states(&sp, Execution::Parallel).unwrap();

    let spec = ClassifierSpec {
        embedding: 16,
        ..ClassifierSpec::emotion(cfg.crnn.clone(), AttentionKind::SpeakerAttention)
    };
    let em = Classifier::new(spec, cfg.emotions.clone(), 4).unwrap();
    let tc = TrainConfig {
        batch_size: 4,
        max_epochs: 2,
        ..TrainConfig::for_stage(Stage::Em)
    };
    train_stage(em, &set, &set, &tc, Execution::Parallel, &mut Silent).unwrap();

    assert_eq!(sp.params(), &frozen);
    assert_eq!(checkpoint::save(&path, &sp, &meta).unwrap(), before);
}

#[test]
fn tiny_step_lowers_the_sample_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, c) = corpus(dir.path(), 4, 1);
    let spec = ClassifierSpec::emotion(cfg.crnn.clone(), AttentionKind::SelfAttention);
    for seed in 0..4 {
        let mut model = Classifier::new(spec.clone(), cfg.emotions.clone(), seed).unwrap();
        let block = &c.blocks[seed as usize];
        let target = emotion_index(&cfg.emotions, &block.emotion_label).unwrap();
        let g = model.sample_gradient(&block.data, target, None).unwrap();
        let mut opt = Optimizer::new(
            OptimizerConfig {
                learning_rate: 1e-6,
                ..OptimizerConfig::default()
            },
            model.params(),
        );
        opt.step(model.params_mut(), &g.grads).unwrap();
        let after = model.sample_gradient(&block.data, target, None).unwrap().loss;
        assert!(after < g.loss, "{after} >= {}", g.loss);
    }
}
