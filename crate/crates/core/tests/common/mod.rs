//! Shared fixtures: small synthetic corpora with short segments and a
//! reduced network so training tests run in seconds.

#![allow(dead_code)]

use std::path::Path;

use ssacrnn::evaluation::{synth_corpus, Layout, Mode, SynthConfig};
use ssacrnn::features::Framing;
use ssacrnn::model::CrnnConfig;
use ssacrnn::par::Execution;
use ssacrnn::pipeline::RunConfig;

pub const FRAMES: usize = 32;

/// One 32-frame segment per utterance.
pub fn short_framing() -> Framing {
    Framing {
        frames: FRAMES,
        segment_seconds: 0.33,
        ..Framing::default()
    }
}

pub fn small_crnn() -> CrnnConfig {
    CrnnConfig {
        conv_channels: vec![4, 4],
        linear_units: 16,
        lstm_cells: 8,
        frames: FRAMES,
        ..CrnnConfig::default()
    }
}

pub fn synth(speakers: usize, per_cell: usize) -> SynthConfig {
    SynthConfig {
        speakers,
        utterances_per_cell: per_cell,
        female_speakers: speakers / 2,
        seconds: 0.33,
        emotion_contrast: 2.0,
        ..SynthConfig::default()
    }
}

/// Writes `synth` under `root` and returns a two-fold LOSO run config
/// pointing at it.
pub fn toy_run(root: &Path, synth: &SynthConfig) -> RunConfig {
    let corpus = synth_corpus(synth, &root.join("corpus"), Execution::Parallel).unwrap();
    let mut cfg = RunConfig {
        manifest: corpus.manifest_path,
        speakers: Some(corpus.speakers_path),
        cache_dir: root.join("cache"),
        output_dir: root.join("runs"),
        layout: Layout::Synthetic { folds: 2 },
        mode: Some(Mode::Loso),
        seed: synth.seed,
        framing: short_framing(),
        crnn: small_crnn(),
        speaker_embedding: 16,
        emotion_embedding: 16,
        ..RunConfig::default()
    };
    cfg.train.batch_size = 4;
    cfg.train.optimizer.learning_rate = 3e-3;
    cfg.train.max_epochs = 10;
    cfg.train.patience = None;
    cfg
}
