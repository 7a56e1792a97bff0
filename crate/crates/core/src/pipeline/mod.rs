//! End-to-end commands over a manifest: feature caching, per-fold staged
//! training and cross-fold evaluation.

mod eval;
mod features;
mod train;

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evaluation::{Layout, Mode};
use crate::features::Framing;
use crate::model::{CrnnConfig, Stage, EMOTION_EMBEDDING, SPEAKER_EMBEDDING};
use crate::par::Execution;
use crate::training::TrainConfig;

pub use eval::{cmd_eval, EmbeddingHeader, EvalReport};
pub use features::{cmd_features, FeatureError, FeaturesReport};
pub use train::{cmd_train, fold_plans, load_corpus, Corpus, FoldArtifacts, StageSummary};

/// Which system is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Self-attention emotion classifier.
    Acrnn,
    /// Self-attention emotion classifier with the equal-output constraint.
    AcrnnR,
    /// Speaker classifier, then a speaker-attention emotion classifier with
    /// the constraint.
    SsaCrnnR,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Acrnn, Variant::AcrnnR, Variant::SsaCrnnR];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Acrnn => "acrnn",
            Variant::AcrnnR => "acrnn-r",
            Variant::SsaCrnnR => "ssa-crnn-r",
        }
    }

    pub fn regularized(self) -> bool {
        self != Variant::Acrnn
    }

    pub fn uses_speaker_tower(self) -> bool {
        self == Variant::SsaCrnnR
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (acrnn, acrnn-r, ssa-crnn-r)")))
    }
}

/// Everything a run needs besides the corpus itself.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Optional `speaker<TAB>gender` list; defaults to manifest order.
    pub speakers: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    pub layout: Layout,
    /// Required for the speaker-attention variant.
    pub mode: Option<Mode>,
    pub variant: Variant,
    pub seed: u64,
    /// Emotion class names, in class-index order.
    pub emotions: Vec<String>,
    pub framing: Framing,
    pub crnn: CrnnConfig,
    pub speaker_embedding: usize,
    pub emotion_embedding: usize,
    /// Hyperparameters shared by both stages; `stage`, `seed` and
    /// `regularize` are set per stage.
    pub train: TrainConfig,
    pub sp_regularize: bool,
    /// Utterances per (speaker, emotion) held out to select the speaker
    /// classifier.
    pub sp_validation_per_cell: usize,
    pub export_embeddings: bool,
    pub parallel: bool,
    /// Train folds concurrently; each fold writes its own directory.
    pub fold_parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: PathBuf::from("manifest.tsv"),
            speakers: None,
            cache_dir: PathBuf::from("cache"),
            output_dir: PathBuf::from("runs"),
            layout: Layout::IemocapLike,
            mode: None,
            variant: Variant::SsaCrnnR,
            seed: 0,
            emotions: crate::evaluation::synth::DEFAULT_EMOTIONS.iter().map(|s| s.to_string()).collect(),
            framing: Framing::default(),
            crnn: CrnnConfig::default(),
            speaker_embedding: SPEAKER_EMBEDDING,
            emotion_embedding: EMOTION_EMBEDDING,
            train: TrainConfig::for_stage(Stage::Em),
            sp_regularize: false,
            sp_validation_per_cell: 1,
            export_embeddings: true,
            parallel: true,
            fold_parallel: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.variant.uses_speaker_tower() && self.mode.is_none() {
            return bad("variant ssa-crnn-r requires `mode` (loso or speaker_dependent)".into());
        }
        if self.emotions.len() < 2 {
            return bad("at least two emotion classes are required".into());
        }
        self.crnn.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.crnn.frames != self.framing.frames || self.crnn.mel_bands != self.framing.n_mels {
            return bad(format!(
                "model input {}x{} does not match features {}x{}",
                self.crnn.frames, self.crnn.mel_bands, self.framing.frames, self.framing.n_mels
            ));
        }
        if self.train.balanced && self.train.batch_size % self.emotions.len() != 0 {
            return bad(format!(
                "batch_size {} is not divisible by {} emotions",
                self.train.batch_size,
                self.emotions.len()
            ));
        }
        if self.train.batch_size == 0 || self.train.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if self.speaker_embedding == 0 || self.emotion_embedding == 0 {
            return bad("embedding sizes must be positive".into());
        }
        Ok(())
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    /// Mode used for fold planning; irrelevant without the speaker tower.
    pub fn effective_mode(&self) -> Mode {
        self.mode.unwrap_or(Mode::Loso)
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.output_dir.join(format!("fold{fold:02}")).join(self.variant.name())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir.join(format!("report-{}", self.variant.name()))
    }
}

/// Deterministic per-purpose seed.
pub(crate) fn derive_seed(base: u64, fold: usize, tag: u64) -> u64 {
    let mut z = base ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("ssa".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.mode = Some(Mode::Loso);
        c.validate().unwrap();
        c.variant = Variant::Acrnn;
        c.mode = None;
        c.validate().unwrap();
        c.crnn.frames = 100;
        assert!(c.validate().is_err());
    }
}
