//! Metrics, fold planning and the synthetic corpus used for desk-scale runs.

pub mod folds;
pub mod metrics;
pub mod synth;

pub use folds::{parse_speakers, plan_folds, render_plans, FoldPlan, Gender, Layout, Mode, SpeakerInfo};
pub use metrics::{aggregate, Aggregate, ConfusionMatrix};
pub use synth::{synth_corpus, SynthConfig, SynthCorpus};
