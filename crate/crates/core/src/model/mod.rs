//! Convolutional-recurrent encoder, self-attention and speaker-attention
//! pooling, and the classifier heads of the speaker and emotion towers.

pub mod checkpoint;
mod classifier;
mod config;
pub mod layers;
mod params;

pub use checkpoint::{CheckpointHeader, CheckpointMeta, Stage};
pub use classifier::{forward_em, forward_sp, speaker_states, Classifier, Forward, Prediction, SampleGradient};
pub use config::{
    AttentionKind, ClassifierSpec, CrnnConfig, EMOTION_CLASSES, EMOTION_EMBEDDING, SPEAKER_EMBEDDING,
};
pub use layers::{classify, crnn_encode, pre_recurrent, self_attention, speaker_attention};
pub use params::{AttentionVars, ClassifierVars, ParamInfo, ParamSet, SsaVars};

/// Utterance-level posteriors: the mean of the segment posteriors.
pub fn average_posteriors(segments: &[Vec<f64>]) -> Vec<f64> {
    let k = segments.first().map_or(0, Vec::len);
    let mut out = vec![0.0; k];
    for s in segments {
        for (o, p) in out.iter_mut().zip(s) {
            *o += p;
        }
    }
    for o in &mut out {
        *o /= segments.len() as f64;
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
