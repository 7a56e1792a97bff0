//! Audio to per-speaker-normalized three-channel log-Mel segments.

pub mod cache;
pub mod manifest;
pub mod mel;
pub mod wav;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use mel::{deltas, log_mel, Framing, MelFilterbank};

/// One labelled utterance.
#[derive(Clone, Debug)]
pub struct UtteranceRecord {
    pub audio: Vec<f64>,
    pub sample_rate: u32,
    pub speaker_id: String,
    pub emotion_label: String,
    pub utterance_id: String,
}

impl UtteranceRecord {
    pub fn validate(&self, emotions: &[String]) -> Result<()> {
        if self.sample_rate == 0 || self.audio.is_empty() {
            return Err(Error::Audio(format!("{}: empty audio or zero sample rate", self.utterance_id)));
        }
        if !emotions.contains(&self.emotion_label) {
            return Err(Error::invalid(format!(
                "{}: emotion `{}` is not one of {:?}",
                self.utterance_id, self.emotion_label, emotions
            )));
        }
        Ok(())
    }
}

/// A `[3, frames, n_mels]` segment: static log-Mel, deltas, delta-deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    pub data: Tensor,
    pub speaker_id: String,
    pub emotion_label: String,
    pub utterance_id: String,
    pub segment_index: usize,
}

/// Consecutive non-overlapping windows of `seconds`; the last one is
/// zero-padded to full length. Audio shorter than one window yields a single
/// padded window.
pub fn segment(audio: &[f64], sample_rate: u32, seconds: f64) -> Vec<Vec<f64>> {
    let n = (seconds * f64::from(sample_rate)).round() as usize;
    if audio.is_empty() || n == 0 {
        return Vec::new();
    }
    audio
        .chunks(n)
        .map(|c| {
            let mut w = c.to_vec();
            w.resize(n, 0.0);
            w
        })
        .collect()
}

/// Stacks static, delta and delta-delta channels of one window.
pub fn extract_window(window: &[f64], sample_rate: u32, framing: &Framing) -> Result<Tensor> {
    let stat = log_mel(window, sample_rate, framing)?;
    let d1 = deltas(&stat, framing.delta_width)?;
    let d2 = deltas(&d1, framing.delta_width)?;
    let mut data = Vec::with_capacity(stat.len() * 3);
    data.extend_from_slice(stat.data());
    data.extend_from_slice(d1.data());
    data.extend_from_slice(d2.data());
    Tensor::new(vec![3, framing.frames, framing.n_mels], data)
}

/// All feature blocks of one utterance.
pub fn extract(u: &UtteranceRecord, framing: &Framing) -> Result<Vec<FeatureBlock>> {
    if u.audio.is_empty() {
        return Err(Error::Audio(format!("{}: empty audio", u.utterance_id)));
    }
    segment(&u.audio, u.sample_rate, framing.segment_seconds)
        .iter()
        .enumerate()
        .map(|(i, w)| {
            Ok(FeatureBlock {
                data: extract_window(w, u.sample_rate, framing)?,
                speaker_id: u.speaker_id.clone(),
                emotion_label: u.emotion_label.clone(),
                utterance_id: u.utterance_id.clone(),
                segment_index: i,
            })
        })
        .collect()
}

/// Smallest variance used as a divisor; constant channels normalize to zero.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Per-speaker, per-channel mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub var: [f64; 3],
}

#[derive(Clone, Debug, Default)]
pub struct NormalizeReport {
    pub warnings: Vec<String>,
    pub stats: BTreeMap<String, ChannelStats>,
}

fn channel_stats<'a>(blocks: impl Iterator<Item = &'a FeatureBlock> + Clone) -> ChannelStats {
    let mut mean = [0.0; 3];
    let mut var = [0.0; 3];
    for ch in 0..3 {
        let mut n = 0usize;
        let mut sum = 0.0;
        for b in blocks.clone() {
            let plane = channel(&b.data, ch);
            sum += plane.iter().sum::<f64>();
            n += plane.len();
        }
        let m = sum / n as f64;
        let mut ss = 0.0;
        for b in blocks.clone() {
            ss += channel(&b.data, ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = ss / n as f64;
    }
    ChannelStats { mean, var }
}

fn channel(t: &Tensor, ch: usize) -> &[f64] {
    let plane = t.len() / 3;
    &t.data()[ch * plane..(ch + 1) * plane]
}

/// Zero-mean, unit-variance normalization per speaker and channel.
///
/// Statistics for a speaker come from its blocks accepted by `stats_from`
/// (e.g. the training portion of a fold); a speaker with no accepted blocks
/// falls back to all of its blocks. Near-constant channels have their
/// variance clamped to [`VARIANCE_FLOOR`] and a warning is recorded.
pub fn speaker_normalize(
    blocks: &mut [FeatureBlock],
    stats_from: Option<&dyn Fn(&FeatureBlock) -> bool>,
) -> NormalizeReport {
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, b) in blocks.iter().enumerate() {
        by_speaker.entry(b.speaker_id.as_str()).or_default().push(i);
    }
    let mut report = NormalizeReport::default();
    let mut plan = Vec::new();
    for (speaker, idx) in &by_speaker {
        let chosen: Vec<usize> = match stats_from {
            Some(pred) => idx.iter().copied().filter(|&i| pred(&blocks[i])).collect(),
            None => idx.clone(),
        };
        let chosen = if chosen.is_empty() { idx.clone() } else { chosen };
        let mut stats = channel_stats(chosen.iter().map(|&i| &blocks[i]));
        for ch in 0..3 {
            if stats.var[ch] < VARIANCE_FLOOR {
                let msg = format!(
                    "speaker {speaker}: channel {ch} variance {:.3e} clamped to {VARIANCE_FLOOR:e}",
                    stats.var[ch]
                );
                log::warn!("{msg}");
                report.warnings.push(msg);
                stats.var[ch] = VARIANCE_FLOOR;
            }
        }
        plan.push((idx.clone(), stats.clone()));
        report.stats.insert(speaker.to_string(), stats);
    }
    for (idx, stats) in plan {
        for i in idx {
            let plane = blocks[i].data.len() / 3;
            let data = blocks[i].data.data_mut();
            for ch in 0..3 {
                let sd = stats.var[ch].sqrt();
                for v in &mut data[ch * plane..(ch + 1) * plane] {
                    *v = (*v - stats.mean[ch]) / sd;
                }
            }
        }
    }
    report
}
