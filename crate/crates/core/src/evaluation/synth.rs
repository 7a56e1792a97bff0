//! Synthetic corpus with speaker and emotion cues that are separable by
//! construction.
//!
//! A speaker is a harmonic tone with its own fundamental band and spectral
//! resonance. An emotion is a level offset and an amplitude-modulation rate
//! applied on top, the same for every speaker.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::folds::{Gender, SpeakerInfo};
use crate::error::{Error, Result};
use crate::features::manifest::{self, ManifestEntry};
use crate::features::wav::write_wav;
use crate::par::Execution;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub speakers: usize,
    pub emotions: Vec<String>,
    pub utterances_per_cell: usize,
    /// Utterance multiplier per emotion, e.g. `[8, 1, 1, 1]`.
    pub class_weights: Vec<usize>,
    pub seed: u64,
    pub sample_rate: u32,
    pub seconds: f64,
    /// Scales the emotion level offsets and modulation depth.
    pub emotion_contrast: f64,
    /// Peak amplitude of additive uniform noise.
    pub noise: f64,
    /// Number of female speakers; the rest are male.
    pub female_speakers: usize,
}

pub const DEFAULT_EMOTIONS: [&str; 4] = ["neutral", "happy", "angry", "sad"];

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            speakers: 8,
            emotions: DEFAULT_EMOTIONS.iter().map(|s| s.to_string()).collect(),
            utterances_per_cell: 5,
            class_weights: vec![1; 4],
            seed: 0,
            sample_rate: 16_000,
            seconds: 3.0,
            emotion_contrast: 1.0,
            noise: 0.002,
            female_speakers: 4,
        }
    }
}

/// One utterance to synthesize.
#[derive(Clone, Debug)]
struct Plan {
    speaker: usize,
    emotion: usize,
    take: usize,
    index: u64,
}

/// A written corpus.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub manifest_path: PathBuf,
    pub speakers_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub speakers: Vec<SpeakerInfo>,
}

pub fn speaker_id(s: usize) -> String {
    format!("spk{s:02}")
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 4 {
            return Err(Error::invalid("a synthetic corpus needs at least 4 speakers"));
        }
        if self.emotions.is_empty() || self.class_weights.len() != self.emotions.len() {
            return Err(Error::invalid("one class weight per emotion is required"));
        }
        if self.utterances_per_cell == 0 || self.class_weights.contains(&0) {
            return Err(Error::invalid("every emotion needs at least one utterance per speaker"));
        }
        if self.seconds <= 0.0 || self.sample_rate == 0 {
            return Err(Error::invalid("duration and sample rate must be positive"));
        }
        if self.female_speakers > self.speakers {
            return Err(Error::invalid("more female speakers than speakers"));
        }
        Ok(())
    }

    pub fn speaker_list(&self) -> Vec<SpeakerInfo> {
        (0..self.speakers)
            .map(|s| {
                let g = if s < self.female_speakers { Gender::F } else { Gender::M };
                SpeakerInfo::new(speaker_id(s), Some(g))
            })
            .collect()
    }

    fn plans(&self) -> Vec<Plan> {
        let mut out = Vec::new();
        for speaker in 0..self.speakers {
            for (emotion, &w) in self.class_weights.iter().enumerate() {
                for take in 0..self.utterances_per_cell * w {
                    let index = out.len() as u64;
                    out.push(Plan {
                        speaker,
                        emotion,
                        take,
                        index,
                    });
                }
            }
        }
        out
    }

    /// Audio of one utterance.
    fn render(&self, p: &Plan) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(p.index + 1);
        let sr = f64::from(self.sample_rate);
        let n = (self.seconds * sr).round() as usize;

        let s = p.speaker as f64;
        let f0 = 110.0 * 2f64.powf(s / 5.0) * (1.0 + 0.02 * rng.random_range(-1.0..1.0));
        let resonance = 500.0 + 260.0 * s;
        let nyq = sr / 2.0;
        let harmonics: Vec<(f64, f64, f64)> = (1..)
            .map(|h| h as f64 * f0)
            .take_while(|&f| f < nyq.min(5000.0))
            .map(|f| {
                let a = 1.0 / (1.0 + ((f - resonance) / 150.0).powi(2)) + 0.05 * f0 / f;
                (f, a, rng.random_range(0.0..TAU))
            })
            .collect();
        let norm: f64 = harmonics.iter().map(|h| h.1).sum();

        let e = p.emotion as f64;
        let k = self.emotion_contrast;
        let level_db = k * 6.0 * (e - 1.5) + rng.random_range(-1.0..1.0);
        let gain = 0.04 * 10f64.powf(level_db / 20.0) / norm;
        let am_rate = 2.0 + 3.0 * e;
        let am_depth = (0.6 * k).min(0.95);
        let am_phase = rng.random_range(0.0..TAU);

        (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                let tone: f64 = harmonics.iter().map(|&(f, a, ph)| a * (TAU * f * t + ph).sin()).sum();
                let am = 1.0 + am_depth * (TAU * am_rate * t + am_phase).sin();
                gain * am * tone + self.noise * rng.random_range(-1.0..1.0)
            })
            .collect()
    }
}

/// Writes WAV files, `manifest.tsv` and `speakers.tsv` under `out`.
pub fn synth_corpus(cfg: &SynthConfig, out: &Path, exec: Execution) -> Result<SynthCorpus> {
    cfg.validate()?;
    let plans = cfg.plans();
    let entries = exec.map(&plans, |p| -> Result<ManifestEntry> {
        let spk = speaker_id(p.speaker);
        let emo = &cfg.emotions[p.emotion];
        let utterance_id = format!("{spk}_{emo}_{:02}", p.take);
        let path = out.join("wav").join(&spk).join(format!("{utterance_id}.wav"));
        std::fs::create_dir_all(path.parent().expect("joined path has a parent"))?;
        write_wav(&path, &cfg.render(p), cfg.sample_rate)?;
        Ok(ManifestEntry {
            path,
            utterance_id,
            speaker_id: spk,
            emotion_label: emo.clone(),
        })
    });
    let entries = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let speakers = cfg.speaker_list();

    let manifest_path = out.join("manifest.tsv");
    crate::container::write_atomic(&manifest_path, manifest::render(&entries, out).as_bytes())?;
    let speakers_path = out.join("speakers.tsv");
    let listing: String = speakers
        .iter()
        .map(|s| format!("{}\t{:?}\n", s.id, s.gender.expect("synthetic speakers have a gender")))
        .collect();
    crate::container::write_atomic(&speakers_path, listing.as_bytes())?;
    Ok(SynthCorpus {
        manifest_path,
        speakers_path,
        entries,
        speakers,
    })
}
