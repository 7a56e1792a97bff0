//! Short-time magnitude spectra, the HTK mel filterbank, and regression deltas.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Framing and filterbank parameters. The defaults give 300 frames of 40
/// log-Mel bands for a 3 s segment at 16 kHz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Framing {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    /// Fixed frame count every segment is padded or trimmed to.
    pub frames: usize,
    pub log_floor: f64,
    pub delta_width: usize,
    pub segment_seconds: f64,
    pub mel_scale: String,
}

impl Default for Framing {
    fn default() -> Self {
        Framing {
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 40,
            frames: 300,
            log_floor: 1e-10,
            delta_width: 2,
            segment_seconds: 3.0,
            mel_scale: "htk".into(),
        }
    }
}

pub const MIN_SAMPLE_RATE: u32 = 8000;

impl Framing {
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (self.window_ms * 1e-3 * f64::from(sample_rate)).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (self.hop_ms * 1e-3 * f64::from(sample_rate)).round() as usize
    }

    pub fn n_fft(&self, sample_rate: u32) -> usize {
        self.window_len(sample_rate).next_power_of_two()
    }

    pub fn segment_len(&self, sample_rate: u32) -> usize {
        (self.segment_seconds * f64::from(sample_rate)).round() as usize
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale between 0 Hz and
/// Nyquist, evaluated at FFT bin frequencies with unit peak height.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels` rows of `n_fft / 2 + 1` weights.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let nyquist = f64::from(sample_rate) / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = |k: usize| k as f64 * f64::from(sample_rate) / n_fft as f64;
        let weights = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = bin_hz(k);
                        let rise = (f - lo) / (mid - lo);
                        let fall = (hi - f) / (hi - mid);
                        rise.min(fall).max(0.0)
                    })
                    .collect()
            })
            .collect();
        MelFilterbank {
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(spectrum).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Log-Mel spectrogram of one segment window, `[frames, n_mels]`.
///
/// Frames past the end of the window (and any frames beyond the fixed count)
/// are handled by padding or trimming the frame axis to `framing.frames`;
/// padded frames hold `ln(log_floor)`, the value of silence.
pub fn log_mel(window: &[f64], sample_rate: u32, framing: &Framing) -> Result<Tensor> {
    if sample_rate < MIN_SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "sample rate {sample_rate} Hz is below {MIN_SAMPLE_RATE} Hz"
        )));
    }
    let win = framing.window_len(sample_rate);
    let hop = framing.hop_len(sample_rate);
    let n_fft = framing.n_fft(sample_rate);
    let bank = MelFilterbank::new(framing.n_mels, n_fft, sample_rate);
    let hann: Vec<f64> = (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos())
        .collect();
    // The scalar planner avoids CPU-dependent SIMD paths, keeping output
    // identical across machines.
    let fft = rustfft::FftPlannerScalar::<f64>::new().plan_fft_forward(n_fft);

    let computed = if window.len() >= win {
        (window.len() - win) / hop + 1
    } else {
        0
    };
    let floor_value = framing.log_floor.ln();
    let n_mels = framing.n_mels;
    let mut out = vec![floor_value; framing.frames * n_mels];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for frame in 0..computed.min(framing.frames) {
        let start = frame * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(window[start + i] * hann[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let magnitude: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect();
        let energies = bank.apply(&magnitude);
        for (o, e) in out[frame * n_mels..(frame + 1) * n_mels].iter_mut().zip(energies) {
            *o = e.max(framing.log_floor).ln();
        }
    }
    Tensor::new(vec![framing.frames, n_mels], out)
}

/// Regression deltas along the frame axis of a `[T, bands]` matrix with edge
/// frames replicated.
pub fn deltas(x: &Tensor, width: usize) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "deltas expect [frames, bands]".into(),
        });
    }
    let (t_len, bands) = (x.shape()[0], x.shape()[1]);
    if width == 0 || t_len <= 2 * width {
        return Err(Error::invalid(format!(
            "{t_len} frames is too short for delta width {width}"
        )));
    }
    let denom = 2.0 * (1..=width).map(|n| (n * n) as f64).sum::<f64>();
    let d = x.data();
    let at = |t: isize, b: usize| d[(t.clamp(0, t_len as isize - 1) as usize) * bands + b];
    let mut out = vec![0.0; t_len * bands];
    for t in 0..t_len {
        for b in 0..bands {
            let mut acc = 0.0;
            for n in 1..=width {
                let n_i = n as isize;
                acc += n as f64 * (at(t as isize + n_i, b) - at(t as isize - n_i, b));
            }
            out[t * bands + b] = acc / denom;
        }
    }
    Tensor::new(vec![t_len, bands], out)
}
