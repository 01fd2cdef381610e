//! Log-mel feature extraction.
//!
//! 25 ms Hann frames with a 10 ms hop, a 512-point FFT, 40 triangular mel
//! filters (HTK mel scale) spanning 125-7500 Hz, log with a 1e-10 floor, and
//! per-utterance mean normalization.

use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const FRAME_LEN: usize = 400;
pub const FRAME_HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const N_MELS: usize = 40;
pub const MEL_LOW_HZ: f64 = 125.0;
pub const MEL_HIGH_HZ: f64 = 7500.0;
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono PCM audio at 16 kHz with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(KwsError::InvalidAudio("empty clip".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(KwsError::InvalidAudio(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(AudioClip { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate_hz(&self) -> u32 {
        SAMPLE_RATE_HZ
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE_HZ as f64
    }
}

/// `frames × 40` matrix of log-mel energies, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    n_frames: usize,
    data: Vec<f64>,
}

impl Spectrogram {
    pub const FRAME_HOP_MS: u32 = 10;
    pub const FRAME_LEN_MS: u32 = 25;

    pub fn from_rows(n_frames: usize, data: Vec<f64>) -> Result<Self> {
        if n_frames == 0 {
            return Err(KwsError::Shape(
                "spectrogram needs at least one frame".into(),
            ));
        }
        if data.len() != n_frames * N_MELS {
            return Err(KwsError::Shape(format!(
                "spectrogram data length {} != {} frames x {N_MELS}",
                data.len(),
                n_frames
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KwsError::NonFinite("spectrogram".into()));
        }
        Ok(Spectrogram { n_frames, data })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        N_MELS
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn get(&self, t: usize, bin: usize) -> f64 {
        self.data[t * N_MELS + bin]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Stable hex SHA-256 over the frame count and the raw bits of every entry.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.n_frames as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies of the 40 filters, in Hz.
pub fn filter_center_frequencies() -> Vec<f64> {
    mel_edge_frequencies()[1..=N_MELS].to_vec()
}

fn mel_edge_frequencies() -> Vec<f64> {
    let lo = hz_to_mel(MEL_LOW_HZ);
    let hi = hz_to_mel(MEL_HIGH_HZ);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

struct Frontend {
    window: Vec<f64>,
    // per filter: first nonzero bin and the weights from there on
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

fn frontend() -> &'static Frontend {
    static FRONTEND: OnceLock<Frontend> = OnceLock::new();
    FRONTEND.get_or_init(|| {
        // periodic Hann
        let window = (0..FRAME_LEN)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / FRAME_LEN as f64).cos())
            .collect();
        let n_bins = FFT_SIZE / 2 + 1;
        let edges = mel_edge_frequencies();
        let filters = (0..N_MELS)
            .map(|m| {
                let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let dense: Vec<f64> = (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * SAMPLE_RATE_HZ as f64 / FFT_SIZE as f64;
                        if f > lo && f <= center {
                            (f - lo) / (center - lo)
                        } else if f > center && f < hi {
                            (hi - f) / (hi - center)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let first = dense.iter().position(|&w| w != 0.0).unwrap_or(0);
                let last = dense.iter().rposition(|&w| w != 0.0).unwrap_or(0);
                (first, dense[first..=last].to_vec())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        Frontend {
            window,
            filters,
            fft,
        }
    })
}

/// Number of frames produced for `n_samples` of audio.
pub fn frame_count(n_samples: usize) -> Option<usize> {
    (n_samples >= FRAME_LEN).then(|| 1 + (n_samples - FRAME_LEN) / FRAME_HOP)
}

/// Log mel-filterbank energies before mean normalization.
pub fn log_mel_energies(clip: &AudioClip) -> Result<Spectrogram> {
    let samples = clip.samples();
    let n_frames = frame_count(samples.len()).ok_or(KwsError::InsufficientSamples {
        needed: FRAME_LEN,
        got: samples.len(),
    })?;
    let fe = frontend();
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut scratch = vec![Complex::new(0.0, 0.0); fe.fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; FFT_SIZE / 2 + 1];
    let mut data = Vec::with_capacity(n_frames * N_MELS);

    for t in 0..n_frames {
        let frame = &samples[t * FRAME_HOP..t * FRAME_HOP + FRAME_LEN];
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < FRAME_LEN {
                Complex::new(frame[i] * fe.window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fe.fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (first, weights) in &fe.filters {
            let e: f64 = weights
                .iter()
                .zip(&power[*first..])
                .map(|(w, p)| w * p)
                .sum();
            data.push((e + LOG_FLOOR).ln());
        }
    }
    Spectrogram::from_rows(n_frames, data)
}

/// Subtracts the per-coefficient mean over all frames.
pub fn mean_normalize(spec: &mut Spectrogram) {
    let t = spec.n_frames() as f64;
    let mut means = [0.0; N_MELS];
    for row in spec.as_slice().chunks_exact(N_MELS) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= t;
    }
    for row in spec.as_mut_slice().chunks_exact_mut(N_MELS) {
        for (v, m) in row.iter_mut().zip(&means) {
            *v -= m;
        }
    }
}

/// Replaces each frame by itself minus the mean of all frames up to and
/// including it. This is the normalization a streaming frontend can apply.
pub fn running_mean_normalize(spec: &mut Spectrogram) {
    let mut sums = [0.0; N_MELS];
    for (t, row) in spec.as_mut_slice().chunks_exact_mut(N_MELS).enumerate() {
        for (s, v) in sums.iter_mut().zip(row.iter_mut()) {
            *s += *v;
            *v -= *s / (t + 1) as f64;
        }
    }
}

/// Full frontend: log-mel energies followed by per-utterance mean normalization.
pub fn extract_features(clip: &AudioClip) -> Result<Spectrogram> {
    let mut spec = log_mel_energies(clip)?;
    mean_normalize(&mut spec);
    Ok(spec)
}
