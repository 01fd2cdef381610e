//! Waveform-domain ("classic") and spectrogram-domain (masking) augmentation,
//! plus routing of augmented features to the teacher and student inputs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::frontend::{AudioClip, Spectrogram, N_MELS};
use crate::rng::RngKey;

pub const REVERB_TAPS: usize = 50;
pub const REVERB_DECAY_RANGE: (f64, f64) = (0.9, 0.99);

/// Which model inputs receive the spectrogram masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Teacher and student see the same masked features.
    Shared,
    /// Only the student input is masked; the teacher sees unmasked features.
    StudentOnly,
    /// Neither input is masked.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub classic_enabled: bool,
    pub snr_db_range: (f64, f64),
    pub reverb_enabled: bool,
    pub spec_enabled: bool,
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub mask_value: f64,
    pub routing: Routing,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            classic_enabled: true,
            snr_db_range: (5.0, 20.0),
            reverb_enabled: false,
            spec_enabled: true,
            n_freq_masks: 2,
            max_freq_width: 8,
            n_time_masks: 2,
            max_time_width: 10,
            mask_value: 0.0,
            routing: Routing::Shared,
        }
    }
}

impl AugmentationPolicy {
    /// Policy that leaves every input untouched.
    pub fn disabled() -> Self {
        AugmentationPolicy {
            classic_enabled: false,
            reverb_enabled: false,
            spec_enabled: false,
            routing: Routing::None,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.snr_db_range;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(KwsError::Config(format!(
                "snr_db_range must be finite with low <= high, got ({lo}, {hi})"
            )));
        }
        if self.max_freq_width > N_MELS {
            return Err(KwsError::Config(format!(
                "max_freq_width {} exceeds {N_MELS} bins",
                self.max_freq_width
            )));
        }
        if !self.mask_value.is_finite() {
            return Err(KwsError::Config("mask_value must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Frequency,
    Time,
}

/// One contiguous mask: `width` bins (or frames) starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mask {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Draws the masks `spec_augment` would apply to a spectrogram with `n_frames` rows.
pub fn draw_masks(policy: &AugmentationPolicy, n_frames: usize, key: RngKey) -> Vec<Mask> {
    let mut rng = key.rng();
    let mut masks = Vec::with_capacity(policy.n_freq_masks + policy.n_time_masks);
    for _ in 0..policy.n_freq_masks {
        let width = rng.random_range(0..=policy.max_freq_width);
        let start = rng.random_range(0..=N_MELS - width);
        masks.push(Mask {
            axis: MaskAxis::Frequency,
            start,
            width,
        });
    }
    let max_t = policy.max_time_width.min(n_frames);
    for _ in 0..policy.n_time_masks {
        let width = rng.random_range(0..=max_t);
        let start = rng.random_range(0..=n_frames - width);
        masks.push(Mask {
            axis: MaskAxis::Time,
            start,
            width,
        });
    }
    masks
}

pub fn apply_masks(spec: &Spectrogram, masks: &[Mask], mask_value: f64) -> Spectrogram {
    let mut out = spec.clone();
    let t_max = out.n_frames();
    let data = out.as_mut_slice();
    for m in masks {
        match m.axis {
            MaskAxis::Frequency => {
                let end = (m.start + m.width).min(N_MELS);
                for row in data.chunks_exact_mut(N_MELS) {
                    row[m.start..end].fill(mask_value);
                }
            }
            MaskAxis::Time => {
                let end = (m.start + m.width).min(t_max);
                data[m.start * N_MELS..end * N_MELS].fill(mask_value);
            }
        }
    }
    out
}

/// Time and frequency masking. Returns the input unchanged when spec
/// augmentation is disabled in `policy`.
pub fn spec_augment(spec: &Spectrogram, policy: &AugmentationPolicy, key: RngKey) -> Spectrogram {
    if !policy.spec_enabled {
        return spec.clone();
    }
    let masks = draw_masks(policy, spec.n_frames(), key);
    apply_masks(spec, &masks, policy.mask_value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub teacher_input: Spectrogram,
    pub student_input: Spectrogram,
    pub draw_id: String,
}

pub fn make_pair(
    spec: &Spectrogram,
    policy: &AugmentationPolicy,
    key: RngKey,
    draw_id: impl Into<String>,
) -> AugmentedPair {
    let draw_id = draw_id.into();
    match policy.routing {
        Routing::Shared => {
            let masked = spec_augment(spec, policy, key);
            AugmentedPair {
                teacher_input: masked.clone(),
                student_input: masked,
                draw_id,
            }
        }
        Routing::StudentOnly => AugmentedPair {
            teacher_input: spec.clone(),
            student_input: spec_augment(spec, policy, key),
            draw_id,
        },
        Routing::None => AugmentedPair {
            teacher_input: spec.clone(),
            student_input: spec.clone(),
            draw_id,
        },
    }
}

fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Adds `noise` (tiled to the clip length) scaled so that the clean-to-noise
/// power ratio equals `snr_db`. Returns the mixture and the scaled noise.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if clean.is_empty() || noise.is_empty() {
        return Err(KwsError::InvalidAudio("empty signal".into()));
    }
    let tiled: Vec<f64> = noise.iter().copied().cycle().take(clean.len()).collect();
    let p_clean = mean_power(clean);
    let p_noise = mean_power(&tiled);
    if p_clean == 0.0 || p_noise == 0.0 {
        return Err(KwsError::ZeroEnergy);
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = tiled.iter().map(|n| n * gain).collect();
    let mixed = clean.iter().zip(&scaled).map(|(c, n)| c + n).collect();
    Ok((mixed, scaled))
}

/// Scales the signal down so that its peak magnitude is at most 1.
pub fn peak_normalize(x: &mut [f64]) {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        for v in x.iter_mut() {
            *v /= peak;
        }
    }
}

/// Causal convolution with a `REVERB_TAPS`-tap exponentially decaying impulse
/// response `h[n] = decay^n`. Output length equals input length.
pub fn synthetic_reverb(x: &[f64], decay: f64) -> Vec<f64> {
    let ir: Vec<f64> = (0..REVERB_TAPS).map(|n| decay.powi(n as i32)).collect();
    (0..x.len())
        .map(|t| {
            ir.iter()
                .enumerate()
                .take(t + 1)
                .map(|(j, h)| h * x[t - j])
                .sum()
        })
        .collect()
}

/// Noise mixing (and optional reverberation) in the waveform domain.
pub fn classic_augment(
    clip: &AudioClip,
    noise: &AudioClip,
    policy: &AugmentationPolicy,
    key: RngKey,
) -> Result<AudioClip> {
    if !policy.classic_enabled {
        return Ok(clip.clone());
    }
    let mut rng = key.rng();
    let clean = if policy.reverb_enabled {
        let decay = rng.random_range(REVERB_DECAY_RANGE.0..=REVERB_DECAY_RANGE.1);
        synthetic_reverb(clip.samples(), decay)
    } else {
        clip.samples().to_vec()
    };
    let (lo, hi) = policy.snr_db_range;
    let snr_db = if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    };
    let (mut mixed, _) = mix_at_snr(&clean, noise.samples(), snr_db)?;
    peak_normalize(&mut mixed);
    AudioClip::new(mixed)
}

/// Gaussian noise passed through a one-pole low-pass filter whose coefficient
/// is drawn from [0, 0.95], giving a random spectral tilt.
pub fn synthetic_noise(len: usize, key: RngKey) -> Result<AudioClip> {
    let mut rng = key.rng();
    let pole: f64 = rng.random_range(0.0..=0.95);
    let mut prev = 0.0;
    let samples = (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(&mut rng);
            prev = pole * prev + (1.0 - pole) * w;
            prev
        })
        .collect();
    AudioClip::new(samples)
}
