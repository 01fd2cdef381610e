//! Synthetic keyword corpus.
//!
//! The keyword is a two-segment acoustic pattern: a 300 ms linear chirp from
//! 400 to 800 Hz followed by a 300 ms 1200 Hz tone. Negatives are noise alone,
//! either segment alone, both segments in reversed order, or an unrelated
//! distractor chirp. Frame-level encoder units mark chirp frames as unit 1,
//! tone frames as unit 2, distractor frames as unit 3 and everything else as 0.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{save_manifest, DatasetManifest, Label, Split, UtteranceRecord};
use super::wav::write_wav;
use crate::augmentation::{mix_at_snr, peak_normalize, synthetic_noise};
use crate::error::{KwsError, Result};
use crate::frontend::{frame_count, AudioClip, FRAME_HOP, FRAME_LEN, SAMPLE_RATE_HZ};
use crate::rng::RngKey;

pub const SEGMENT_SAMPLES: usize = 4_800;
pub const CHIRP_HZ: (f64, f64) = (400.0, 800.0);
pub const TONE_HZ: f64 = 1_200.0;
pub const DISTRACTOR_HZ: (f64, f64) = (1_800.0, 2_600.0);
const FADE_SAMPLES: usize = 160;

pub const UNIT_BLANK: usize = 0;
pub const UNIT_CHIRP: usize = 1;
pub const UNIT_TONE: usize = 2;
pub const UNIT_OTHER: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_labeled_pos: usize,
    pub n_labeled_neg: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub noise_snr_db_range: (f64, f64),
    /// SNR range of the test split; the training range when absent.
    pub test_snr_db_range: Option<(f64, f64)>,
    /// Fraction of unlabeled utterances that contain the keyword.
    pub unlabeled_positive_fraction: f64,
    pub test_positive_fraction: f64,
    pub clip_samples: usize,
    /// Encoder class count N; distractor frames fall back to unit 0 when N < 4.
    pub encoder_classes: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            n_labeled_pos: 200,
            n_labeled_neg: 200,
            n_unlabeled: 1600,
            n_test: 400,
            noise_snr_db_range: (0.0, 20.0),
            test_snr_db_range: None,
            unlabeled_positive_fraction: 0.5,
            test_positive_fraction: 0.5,
            clip_samples: SAMPLE_RATE_HZ as usize,
            encoder_classes: 4,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [Some(self.noise_snr_db_range), self.test_snr_db_range];
        for (lo, hi) in ranges.into_iter().flatten() {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(KwsError::Config(format!("invalid SNR range ({lo}, {hi})")));
            }
        }
        for f in [
            self.unlabeled_positive_fraction,
            self.test_positive_fraction,
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(KwsError::Config(format!("fraction {f} outside [0, 1]")));
            }
        }
        if self.clip_samples < 2 * SEGMENT_SAMPLES + FRAME_LEN {
            return Err(KwsError::Config(format!(
                "clip_samples must be at least {}",
                2 * SEGMENT_SAMPLES + FRAME_LEN
            )));
        }
        if self.encoder_classes < 3 {
            return Err(KwsError::Config("encoder_classes must be >= 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtteranceKind {
    Keyword,
    NoiseOnly,
    ChirpOnly,
    ToneOnly,
    Reversed,
    Distractor,
}

impl UtteranceKind {
    pub const NEGATIVES: [UtteranceKind; 5] = [
        UtteranceKind::NoiseOnly,
        UtteranceKind::ChirpOnly,
        UtteranceKind::ToneOnly,
        UtteranceKind::Reversed,
        UtteranceKind::Distractor,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Segment {
    Chirp,
    Tone,
    Distractor,
}

/// One synthesized utterance with its components kept apart.
#[derive(Debug, Clone)]
pub struct SynthesizedUtterance {
    pub kind: UtteranceKind,
    /// Keyword or distractor pattern, after the common peak scaling.
    pub clean: Vec<f64>,
    /// Noise as mixed, after the common peak scaling.
    pub noise: Vec<f64>,
    /// SNR used for the mix; `None` for noise-only utterances.
    pub snr_db: Option<f64>,
    /// Keyword samples `start..end`, positives only.
    pub keyword_samples: Option<(usize, usize)>,
    pub encoder_units: Vec<usize>,
}

impl SynthesizedUtterance {
    pub fn mixed(&self) -> Vec<f64> {
        self.clean
            .iter()
            .zip(&self.noise)
            .map(|(c, n)| c + n)
            .collect()
    }

    pub fn keyword_span(&self) -> Option<(usize, usize)> {
        let (s, e) = self.keyword_samples?;
        let n_frames = self.encoder_units.len();
        Some((
            first_frame_centered_at_or_after(s),
            first_frame_centered_at_or_after(e).min(n_frames),
        ))
    }
}

/// Index of the first frame whose center sample is `>= sample`.
fn first_frame_centered_at_or_after(sample: usize) -> usize {
    let half = FRAME_LEN / 2;
    if sample <= half {
        0
    } else {
        (sample - half).div_ceil(FRAME_HOP)
    }
}

fn render_segment(seg: Segment, pitch: f64, amp: f64, out: &mut [f64]) {
    let n = out.len();
    let sr = SAMPLE_RATE_HZ as f64;
    let mut phase = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        let frac = i as f64 / n as f64;
        let f = match seg {
            Segment::Chirp => CHIRP_HZ.0 + (CHIRP_HZ.1 - CHIRP_HZ.0) * frac,
            Segment::Tone => TONE_HZ,
            Segment::Distractor => DISTRACTOR_HZ.0 + (DISTRACTOR_HZ.1 - DISTRACTOR_HZ.0) * frac,
        } * pitch;
        phase += 2.0 * PI * f / sr;
        let fade = ((i.min(n - 1 - i)) as f64 / FADE_SAMPLES as f64).min(1.0);
        *o += amp * fade * phase.sin();
    }
}

fn unit_for(seg: Segment, n_classes: usize) -> usize {
    match seg {
        Segment::Chirp => UNIT_CHIRP,
        Segment::Tone => UNIT_TONE,
        Segment::Distractor if n_classes > UNIT_OTHER => UNIT_OTHER,
        Segment::Distractor => UNIT_BLANK,
    }
}

/// Synthesizes one utterance of `kind`, deterministic in `key`.
pub fn synthesize_utterance(
    kind: UtteranceKind,
    snr_db_range: (f64, f64),
    spec: &CorpusSpec,
    key: RngKey,
) -> Result<SynthesizedUtterance> {
    let mut rng = key.derive("pattern").rng();
    let len = spec.clip_samples;
    let n_frames = frame_count(len).expect("clip_samples validated");
    let segments: Vec<Segment> = match kind {
        UtteranceKind::Keyword => vec![Segment::Chirp, Segment::Tone],
        UtteranceKind::NoiseOnly => vec![],
        UtteranceKind::ChirpOnly => vec![Segment::Chirp],
        UtteranceKind::ToneOnly => vec![Segment::Tone],
        UtteranceKind::Reversed => vec![Segment::Tone, Segment::Chirp],
        UtteranceKind::Distractor => vec![Segment::Distractor],
    };
    let pattern_len = segments.len() * SEGMENT_SAMPLES;
    // keep the pattern inside the span covered by analysis frames
    let onset = rng.random_range(0..=len - pattern_len - FRAME_LEN / 2);
    let pitch: f64 = rng.random_range(0.97..=1.03);
    let amp: f64 = rng.random_range(0.2..=0.5);

    let mut clean = vec![0.0; len];
    let mut units = vec![UNIT_BLANK; n_frames];
    for (i, &seg) in segments.iter().enumerate() {
        let start = onset + i * SEGMENT_SAMPLES;
        let end = start + SEGMENT_SAMPLES;
        render_segment(seg, pitch, amp, &mut clean[start..end]);
        let (f0, f1) = (
            first_frame_centered_at_or_after(start),
            first_frame_centered_at_or_after(end).min(n_frames),
        );
        units[f0..f1].fill(unit_for(seg, spec.encoder_classes));
    }

    let raw_noise = synthetic_noise(len, key.derive("noise"))?;
    let (mut clean, mut noise, snr_db) = if segments.is_empty() {
        let rms: f64 = rng.random_range(0.01..=0.1);
        let p = raw_noise.samples().iter().map(|v| v * v).sum::<f64>() / len as f64;
        let g = rms / p.sqrt();
        let noise: Vec<f64> = raw_noise.samples().iter().map(|v| v * g).collect();
        (clean, noise, None)
    } else {
        let (lo, hi) = snr_db_range;
        let snr = if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        };
        let (_, scaled) = mix_at_snr(&clean, raw_noise.samples(), snr)?;
        (clean, scaled, Some(snr))
    };

    let mut mixed: Vec<f64> = clean.iter().zip(&noise).map(|(c, n)| c + n).collect();
    let peak_before = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    peak_normalize(&mut mixed);
    // keep a little headroom below full scale for 16-bit quantization
    let scale = if peak_before > 0.95 {
        0.95 / peak_before
    } else {
        1.0
    };
    if scale != 1.0 {
        clean.iter_mut().for_each(|v| *v *= scale);
        noise.iter_mut().for_each(|v| *v *= scale);
    }

    let keyword_samples = (kind == UtteranceKind::Keyword).then_some((onset, onset + pattern_len));
    Ok(SynthesizedUtterance {
        kind,
        clean,
        noise,
        snr_db,
        keyword_samples,
        encoder_units: units,
    })
}

/// The three splits of a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train_labeled: DatasetManifest,
    pub train_unlabeled: DatasetManifest,
    pub test: DatasetManifest,
}

impl SyntheticCorpus {
    pub fn split(&self, split: Split) -> &DatasetManifest {
        match split {
            Split::TrainLabeled => &self.train_labeled,
            Split::TrainUnlabeled => &self.train_unlabeled,
            Split::Test => &self.test,
        }
    }
}

/// Planned utterance: id, kind, SNR range, and whether the label is kept.
struct Plan {
    id: String,
    kind: UtteranceKind,
    snr: (f64, f64),
    labeled: bool,
}

fn plan(spec: &CorpusSpec) -> (Vec<Plan>, Vec<Plan>, Vec<Plan>) {
    let root = RngKey::from_seed(spec.seed).derive("corpus");
    let mut kind_rng = root.derive("kinds").rng();
    let pick_negative =
        |rng: &mut rand_chacha::ChaCha8Rng| UtteranceKind::NEGATIVES[rng.random_range(0..5)];
    let range = spec.noise_snr_db_range;
    let low_half = (range.0, 0.5 * (range.0 + range.1));
    let test_range = spec.test_snr_db_range.unwrap_or(range);

    let mut labeled = Vec::new();
    for i in 0..spec.n_labeled_pos {
        labeled.push(Plan {
            id: format!("lab-pos-{i:05}"),
            kind: UtteranceKind::Keyword,
            snr: range,
            labeled: true,
        });
    }
    for i in 0..spec.n_labeled_neg {
        labeled.push(Plan {
            id: format!("lab-neg-{i:05}"),
            kind: pick_negative(&mut kind_rng),
            snr: range,
            labeled: true,
        });
    }
    let unlabeled = (0..spec.n_unlabeled)
        .map(|i| {
            let positive = kind_rng.random_bool(spec.unlabeled_positive_fraction);
            Plan {
                id: format!("unl-{i:05}"),
                kind: if positive {
                    UtteranceKind::Keyword
                } else {
                    pick_negative(&mut kind_rng)
                },
                snr: low_half,
                labeled: false,
            }
        })
        .collect();
    let n_test_pos = (spec.n_test as f64 * spec.test_positive_fraction).round() as usize;
    let test = (0..spec.n_test)
        .map(|i| Plan {
            id: format!("test-{i:05}"),
            kind: if i < n_test_pos {
                UtteranceKind::Keyword
            } else {
                pick_negative(&mut kind_rng)
            },
            snr: test_range,
            labeled: true,
        })
        .collect();
    (labeled, unlabeled, test)
}

fn realize(p: &Plan, spec: &CorpusSpec) -> Result<(UtteranceRecord, AudioClip)> {
    let key = RngKey::from_seed(spec.seed)
        .derive("utterance")
        .derive(&p.id);
    let u = synthesize_utterance(p.kind, p.snr, spec, key)?;
    let clip = AudioClip::new(u.mixed())?;
    let record = if p.labeled {
        let positive = p.kind == UtteranceKind::Keyword;
        UtteranceRecord {
            id: p.id.clone(),
            path: format!("wav/{}.wav", p.id).into(),
            label: if positive {
                Label::Positive
            } else {
                Label::Negative
            },
            keyword_span: if positive { u.keyword_span() } else { None },
            encoder_units: Some(u.encoder_units.clone()),
        }
    } else {
        UtteranceRecord {
            id: p.id.clone(),
            path: format!("wav/{}.wav", p.id).into(),
            label: Label::Unlabeled,
            keyword_span: None,
            encoder_units: None,
        }
    };
    Ok((record, clip))
}

/// Synthesizes every split in memory.
pub fn synthesize_corpus(
    spec: &CorpusSpec,
) -> Result<Vec<(Split, Vec<(UtteranceRecord, AudioClip)>)>> {
    spec.validate()?;
    let (labeled, unlabeled, test) = plan(spec);
    [
        (Split::TrainLabeled, labeled),
        (Split::TrainUnlabeled, unlabeled),
        (Split::Test, test),
    ]
    .into_iter()
    .map(|(split, plans)| {
        let items = plans
            .iter()
            .map(|p| realize(p, spec))
            .collect::<Result<Vec<_>>>()?;
        Ok((split, items))
    })
    .collect()
}

/// Writes WAVs under `out_dir/wav/` and one JSON-lines manifest per split.
pub fn generate_synthetic_corpus(out_dir: &Path, spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    std::fs::create_dir_all(out_dir.join("wav")).map_err(|e| KwsError::io(out_dir, e))?;
    let mut manifests = Vec::new();
    for (split, items) in synthesize_corpus(spec)? {
        let mut records = Vec::with_capacity(items.len());
        for (record, clip) in items {
            write_wav(&out_dir.join(&record.path), &clip)?;
            records.push(record);
        }
        let mut manifest = DatasetManifest::new(split, records);
        save_manifest(&manifest, &out_dir.join(split.file_name()))?;
        manifest.base_dir = Some(out_dir.to_path_buf());
        manifests.push(manifest);
    }
    let mut it = manifests.into_iter();
    Ok(SyntheticCorpus {
        train_labeled: it.next().unwrap(),
        train_unlabeled: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}
