//! Detection, FA/h and FR measurement, ROC sweeps.
//!
//! The detector smooths the keyword posterior with a trailing moving average
//! over `window` frames (defined once a full window is available) and fires
//! when the smoothed value exceeds the threshold. After an event it stays
//! silent for `refractory` frames, then re-arms.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{DatasetManifest, Label};
use crate::error::{KwsError, Result};
use crate::frontend::{extract_features, Spectrogram};
use crate::model::KwsModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub window: usize,
    pub refractory: usize,
    /// Frames of tolerance on each side of a keyword span.
    pub slack: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window: 10,
            refractory: 100,
            slack: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub utterance_id: String,
    pub frame_index: usize,
    pub confidence: f64,
}

/// Moving-average posteriors; `values[i]` belongs to frame `offset + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub offset: usize,
    pub values: Vec<f64>,
}

pub fn smooth_posteriors(probs: &[f64], window: usize) -> Smoothed {
    let w = window.max(1);
    let offset = w - 1;
    let values = if probs.len() < w {
        Vec::new()
    } else {
        probs
            .windows(w)
            .map(|win| win.iter().sum::<f64>() / w as f64)
            .collect()
    };
    Smoothed { offset, values }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(KwsError::Eval(format!(
            "threshold {threshold} outside [0, 1]"
        )))
    }
}

/// Event frames and confidences for a smoothed posterior track. Not
/// range-checked, so it can be driven with `-inf` by the sweep.
fn run_detector(s: &Smoothed, threshold: f64, refractory: usize) -> Vec<(usize, f64)> {
    let refractory = refractory.max(1);
    let mut events = Vec::new();
    let mut i = 0;
    while i < s.values.len() {
        if s.values[i] > threshold {
            let end = (i + refractory).min(s.values.len());
            let conf = s.values[i..end]
                .iter()
                .fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            events.push((s.offset + i, conf));
            i += refractory;
        } else {
            i += 1;
        }
    }
    events
}

pub fn detect_posteriors(
    utterance_id: &str,
    keyword_probs: &[f64],
    threshold: f64,
    cfg: &DetectorConfig,
) -> Result<Vec<DetectionEvent>> {
    check_threshold(threshold)?;
    let smoothed = smooth_posteriors(keyword_probs, cfg.window);
    Ok(run_detector(&smoothed, threshold, cfg.refractory)
        .into_iter()
        .map(|(frame_index, confidence)| DetectionEvent {
            utterance_id: utterance_id.to_string(),
            frame_index,
            confidence,
        })
        .collect())
}

pub fn detect(
    utterance_id: &str,
    spec: &Spectrogram,
    model: &KwsModel,
    threshold: f64,
    cfg: &DetectorConfig,
) -> Result<Vec<DetectionEvent>> {
    check_threshold(threshold)?;
    let out = model.forward(spec)?;
    detect_posteriors(utterance_id, &out.keyword_posteriors(), threshold, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoredLabel {
    /// Detection counts if an event lands in frames `lo..hi`.
    Positive {
        lo: usize,
        hi: usize,
    },
    Negative,
}

/// A scored test utterance: everything the detector needs, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub label: ScoredLabel,
    pub duration_secs: f64,
    pub smoothed: Smoothed,
}

impl UtteranceScore {
    pub fn new(
        id: impl Into<String>,
        label: ScoredLabel,
        duration_secs: f64,
        keyword_probs: &[f64],
        cfg: &DetectorConfig,
    ) -> Self {
        UtteranceScore {
            id: id.into(),
            label,
            duration_secs,
            smoothed: smooth_posteriors(keyword_probs, cfg.window),
        }
    }

    fn outcome(&self, threshold: f64, cfg: &DetectorConfig) -> Outcome {
        let events = run_detector(&self.smoothed, threshold, cfg.refractory);
        match self.label {
            ScoredLabel::Positive { lo, hi } => {
                Outcome::Detected(events.iter().any(|(f, _)| (lo..hi).contains(f)))
            }
            ScoredLabel::Negative => Outcome::FalseAccepts(events.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Detected(bool),
    FalseAccepts(usize),
}

/// Runs the model over every labeled utterance of `split`.
pub fn score_split(
    split: &DatasetManifest,
    model: &KwsModel,
    cfg: &DetectorConfig,
) -> Result<Vec<UtteranceScore>> {
    if split.is_empty() {
        return Err(KwsError::Eval("empty split".into()));
    }
    split
        .records
        .par_iter()
        .map(|r| {
            let label = match (r.label, r.keyword_span) {
                (Label::Positive, Some((s, e))) => ScoredLabel::Positive {
                    lo: s.saturating_sub(cfg.slack),
                    hi: e + cfg.slack,
                },
                (Label::Negative, _) => ScoredLabel::Negative,
                _ => {
                    return Err(KwsError::InvalidRecord {
                        id: r.id.clone(),
                        message: "evaluation needs labeled records".into(),
                    })
                }
            };
            let clip = split.load_audio(r)?;
            let out = model.forward(&extract_features(&clip)?)?;
            Ok(UtteranceScore::new(
                r.id.clone(),
                label,
                clip.duration_secs(),
                &out.keyword_posteriors(),
                cfg,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub threshold: f64,
    pub fa_per_hour: f64,
    pub fr_rate: f64,
    pub false_accepts: usize,
    pub negative_hours: f64,
    pub misses: usize,
    pub positives: usize,
}

struct Totals {
    positives: usize,
    negative_hours: f64,
}

fn totals(scores: &[UtteranceScore]) -> Result<Totals> {
    if scores.is_empty() {
        return Err(KwsError::Eval("empty split".into()));
    }
    let positives = scores
        .iter()
        .filter(|s| matches!(s.label, ScoredLabel::Positive { .. }))
        .count();
    let negative_secs: f64 = scores
        .iter()
        .filter(|s| s.label == ScoredLabel::Negative)
        .map(|s| s.duration_secs)
        .sum();
    Ok(Totals {
        positives,
        negative_hours: negative_secs / 3600.0,
    })
}

fn finish(threshold: f64, t: &Totals, misses: usize, false_accepts: usize) -> Measurement {
    Measurement {
        threshold,
        fa_per_hour: if t.negative_hours > 0.0 {
            false_accepts as f64 / t.negative_hours
        } else {
            0.0
        },
        fr_rate: if t.positives > 0 {
            misses as f64 / t.positives as f64
        } else {
            0.0
        },
        false_accepts,
        negative_hours: t.negative_hours,
        misses,
        positives: t.positives,
    }
}

/// Re-runs the detector on every utterance at one threshold.
pub fn measure_scores(
    scores: &[UtteranceScore],
    threshold: f64,
    cfg: &DetectorConfig,
) -> Result<Measurement> {
    check_threshold(threshold)?;
    let t = totals(scores)?;
    let (mut misses, mut fas) = (0, 0);
    for s in scores {
        match s.outcome(threshold, cfg) {
            Outcome::Detected(false) => misses += 1,
            Outcome::Detected(true) => {}
            Outcome::FalseAccepts(n) => fas += n,
        }
    }
    Ok(finish(threshold, &t, misses, fas))
}

pub fn measure(
    split: &DatasetManifest,
    model: &KwsModel,
    threshold: f64,
    cfg: &DetectorConfig,
) -> Result<Measurement> {
    check_threshold(threshold)?;
    measure_scores(&score_split(split, model, cfg)?, threshold, cfg)
}

/// Detector outcome of one utterance as a step function of the threshold.
/// `outcomes[j]` holds for thresholds in `[breaks[j-1], breaks[j])`, with
/// `breaks[-1] = -inf` and `breaks[m] = +inf`.
struct Profile {
    breaks: Vec<f64>,
    outcomes: Vec<Outcome>,
}

impl Profile {
    fn build(s: &UtteranceScore, cfg: &DetectorConfig) -> Self {
        let mut breaks = s.smoothed.values.clone();
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let mut outcomes = Vec::with_capacity(breaks.len() + 1);
        outcomes.push(s.outcome(f64::NEG_INFINITY, cfg));
        for &b in &breaks {
            outcomes.push(s.outcome(b, cfg));
        }
        Profile { breaks, outcomes }
    }

    fn at(&self, threshold: f64) -> Outcome {
        self.outcomes[self.breaks.partition_point(|&b| b <= threshold)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fa_per_hour: f64,
    pub fr_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn new(points: Vec<RocPoint>) -> Result<Self> {
        let curve = RocCurve { points };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(KwsError::Eval("empty ROC curve".into()));
        }
        for w in self.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b.threshold <= a.threshold {
                return Err(KwsError::Eval(
                    "ROC thresholds not strictly increasing".into(),
                ));
            }
            if b.fa_per_hour > a.fa_per_hour {
                return Err(KwsError::Eval(format!(
                    "FA/h increases between thresholds {} and {}",
                    a.threshold, b.threshold
                )));
            }
            if b.fr_rate < a.fr_rate {
                return Err(KwsError::Eval(format!(
                    "FR decreases between thresholds {} and {}",
                    a.threshold, b.threshold
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fa_per_hour,fr_rate\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.fa_per_hour, p.fr_rate);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| KwsError::io(path, e))
    }
}

/// `n` evenly spaced thresholds from 0 to 1 inclusive.
pub fn sweep_thresholds(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(KwsError::Eval(
            "a sweep needs at least two thresholds".into(),
        ));
    }
    Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
}

/// ROC over `n_thresholds` thresholds. Each utterance's detector outcome is
/// computed once per distinct smoothed value and then looked up per
/// threshold, which gives exactly the per-threshold re-detection result.
pub fn sweep_scores(
    scores: &[UtteranceScore],
    n_thresholds: usize,
    cfg: &DetectorConfig,
) -> Result<RocCurve> {
    let thresholds = sweep_thresholds(n_thresholds)?;
    let t = totals(scores)?;
    let profiles: Vec<Profile> = scores.par_iter().map(|s| Profile::build(s, cfg)).collect();
    let points = thresholds
        .iter()
        .map(|&th| {
            let (mut misses, mut fas) = (0, 0);
            for p in &profiles {
                match p.at(th) {
                    Outcome::Detected(false) => misses += 1,
                    Outcome::Detected(true) => {}
                    Outcome::FalseAccepts(n) => fas += n,
                }
            }
            let m = finish(th, &t, misses, fas);
            RocPoint {
                threshold: th,
                fa_per_hour: m.fa_per_hour,
                fr_rate: m.fr_rate,
            }
        })
        .collect();
    RocCurve::new(points)
}

pub fn sweep_roc(
    split: &DatasetManifest,
    model: &KwsModel,
    n_thresholds: usize,
    cfg: &DetectorConfig,
) -> Result<RocCurve> {
    sweep_scores(&score_split(split, model, cfg)?, n_thresholds, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub fr_rate: f64,
    pub threshold: f64,
    /// No threshold on the curve reached the target FA/h.
    pub extrapolated: bool,
}

/// FR at the smallest threshold whose FA/h is within `target`, linearly
/// interpolated in FA/h against the preceding point.
pub fn fr_at_fa(curve: &RocCurve, target_fa_per_hour: f64) -> Result<OperatingPoint> {
    let pts = &curve.points;
    if pts.is_empty() {
        return Err(KwsError::Eval("empty ROC curve".into()));
    }
    let Some(i) = pts.iter().position(|p| p.fa_per_hour <= target_fa_per_hour) else {
        let last = pts[pts.len() - 1];
        return Ok(OperatingPoint {
            fr_rate: last.fr_rate,
            threshold: last.threshold,
            extrapolated: true,
        });
    };
    let hit = pts[i];
    if i == 0 || hit.fa_per_hour == target_fa_per_hour {
        return Ok(OperatingPoint {
            fr_rate: hit.fr_rate,
            threshold: hit.threshold,
            extrapolated: false,
        });
    }
    let prev = pts[i - 1];
    let w = (prev.fa_per_hour - target_fa_per_hour) / (prev.fa_per_hour - hit.fa_per_hour);
    Ok(OperatingPoint {
        fr_rate: prev.fr_rate + w * (hit.fr_rate - prev.fr_rate),
        threshold: prev.threshold + w * (hit.threshold - prev.threshold),
        extrapolated: false,
    })
}

/// Summary of one model on one split at a target FA/h.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub utterances: usize,
    pub positives: usize,
    pub negative_hours: f64,
    pub target_fa_per_hour: f64,
    pub fr_at_target: f64,
    pub threshold: f64,
    pub extrapolated: bool,
    /// False accepts on negatives at the operating threshold.
    pub false_accepts: usize,
    pub misses: usize,
}

pub fn evaluate_scores(
    split_name: &str,
    scores: &[UtteranceScore],
    target_fa_per_hour: f64,
    n_thresholds: usize,
    cfg: &DetectorConfig,
) -> Result<(EvalReport, RocCurve)> {
    let curve = sweep_scores(scores, n_thresholds, cfg)?;
    let op = fr_at_fa(&curve, target_fa_per_hour)?;
    let m = measure_scores(scores, op.threshold.clamp(0.0, 1.0), cfg)?;
    Ok((
        EvalReport {
            split: split_name.to_string(),
            utterances: scores.len(),
            positives: m.positives,
            negative_hours: m.negative_hours,
            target_fa_per_hour,
            fr_at_target: op.fr_rate,
            threshold: op.threshold,
            extrapolated: op.extrapolated,
            false_accepts: m.false_accepts,
            misses: m.misses,
        },
        curve,
    ))
}

/// ROC plot (FA/h on a log x axis, FR on y) for one or more curves.
pub fn roc_svg(curves: &[(&str, &RocCurve)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 60.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
    ];
    let fa_floor: f64 = 1e-2;
    let fa_max = curves
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.fa_per_hour))
        .fold(1.0f64, f64::max);
    let (lx0, lx1) = (fa_floor.log10(), fa_max.log10().max(fa_floor.log10() + 1.0));
    let x = |fa: f64| M + (fa.max(fa_floor).log10() - lx0) / (lx1 - lx0) * (W - 2.0 * M);
    let y = |fr: f64| H - M - fr * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#,
        H - M,
        W - M,
        H - M,
        H - M
    );
    let mut decade = lx0.floor() as i32;
    while (decade as f64) <= lx1 {
        let px = x(10f64.powi(decade));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.1}" y1="{}" x2="{px:.1}" y2="{}" stroke="black"/><text x="{px:.1}" y="{}" text-anchor="middle">1e{decade}</text>"#,
            H - M,
            H - M + 5.0,
            H - M + 20.0
        );
        decade += 1;
    }
    for k in 0..=5 {
        let fr = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.0}%</text>"#,
            M - 6.0,
            y(fr) + 4.0,
            fr * 100.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">false accepts per hour (log)</text><text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">false reject rate</text>"#,
        W / 2.0,
        H - 15.0,
        H / 2.0,
        H / 2.0
    );
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", x(p.fa_per_hour), y(p.fr_rate)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            W - M - 120.0,
            M + 16.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
