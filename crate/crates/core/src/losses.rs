//! Training objectives.
//!
//! Every loss comes in two flavours: a value-only function and a `*_grad`
//! variant that also returns the gradient with respect to the student's two
//! output distributions, ready for [`crate::model::KwsModel::backward`].

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::model::{ModelOutput, KEYWORD_CLASS};
use crate::nn::Matrix;

pub const PROB_CLAMP: f64 = 1e-12;
pub const NON_KEYWORD_CLASS: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub loss_d: f64,
    pub loss_e: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    fn combine(loss_d: f64, loss_e: f64, alpha: f64) -> Self {
        LossBreakdown {
            total: alpha * loss_e + loss_d,
            loss_d,
            loss_e,
            alpha,
        }
    }
}

/// Gradients of a loss with respect to the model's output distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub d_encoder: Matrix,
    pub d_decoder: Matrix,
}

/// Teacher targets for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSequence {
    pub decoder_targets: Matrix,
    pub encoder_targets: Matrix,
}

impl SoftLabelSequence {
    pub fn from_output(out: &ModelOutput) -> Self {
        SoftLabelSequence {
            decoder_targets: out.decoder_probs.clone(),
            encoder_targets: out.encoder_probs.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [
            ("decoder_targets", &self.decoder_targets),
            ("encoder_targets", &self.encoder_targets),
        ] {
            check_row_stochastic(m, name)?;
        }
        if self.decoder_targets.rows() != self.encoder_targets.rows() {
            return Err(KwsError::Shape("soft label heads differ in length".into()));
        }
        Ok(())
    }
}

fn check_row_stochastic(m: &Matrix, name: &str) -> Result<()> {
    for r in 0..m.rows() {
        let row = m.row(r);
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(KwsError::Shape(format!(
                "{name} row {r} has entries outside [0, 1]"
            )));
        }
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(KwsError::Shape(format!("{name} row {r} does not sum to 1")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderLabel {
    /// Keyword present in frames `start..end`.
    Positive {
        start: usize,
        end: usize,
    },
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardLabelSequence {
    pub decoder_label: DecoderLabel,
    pub encoder_units: Vec<usize>,
}

/// `(1/T) sum_t sum_m -target[t,m] ln(max(pred[t,m], 1e-12))`
pub fn cross_entropy_seq(target: &Matrix, pred: &Matrix) -> Result<f64> {
    Ok(cross_entropy_seq_grad(target, pred)?.0)
}

/// Cross-entropy and its gradient with respect to `pred`.
pub fn cross_entropy_seq_grad(target: &Matrix, pred: &Matrix) -> Result<(f64, Matrix)> {
    if target.shape() != pred.shape() {
        return Err(KwsError::Shape(format!(
            "cross entropy target {:?} vs prediction {:?}",
            target.shape(),
            pred.shape()
        )));
    }
    let t_len = target.rows();
    if t_len == 0 {
        return Err(KwsError::Shape("cross entropy over zero frames".into()));
    }
    let inv_t = 1.0 / t_len as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, &y), &p) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(target.as_slice())
        .zip(pred.as_slice())
    {
        if y == 0.0 {
            continue;
        }
        if p > PROB_CLAMP {
            loss -= y * p.ln();
            *g = -y / p * inv_t;
        } else {
            loss -= y * PROB_CLAMP.ln();
        }
    }
    Ok((loss * inv_t, grad))
}

/// Mean per-frame entropy of a row-stochastic matrix.
pub fn mean_entropy(dist: &Matrix) -> f64 {
    let total: f64 = dist
        .as_slice()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    total / dist.rows() as f64
}

/// Distillation loss `alpha * CE(teacher_enc, student_enc) + CE(teacher_dec, student_dec)`.
pub fn student_teacher_loss(
    teacher: &ModelOutput,
    student: &ModelOutput,
    alpha: f64,
) -> Result<LossBreakdown> {
    Ok(student_teacher_loss_grad(teacher, student, alpha)?.0)
}

/// As [`student_teacher_loss`], plus gradients with respect to the student's
/// outputs. The teacher is a constant.
pub fn student_teacher_loss_grad(
    teacher: &ModelOutput,
    student: &ModelOutput,
    alpha: f64,
) -> Result<(LossBreakdown, OutputGrads)> {
    if teacher.encoder_probs.shape() != student.encoder_probs.shape()
        || teacher.decoder_probs.shape() != student.decoder_probs.shape()
    {
        return Err(KwsError::Shape(format!(
            "teacher outputs {:?}/{:?} vs student {:?}/{:?}",
            teacher.encoder_probs.shape(),
            teacher.decoder_probs.shape(),
            student.encoder_probs.shape(),
            student.decoder_probs.shape()
        )));
    }
    let (loss_d, d_decoder) =
        cross_entropy_seq_grad(&teacher.decoder_probs, &student.decoder_probs)?;
    let (loss_e, mut d_encoder) =
        cross_entropy_seq_grad(&teacher.encoder_probs, &student.encoder_probs)?;
    for g in d_encoder.as_mut_slice() {
        *g *= alpha;
    }
    Ok((
        LossBreakdown::combine(loss_d, loss_e, alpha),
        OutputGrads {
            d_encoder,
            d_decoder,
        },
    ))
}

pub fn maxpool_supervised_loss(
    out: &ModelOutput,
    label: &HardLabelSequence,
    alpha: f64,
) -> Result<LossBreakdown> {
    Ok(maxpool_supervised_loss_grad(out, label, alpha)?.0)
}

/// Max-pool supervised loss. Positives: `-ln` of the largest keyword
/// posterior inside the keyword span (ties go to the earliest frame).
/// Negatives: mean over frames of `-ln` of the non-keyword posterior.
/// Encoder: mean per-frame CE against one-hot units.
pub fn maxpool_supervised_loss_grad(
    out: &ModelOutput,
    label: &HardLabelSequence,
    alpha: f64,
) -> Result<(LossBreakdown, OutputGrads)> {
    let t_len = out.n_frames();
    let n_classes = out.encoder_probs.cols();
    if label.encoder_units.len() != t_len {
        return Err(KwsError::Shape(format!(
            "{} encoder units for {t_len} frames",
            label.encoder_units.len()
        )));
    }
    if let Some(u) = label.encoder_units.iter().find(|&&u| u >= n_classes) {
        return Err(KwsError::Shape(format!(
            "encoder unit {u} >= {n_classes} classes"
        )));
    }

    let dec = &out.decoder_probs;
    let mut d_decoder = Matrix::zeros(dec.rows(), dec.cols());
    let loss_d = match label.decoder_label {
        DecoderLabel::Positive { start, end } => {
            if start >= end || end > t_len {
                return Err(KwsError::Shape(format!(
                    "keyword span {start}..{end} invalid for {t_len} frames"
                )));
            }
            let mut best = start;
            for t in start + 1..end {
                if dec.get(t, KEYWORD_CLASS) > dec.get(best, KEYWORD_CLASS) {
                    best = t;
                }
            }
            let p = dec.get(best, KEYWORD_CLASS);
            if p > PROB_CLAMP {
                d_decoder.set(best, KEYWORD_CLASS, -1.0 / p);
                -p.ln()
            } else {
                -PROB_CLAMP.ln()
            }
        }
        DecoderLabel::Negative => {
            let inv_t = 1.0 / t_len as f64;
            let mut loss = 0.0;
            for t in 0..t_len {
                let p = dec.get(t, NON_KEYWORD_CLASS);
                if p > PROB_CLAMP {
                    loss -= p.ln();
                    d_decoder.set(t, NON_KEYWORD_CLASS, -inv_t / p);
                } else {
                    loss -= PROB_CLAMP.ln();
                }
            }
            loss * inv_t
        }
    };

    let mut one_hot = Matrix::zeros(t_len, n_classes);
    for (t, &u) in label.encoder_units.iter().enumerate() {
        one_hot.set(t, u, 1.0);
    }
    let (loss_e, mut d_encoder) = cross_entropy_seq_grad(&one_hot, &out.encoder_probs)?;
    for g in d_encoder.as_mut_slice() {
        *g *= alpha;
    }
    Ok((
        LossBreakdown::combine(loss_d, loss_e, alpha),
        OutputGrads {
            d_encoder,
            d_decoder,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn rows(data: &[&[f64]]) -> Matrix {
        let cols = data[0].len();
        Matrix::from_vec(
            data.len(),
            cols,
            data.iter().flat_map(|r| r.to_vec()).collect(),
        )
        .unwrap()
    }

    fn uniform(t: usize, m: usize) -> Matrix {
        Matrix::from_fn(t, m, |_, _| 1.0 / m as f64)
    }

    fn output(enc: Matrix, dec: Matrix) -> ModelOutput {
        ModelOutput {
            encoder_probs: enc,
            decoder_probs: dec,
        }
    }

    #[test]
    fn ce_of_distribution_with_itself_is_entropy() {
        let half = rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!((cross_entropy_seq(&half, &half).unwrap() - LN_2).abs() < 1e-12);
        let onehot = rows(&[&[1.0, 0.0]]);
        assert_eq!(cross_entropy_seq(&onehot, &onehot).unwrap(), 0.0);
        let target = rows(&[&[0.1, 0.2, 0.7], &[0.3, 0.3, 0.4]]);
        let ce = cross_entropy_seq(&target, &uniform(2, 3)).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_shape_mismatch() {
        assert!(cross_entropy_seq(&uniform(2, 3), &uniform(2, 2)).is_err());
    }

    #[test]
    fn ce_is_at_least_target_entropy() {
        let target = rows(&[&[0.1, 0.9], &[0.6, 0.4]]);
        let h = mean_entropy(&target);
        for q in [0.05, 0.3, 0.5, 0.8, 0.99] {
            let pred = rows(&[&[q, 1.0 - q], &[1.0 - q, q]]);
            assert!(cross_entropy_seq(&target, &pred).unwrap() >= h - 1e-12);
        }
        assert!((cross_entropy_seq(&target, &target).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn student_teacher_alpha_behaviour() {
        let t_out = output(
            rows(&[&[0.2, 0.3, 0.5], &[0.6, 0.2, 0.2]]),
            rows(&[&[0.9, 0.1], &[0.3, 0.7]]),
        );
        let s_out = output(
            rows(&[&[0.3, 0.3, 0.4], &[0.5, 0.25, 0.25]]),
            rows(&[&[0.8, 0.2], &[0.4, 0.6]]),
        );
        let a0 = student_teacher_loss(&t_out, &s_out, 0.0).unwrap();
        assert_eq!(a0.total, a0.loss_d);
        let a1 = student_teacher_loss(&t_out, &s_out, 1.0).unwrap();
        let a2 = student_teacher_loss(&t_out, &s_out, 2.0).unwrap();
        assert!(((a2.total - a2.loss_d) - 2.0 * (a1.total - a1.loss_d)).abs() < 1e-12);
        assert!((a2.total - (2.0 * a2.loss_e + a2.loss_d)).abs() < 1e-12);

        let uni = output(uniform(4, 4), uniform(4, 2));
        for alpha in [0.0, 0.5, 1.0, 3.0] {
            let l = student_teacher_loss(&uni, &uni, alpha).unwrap();
            assert!((l.total - (LN_2 + alpha * 4f64.ln())).abs() < 1e-12);
        }
        let short = output(uniform(3, 4), uniform(3, 2));
        assert!(student_teacher_loss(&uni, &short, 1.0).is_err());
    }

    #[test]
    fn maxpool_positive_uses_max_in_span() {
        let dec = rows(&[
            &[0.5, 0.5],
            &[0.8, 0.2],
            &[0.1, 0.9],
            &[0.6, 0.4],
            &[0.01, 0.99],
        ]);
        let out = output(uniform(5, 3), dec);
        let label = HardLabelSequence {
            decoder_label: DecoderLabel::Positive { start: 1, end: 4 },
            encoder_units: vec![0; 5],
        };
        let (l, g) = maxpool_supervised_loss_grad(&out, &label, 0.0).unwrap();
        assert!((l.loss_d - (-(0.9f64).ln())).abs() < 1e-12);
        assert!((l.loss_d - 0.10536).abs() < 1e-5);
        for t in 0..5 {
            for c in 0..2 {
                let nonzero = g.d_decoder.get(t, c) != 0.0;
                assert_eq!(nonzero, t == 2 && c == KEYWORD_CLASS);
            }
        }
    }

    #[test]
    fn maxpool_tie_breaks_to_earliest_frame() {
        let dec = rows(&[&[0.3, 0.7], &[0.3, 0.7]]);
        let out = output(uniform(2, 3), dec);
        let label = HardLabelSequence {
            decoder_label: DecoderLabel::Positive { start: 0, end: 2 },
            encoder_units: vec![0; 2],
        };
        let (_, g) = maxpool_supervised_loss_grad(&out, &label, 1.0).unwrap();
        assert!(g.d_decoder.get(0, KEYWORD_CLASS) != 0.0);
        assert_eq!(g.d_decoder.get(1, KEYWORD_CLASS), 0.0);
    }

    #[test]
    fn maxpool_negative_and_encoder_terms() {
        let dec = rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let enc = rows(&[&[0.5, 0.25, 0.25], &[0.25, 0.25, 0.5]]);
        let out = output(enc, dec);
        let label = HardLabelSequence {
            decoder_label: DecoderLabel::Negative,
            encoder_units: vec![0, 2],
        };
        let l = maxpool_supervised_loss(&out, &label, 2.0).unwrap();
        assert_eq!(l.loss_d, 0.0);
        assert!((l.loss_e - LN_2).abs() < 1e-12);
        assert!((l.total - 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn maxpool_positive_ignores_frames_outside_span() {
        let label = HardLabelSequence {
            decoder_label: DecoderLabel::Positive { start: 1, end: 3 },
            encoder_units: vec![1; 4],
        };
        let enc = uniform(4, 3);
        let a = output(
            enc.clone(),
            rows(&[&[0.5, 0.5], &[0.4, 0.6], &[0.7, 0.3], &[0.2, 0.8]]),
        );
        let b = output(
            enc,
            rows(&[&[0.99, 0.01], &[0.4, 0.6], &[0.7, 0.3], &[0.0, 1.0]]),
        );
        assert_eq!(
            maxpool_supervised_loss(&a, &label, 1.0).unwrap(),
            maxpool_supervised_loss(&b, &label, 1.0).unwrap()
        );
    }

    #[test]
    fn maxpool_rejects_bad_labels() {
        let out = output(uniform(3, 3), uniform(3, 2));
        let bad_span = HardLabelSequence {
            decoder_label: DecoderLabel::Positive { start: 2, end: 5 },
            encoder_units: vec![0; 3],
        };
        assert!(maxpool_supervised_loss(&out, &bad_span, 1.0).is_err());
        let bad_units = HardLabelSequence {
            decoder_label: DecoderLabel::Negative,
            encoder_units: vec![0, 3, 0],
        };
        assert!(maxpool_supervised_loss(&out, &bad_units, 1.0).is_err());
    }

    #[test]
    fn soft_label_validation() {
        let ok = SoftLabelSequence {
            decoder_targets: uniform(2, 2),
            encoder_targets: uniform(2, 4),
        };
        assert!(ok.validate().is_ok());
        let bad = SoftLabelSequence {
            decoder_targets: rows(&[&[0.6, 0.6]]),
            encoder_targets: uniform(1, 4),
        };
        assert!(bad.validate().is_err());
    }
}
