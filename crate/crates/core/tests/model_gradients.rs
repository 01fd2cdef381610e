//! Whole-model gradients through each loss, checked against central
//! differences on small random architectures.

use kwst_core::frontend::{running_mean_normalize, Spectrogram, N_MELS};
use kwst_core::losses::{
    maxpool_supervised_loss, maxpool_supervised_loss_grad, student_teacher_loss,
    student_teacher_loss_grad, DecoderLabel, HardLabelSequence,
};
use kwst_core::model::{ArchConfig, KwsModel, ModelOutput, ModelParams};
use kwst_core::nn::{softmax_rows, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn tiny_arch(rng: &mut ChaCha8Rng) -> ArchConfig {
    ArchConfig {
        input_dim: rng.random_range(2..5),
        encoder_svdf: (0..4).map(|_| rng.random_range(2..4)).collect(),
        encoder_hidden: rng.random_range(2..5),
        encoder_classes: rng.random_range(3..5),
        decoder_svdf: (0..3).map(|_| rng.random_range(2..4)).collect(),
        memory: rng.random_range(1..4),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn random_model(rng: &mut ChaCha8Rng, arch: &ArchConfig) -> KwsModel {
    let n = arch.param_count();
    let flat: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
    KwsModel::new(arch.clone(), ModelParams::from_flat(arch, &flat).unwrap()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
}

fn check<L>(model: &KwsModel, x: &Matrix, analytic: &[f64], loss: L) -> f64
where
    L: Fn(&ModelOutput) -> f64,
{
    let base = model.params.to_flat();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += H;
        let mut m = model.clone();
        m.params.set_flat(&p).unwrap();
        let lp = loss(m.forward_cached(x).unwrap().output());
        p[i] -= 2.0 * H;
        m.params.set_flat(&p).unwrap();
        let lm = loss(m.forward_cached(x).unwrap().output());
        worst = worst.max(rel_err(analytic[i], (lp - lm) / (2.0 * H)));
    }
    worst
}

#[test]
fn maxpool_loss_gradients_match_finite_differences() {
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = tiny_arch(&mut rng);
        let model = random_model(&mut rng, &arch);
        let t = 6;
        let x = random_matrix(&mut rng, t, arch.input_dim);
        let alpha = rng.random_range(0.2..2.0);
        let units: Vec<usize> = (0..t)
            .map(|_| rng.random_range(0..arch.encoder_classes))
            .collect();
        for decoder_label in [
            DecoderLabel::Positive { start: 1, end: 5 },
            DecoderLabel::Negative,
        ] {
            let label = HardLabelSequence {
                decoder_label,
                encoder_units: units.clone(),
            };
            let cache = model.forward_cached(&x).unwrap();
            let (_, g) = maxpool_supervised_loss_grad(cache.output(), &label, alpha).unwrap();
            let analytic = model.backward(&cache, &g.d_encoder, &g.d_decoder).unwrap();
            let worst = check(&model, &x, &analytic, |o| {
                maxpool_supervised_loss(o, &label, alpha).unwrap().total
            });
            assert!(worst < 1e-5, "seed {seed}: relative error {worst}");
        }
    }
}

#[test]
fn distillation_loss_gradients_match_finite_differences() {
    for seed in 10..16 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = tiny_arch(&mut rng);
        let model = random_model(&mut rng, &arch);
        let t = 6;
        let x = random_matrix(&mut rng, t, arch.input_dim);
        let teacher = ModelOutput {
            encoder_probs: softmax_rows(&random_matrix(&mut rng, t, arch.encoder_classes)).unwrap(),
            decoder_probs: softmax_rows(&random_matrix(&mut rng, t, 2)).unwrap(),
        };
        let alpha = rng.random_range(0.2..2.0);
        let cache = model.forward_cached(&x).unwrap();
        let (_, g) = student_teacher_loss_grad(&teacher, cache.output(), alpha).unwrap();
        let analytic = model.backward(&cache, &g.d_encoder, &g.d_decoder).unwrap();
        let worst = check(&model, &x, &analytic, |o| {
            student_teacher_loss(&teacher, o, alpha).unwrap().total
        });
        assert!(worst < 1e-5, "seed {seed}: relative error {worst}");
    }
}

#[test]
fn streaming_matches_batch_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let model = KwsModel::init(ArchConfig::default(), 4).unwrap();
    for _ in 0..3 {
        let t = rng.random_range(1..60);
        let raw: Vec<f64> = (0..t * N_MELS)
            .map(|_| rng.random_range(-12.0..3.0))
            .collect();
        let mut normalized = Spectrogram::from_rows(t, raw.clone()).unwrap();
        running_mean_normalize(&mut normalized);
        let batch = model.forward(&normalized).unwrap();
        let mut state = model.stream_state();
        for (i, frame) in raw.chunks(N_MELS).enumerate() {
            let (enc, dec) = model.stream_step(frame, &mut state).unwrap();
            for (a, b) in enc.iter().zip(batch.encoder_probs.row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in dec.iter().zip(batch.decoder_probs.row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert_eq!(state.frames_seen(), t as u64);
    }
}
