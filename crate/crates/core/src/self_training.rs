//! Teacher training, student training on teacher soft labels, and the
//! generation loop that promotes each student to the next teacher.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::{
    classic_augment, make_pair, spec_augment, synthetic_noise, AugmentationPolicy, Routing,
};
use crate::data_io::{save_checkpoint, DatasetManifest, ModelCheckpoint, UtteranceRecord};
use crate::error::{KwsError, Result};
use crate::eval::{evaluate_scores, score_split, DetectorConfig, EvalReport};
use crate::frontend::{extract_features, Spectrogram};
use crate::losses::{maxpool_supervised_loss_grad, student_teacher_loss_grad, LossBreakdown};
use crate::model::{ArchConfig, KwsModel, ModelParams};
use crate::rng::RngKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    BaselineMp,
    MpSaug,
    St,
    StSaug,
    StSaugNs,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 5] = [
        TrainingMode::BaselineMp,
        TrainingMode::MpSaug,
        TrainingMode::St,
        TrainingMode::StSaug,
        TrainingMode::StSaugNs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::BaselineMp => "baseline_mp",
            TrainingMode::MpSaug => "mp_saug",
            TrainingMode::St => "st",
            TrainingMode::StSaug => "st_saug",
            TrainingMode::StSaugNs => "st_saug_ns",
        }
    }

    pub fn is_self_training(self) -> bool {
        matches!(
            self,
            TrainingMode::St | TrainingMode::StSaug | TrainingMode::StSaugNs
        )
    }
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = KwsError;

    fn from_str(s: &str) -> Result<Self> {
        TrainingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| KwsError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    /// Student generations after the teacher; ignored by the supervised modes.
    pub generations: u32,
    pub alpha: f64,
    pub lr: f64,
    /// Student epochs per generation.
    pub epochs: usize,
    pub teacher_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
    pub arch: ArchConfig,
}

impl TrainingConfig {
    /// Defaults for `mode` with the augmentation flags that define it.
    pub fn for_mode(mode: TrainingMode) -> Self {
        let mut augmentation = AugmentationPolicy::default();
        match mode {
            TrainingMode::BaselineMp => {
                augmentation.spec_enabled = false;
                augmentation.routing = Routing::None;
            }
            TrainingMode::MpSaug | TrainingMode::StSaug => {}
            TrainingMode::St => augmentation.spec_enabled = false,
            TrainingMode::StSaugNs => augmentation.routing = Routing::StudentOnly,
        }
        TrainingConfig {
            mode,
            generations: 1,
            alpha: 1.0,
            lr: 0.05,
            epochs: 10,
            teacher_epochs: 30,
            batch_size: 16,
            seed: 0,
            augmentation,
            arch: ArchConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.augmentation.validate()?;
        if self.generations == 0 {
            return Err(KwsError::Config("generations must be at least 1".into()));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(KwsError::Config(format!(
                "alpha {} must be finite and >= 0",
                self.alpha
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(KwsError::Config(format!(
                "lr {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(KwsError::Config("batch_size must be at least 1".into()));
        }
        let aug = &self.augmentation;
        let ok = match self.mode {
            TrainingMode::BaselineMp => !aug.spec_enabled,
            TrainingMode::MpSaug => aug.spec_enabled,
            TrainingMode::St => !aug.spec_enabled,
            TrainingMode::StSaug => aug.spec_enabled && aug.routing == Routing::Shared,
            TrainingMode::StSaugNs => aug.spec_enabled && aug.routing == Routing::StudentOnly,
        };
        if !ok {
            return Err(KwsError::Config(format!(
                "augmentation (spec_enabled={}, routing={:?}) is inconsistent with mode {}",
                aug.spec_enabled, aug.routing, self.mode
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the config's JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    /// Policy used when training the generation-0 teacher: the first stage
    /// is always supervised with classic augmentation, plus spectrogram
    /// masking only in mp_saug.
    fn teacher_policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            spec_enabled: self.mode == TrainingMode::MpSaug,
            routing: Routing::Shared,
            ..self.augmentation.clone()
        }
    }
}

/// Hashes of the spectrograms that went into one batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchDigest {
    pub epoch: u64,
    pub batch: usize,
    pub teacher_input: String,
    pub student_input: String,
    /// Features after classic augmentation, before spectrogram masking.
    pub unmasked: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss over the pool before any update, under the epoch-0 draws.
    pub initial_loss: f64,
    /// Mean batch loss for each epoch.
    pub epoch_losses: Vec<f64>,
    pub batch_digests: Vec<BatchDigest>,
}

impl TrainLog {
    /// Last epoch's mean loss, or the initial loss if no epoch ran.
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses
            .last()
            .copied()
            .unwrap_or(self.initial_loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum StudentInit {
    /// Fresh Glorot initialization keyed by seed and generation.
    #[default]
    Fresh,
    FromParams(ModelParams),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StudentOptions {
    pub init: StudentInit,
    pub record_digests: bool,
}

#[derive(Clone, Copy)]
struct PoolItem<'a> {
    manifest: &'a DatasetManifest,
    record: &'a UtteranceRecord,
}

struct Hashes {
    teacher: [u8; 32],
    student: [u8; 32],
    unmasked: [u8; 32],
}

struct UttStep {
    loss: LossBreakdown,
    grads: Option<Vec<f64>>,
    hashes: Option<Hashes>,
}

fn spec_hash(s: &Spectrogram) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in s.as_slice() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

/// Loads the clip, mixes in freshly drawn noise when classic augmentation is
/// on, and extracts normalized log-mel features.
fn classic_features(
    item: PoolItem<'_>,
    policy: &AugmentationPolicy,
    key: RngKey,
) -> Result<Spectrogram> {
    let clip = item.manifest.load_audio(item.record)?;
    let clip = if policy.classic_enabled {
        let noise = synthetic_noise(clip.len(), key.derive("noise"))?;
        classic_augment(&clip, &noise, policy, key.derive("classic"))?
    } else {
        clip
    };
    extract_features(&clip)
}

struct LoopSpec<'a> {
    items: &'a [PoolItem<'a>],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    shuffle_key: RngKey,
    record_digests: bool,
}

/// Minibatch SGD. Per-utterance work runs in parallel; gradients are summed
/// in batch order so the result does not depend on the worker count.
fn run_epochs<F>(model: &mut KwsModel, spec: LoopSpec<'_>, step: F) -> Result<TrainLog>
where
    F: Fn(&KwsModel, PoolItem<'_>, u64, bool) -> Result<UttStep> + Sync,
{
    let n = spec.items.len();
    let initial: Vec<UttStep> = spec
        .items
        .par_iter()
        .map(|&it| step(model, it, 0, false))
        .collect::<Result<_>>()?;
    let initial_loss = initial.iter().map(|s| s.loss.total).sum::<f64>() / n as f64;
    if !initial_loss.is_finite() {
        return Err(KwsError::NonFinite("initial training loss".into()));
    }

    let mut log = TrainLog {
        initial_loss,
        epoch_losses: Vec::with_capacity(spec.epochs),
        batch_digests: Vec::new(),
    };
    let n_params = model.params.param_count();
    for epoch in 0..spec.epochs as u64 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut spec.shuffle_key.derive_index("epoch", epoch).rng());
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, batch) in order.chunks(spec.batch_size).enumerate() {
            let steps: Vec<UttStep> = batch
                .par_iter()
                .map(|&i| step(model, spec.items[i], epoch, true))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; n_params];
            let mut batch_loss = 0.0;
            for s in &steps {
                batch_loss += s.loss.total;
                let g = s.grads.as_ref().expect("gradient requested");
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let scale = 1.0 / steps.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(KwsError::NonFinite(format!(
                    "loss at epoch {epoch} batch {b}"
                )));
            }
            if spec.record_digests {
                let mut th = Sha256::new();
                let mut sh = Sha256::new();
                let mut uh = Sha256::new();
                for s in &steps {
                    let h = s.hashes.as_ref().expect("digests requested");
                    th.update(h.teacher);
                    sh.update(h.student);
                    uh.update(h.unmasked);
                }
                log.batch_digests.push(BatchDigest {
                    epoch,
                    batch: b,
                    teacher_input: hex::encode(th.finalize()),
                    student_input: hex::encode(sh.finalize()),
                    unmasked: hex::encode(uh.finalize()),
                });
            }
            model.params.sgd_step(&grad, spec.lr)?;
            loss_sum += batch_loss;
            n_batches += 1;
        }
        log.epoch_losses.push(loss_sum / n_batches as f64);
    }
    Ok(log)
}

/// Supervised max-pool training on labeled data. Produces generation 0.
pub fn train_teacher(labeled: &DatasetManifest, cfg: &TrainingConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(KwsError::Config("labeled set is empty".into()));
    }
    let labels = labeled
        .records
        .iter()
        .map(|r| r.hard_labels())
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<PoolItem> = labeled
        .records
        .iter()
        .map(|record| PoolItem {
            manifest: labeled,
            record,
        })
        .collect();
    let label_of = |id: &str| {
        let i = labeled
            .records
            .iter()
            .position(|r| r.id == id)
            .expect("record in pool");
        &labels[i]
    };

    let policy = cfg.teacher_policy();
    let mut model = KwsModel::init(cfg.arch.clone(), cfg.seed)?;
    let root = RngKey::from_seed(cfg.seed).derive("teacher");
    let spec = LoopSpec {
        items: &items,
        epochs: cfg.teacher_epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        shuffle_key: root.derive("shuffle"),
        record_digests: false,
    };
    let log = run_epochs(&mut model, spec, |m, item, epoch, need_grad| {
        let key = RngKey::for_utterance(cfg.seed, &item.record.id, epoch).derive("teacher");
        let mut x = classic_features(item, &policy, key)?;
        if policy.spec_enabled {
            x = spec_augment(&x, &policy, key.derive("spec"));
        }
        let cache = m.forward_spec_cached(&x)?;
        let (loss, g) =
            maxpool_supervised_loss_grad(cache.output(), label_of(&item.record.id), cfg.alpha)
                .map_err(|e| KwsError::InvalidRecord {
                    id: item.record.id.clone(),
                    message: e.to_string(),
                })?;
        let grads = if need_grad {
            Some(m.backward(&cache, &g.d_encoder, &g.d_decoder)?)
        } else {
            None
        };
        Ok(UttStep {
            loss,
            grads,
            hashes: None,
        })
    })?;
    Ok(StageOutcome {
        checkpoint: ModelCheckpoint::new(&model, 0, cfg.hash()?),
        log,
    })
}

/// Trains a student on the teacher's soft labels over labeled ∪ unlabeled
/// audio. Hard labels are never read.
pub fn train_student(
    teacher: &ModelCheckpoint,
    labeled: &DatasetManifest,
    unlabeled: &DatasetManifest,
    cfg: &TrainingConfig,
    opts: &StudentOptions,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if teacher.arch_config != cfg.arch {
        return Err(KwsError::Config(
            "teacher architecture differs from the configured architecture".into(),
        ));
    }
    let teacher_model = teacher.model()?;
    let generation = teacher.generation + 1;
    let items: Vec<PoolItem> = labeled
        .records
        .iter()
        .map(|record| PoolItem {
            manifest: labeled,
            record,
        })
        .chain(unlabeled.records.iter().map(|record| PoolItem {
            manifest: unlabeled,
            record,
        }))
        .collect();
    if items.is_empty() {
        return Err(KwsError::Config("training pool is empty".into()));
    }

    let root = RngKey::from_seed(cfg.seed).derive_index("student", generation as u64);
    let params = match &opts.init {
        StudentInit::Fresh => ModelParams::init_with_key(&cfg.arch, root)?,
        StudentInit::FromParams(p) => p.clone(),
    };
    let mut model = KwsModel::new(cfg.arch.clone(), params)?;
    let policy = &cfg.augmentation;
    let spec = LoopSpec {
        items: &items,
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        shuffle_key: root.derive("shuffle"),
        record_digests: opts.record_digests,
    };
    let log = run_epochs(&mut model, spec, |m, item, epoch, need_grad| {
        let key = RngKey::for_utterance(cfg.seed, &item.record.id, epoch)
            .derive_index("generation", generation as u64);
        let x = classic_features(item, policy, key)?;
        let pair = make_pair(&x, policy, key.derive("spec"), key.hex());
        let soft = teacher_model.forward(&pair.teacher_input)?;
        let cache = m.forward_spec_cached(&pair.student_input)?;
        let (loss, g) = student_teacher_loss_grad(&soft, cache.output(), cfg.alpha)?;
        let grads = if need_grad {
            Some(m.backward(&cache, &g.d_encoder, &g.d_decoder)?)
        } else {
            None
        };
        let hashes = (opts.record_digests && need_grad).then(|| Hashes {
            teacher: spec_hash(&pair.teacher_input),
            student: spec_hash(&pair.student_input),
            unmasked: spec_hash(&x),
        });
        Ok(UttStep {
            loss,
            grads,
            hashes,
        })
    })?;
    Ok(StageOutcome {
        checkpoint: ModelCheckpoint::new(&model, generation, cfg.hash()?),
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub detector: DetectorConfig,
    pub target_fa_per_hour: f64,
    pub n_thresholds: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            detector: DetectorConfig::default(),
            target_fa_per_hour: 1.0,
            n_thresholds: 1001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: u32,
    pub mode: TrainingMode,
    /// `None` when the generation was loaded rather than trained.
    pub initial_train_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub params_digest: String,
    /// Digest of the teacher this generation was distilled from.
    pub teacher_digest: Option<String>,
    pub eval_summary: Option<EvalReport>,
    pub checkpoint_path: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub run_dir: Option<PathBuf>,
    /// Use this generation-0 teacher instead of training one.
    pub teacher: Option<ModelCheckpoint>,
    pub test: Option<&'a DatasetManifest>,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<GenerationReport>,
    pub checkpoints: Vec<ModelCheckpoint>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| KwsError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| KwsError::io(path, e))
}

fn emit_generation(
    ckpt: &ModelCheckpoint,
    log: Option<&TrainLog>,
    teacher_digest: Option<String>,
    cfg: &TrainingConfig,
    opts: &RunOptions<'_>,
) -> Result<GenerationReport> {
    let k = ckpt.generation;
    let eval_summary = match opts.test {
        Some(test) => {
            let scores = score_split(test, &ckpt.model()?, &opts.eval.detector)?;
            let (report, _) = evaluate_scores(
                "test",
                &scores,
                opts.eval.target_fa_per_hour,
                opts.eval.n_thresholds,
                &opts.eval.detector,
            )?;
            Some(report)
        }
        None => None,
    };
    let mut checkpoint_path = None;
    if let Some(dir) = &opts.run_dir {
        let rel = format!("g{k}/checkpoint.kwst");
        save_checkpoint(ckpt, &dir.join(&rel))?;
        checkpoint_path = Some(rel);
    }
    let report = GenerationReport {
        generation: k,
        mode: cfg.mode,
        initial_train_loss: log.map(|l| l.initial_loss),
        final_train_loss: log.map(TrainLog::final_loss),
        params_digest: ckpt.parameters.digest(),
        teacher_digest,
        eval_summary,
        checkpoint_path,
    };
    if let Some(dir) = &opts.run_dir {
        write_json(&report, &dir.join(format!("g{k}/report.json")))?;
    }
    Ok(report)
}

/// Teacher (trained or given), then `generations` students, each distilled
/// from the previous generation. Supervised modes stop after generation 0.
pub fn run_self_training(
    labeled: &DatasetManifest,
    unlabeled: &DatasetManifest,
    cfg: &TrainingConfig,
    opts: &RunOptions<'_>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if let Some(dir) = &opts.run_dir {
        write_json(cfg, &dir.join("run_config.json"))?;
    }
    let (teacher, log) = match &opts.teacher {
        Some(t) => {
            if t.arch_config != cfg.arch {
                return Err(KwsError::Config(
                    "teacher architecture differs from the configured architecture".into(),
                ));
            }
            (t.clone(), None)
        }
        None => {
            let out = train_teacher(labeled, cfg)?;
            (out.checkpoint, Some(out.log))
        }
    };
    let mut reports = vec![emit_generation(&teacher, log.as_ref(), None, cfg, opts)?];
    let mut checkpoints = vec![teacher];

    if cfg.mode.is_self_training() {
        for _ in 0..cfg.generations {
            let teacher = checkpoints.last().expect("teacher present");
            let out = train_student(teacher, labeled, unlabeled, cfg, &StudentOptions::default())?;
            let digest = teacher.parameters.digest();
            reports.push(emit_generation(
                &out.checkpoint,
                Some(&out.log),
                Some(digest),
                cfg,
                opts,
            )?);
            checkpoints.push(out.checkpoint);
        }
    }
    Ok(RunOutcome {
        reports,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_synthetic_corpus, CorpusSpec, Label, SyntheticCorpus};
    use crate::losses::mean_entropy;

    fn corpus(dir: &Path, n_pos: usize, n_neg: usize, n_unl: usize) -> SyntheticCorpus {
        let spec = CorpusSpec {
            seed: 11,
            n_labeled_pos: n_pos,
            n_labeled_neg: n_neg,
            n_unlabeled: n_unl,
            n_test: 4,
            noise_snr_db_range: (20.0, 30.0),
            ..Default::default()
        };
        generate_synthetic_corpus(dir, &spec).unwrap()
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            encoder_svdf: vec![8; 4],
            encoder_hidden: 8,
            decoder_svdf: vec![8; 3],
            memory: 4,
            ..ArchConfig::default()
        }
    }

    fn cfg(mode: TrainingMode) -> TrainingConfig {
        TrainingConfig {
            epochs: 1,
            teacher_epochs: 1,
            batch_size: 4,
            arch: small_arch(),
            ..TrainingConfig::for_mode(mode)
        }
    }

    #[test]
    fn mode_presets_are_consistent() {
        for m in TrainingMode::ALL {
            TrainingConfig::for_mode(m).validate().unwrap();
            assert_eq!(m.name().parse::<TrainingMode>().unwrap(), m);
        }
        let mut bad = TrainingConfig::for_mode(TrainingMode::StSaugNs);
        bad.augmentation.routing = Routing::Shared;
        assert!(bad.validate().is_err());
        let mut bad = TrainingConfig::for_mode(TrainingMode::St);
        bad.augmentation.spec_enabled = true;
        assert!(bad.validate().is_err());
        let mut bad = TrainingConfig::for_mode(TrainingMode::StSaug);
        bad.generations = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn st_and_st_saug_differ_only_in_spec_flag() {
        let a = TrainingConfig::for_mode(TrainingMode::St);
        let b = TrainingConfig::for_mode(TrainingMode::StSaug);
        let mut a2 = a.clone();
        a2.mode = b.mode;
        a2.augmentation.spec_enabled = true;
        assert_eq!(a2, b);
        assert!(!a.augmentation.spec_enabled);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(dir.path(), 2, 2, 0);
        let mut conf = cfg(TrainingMode::BaselineMp);
        conf.teacher_epochs = 0;
        let out = train_teacher(&c.train_labeled, &conf).unwrap();
        let init = ModelParams::init(&conf.arch, conf.seed).unwrap();
        assert_eq!(out.checkpoint.parameters, init);
        assert_eq!(out.checkpoint.generation, 0);
    }

    #[test]
    fn teacher_rejects_unlabeled_records() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(dir.path(), 2, 2, 2);
        let mut mixed = c.train_labeled.clone();
        mixed.records.push(c.train_unlabeled.records[0].clone());
        assert!(matches!(
            train_teacher(&mixed, &cfg(TrainingMode::BaselineMp)),
            Err(KwsError::InvalidRecord { .. })
        ));
    }

    #[test]
    fn teacher_descends_on_clean_separable_data() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(dir.path(), 10, 10, 0);
        let conf = TrainingConfig {
            teacher_epochs: 30,
            lr: 0.1,
            augmentation: AugmentationPolicy::disabled(),
            ..cfg(TrainingMode::BaselineMp)
        };
        let out = train_teacher(&c.train_labeled, &conf).unwrap();
        assert!(out.log.final_loss() < out.log.initial_loss, "{:?}", out.log);
        let again = train_teacher(&c.train_labeled, &conf).unwrap();
        assert_eq!(
            again.checkpoint.to_bytes().unwrap(),
            out.checkpoint.to_bytes().unwrap()
        );
    }

    #[test]
    fn student_from_teacher_params_starts_at_teacher_entropy() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(dir.path(), 3, 3, 4);
        let conf = TrainingConfig {
            alpha: 0.7,
            epochs: 0,
            augmentation: AugmentationPolicy {
                routing: Routing::Shared,
                ..AugmentationPolicy::disabled()
            },
            ..cfg(TrainingMode::St)
        };
        let teacher = ModelCheckpoint::new(&KwsModel::init(conf.arch.clone(), 5).unwrap(), 0, "t");
        let opts = StudentOptions {
            init: StudentInit::FromParams(teacher.parameters.clone()),
            record_digests: false,
        };
        let out =
            train_student(&teacher, &c.train_labeled, &c.train_unlabeled, &conf, &opts).unwrap();
        let model = teacher.model().unwrap();
        let mut expected = 0.0;
        let mut n = 0;
        for m in [&c.train_labeled, &c.train_unlabeled] {
            for r in &m.records {
                let o = model
                    .forward(&extract_features(&m.load_audio(r).unwrap()).unwrap())
                    .unwrap();
                expected += 0.7 * mean_entropy(&o.encoder_probs) + mean_entropy(&o.decoder_probs);
                n += 1;
            }
        }
        expected /= n as f64;
        assert!((out.log.initial_loss - expected).abs() < 1e-9);
        assert_eq!(out.checkpoint.generation, 1);
    }

    fn digests(mode: TrainingMode, c: &SyntheticCorpus) -> Vec<BatchDigest> {
        let conf = cfg(mode);
        let teacher = ModelCheckpoint::new(&KwsModel::init(conf.arch.clone(), 1).unwrap(), 0, "t");
        let opts = StudentOptions {
            record_digests: true,
            ..Default::default()
        };
        train_student(&teacher, &c.train_labeled, &c.train_unlabeled, &conf, &opts)
            .unwrap()
            .log
            .batch_digests
    }

    #[test]
    fn routing_controls_which_input_is_masked() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(dir.path(), 2, 2, 6);
        let shared = digests(TrainingMode::StSaug, &c);
        assert_eq!(shared.len(), 3);
        for d in &shared {
            assert_eq!(d.teacher_input, d.student_input);
            assert_ne!(d.teacher_input, d.unmasked);
        }
        for d in &digests(TrainingMode::StSaugNs, &c) {
            assert_eq!(d.teacher_input, d.unmasked);
            assert_ne!(d.student_input, d.unmasked);
        }
    }

    #[test]
    fn student_ignores_hard_labels() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(dir.path(), 2, 2, 2);
        let conf = cfg(TrainingMode::StSaug);
        let teacher = ModelCheckpoint::new(&KwsModel::init(conf.arch.clone(), 1).unwrap(), 0, "t");
        let mut corrupted = c.train_labeled.clone();
        for r in &mut corrupted.records {
            r.label = match r.label {
                Label::Positive => Label::Negative,
                _ => Label::Positive,
            };
            r.keyword_span = Some((0, 1));
            r.encoder_units = Some(vec![3; 2]);
        }
        let before = teacher.parameters.digest();
        let opts = StudentOptions::default();
        let a =
            train_student(&teacher, &c.train_labeled, &c.train_unlabeled, &conf, &opts).unwrap();
        let b = train_student(&teacher, &corrupted, &c.train_unlabeled, &conf, &opts).unwrap();
        assert_eq!(
            a.checkpoint.parameters.digest(),
            b.checkpoint.parameters.digest()
        );
        assert_eq!(teacher.parameters.digest(), before);
    }

    #[test]
    fn student_rejects_arch_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(dir.path(), 1, 1, 1);
        let conf = cfg(TrainingMode::StSaug);
        let teacher =
            ModelCheckpoint::new(&KwsModel::init(ArchConfig::default(), 1).unwrap(), 0, "t");
        assert!(matches!(
            train_student(
                &teacher,
                &c.train_labeled,
                &c.train_unlabeled,
                &conf,
                &Default::default()
            ),
            Err(KwsError::Config(_))
        ));
    }

    #[test]
    fn run_writes_generations_and_hands_off_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(&dir.path().join("data"), 2, 2, 2);
        let conf = TrainingConfig {
            generations: 2,
            ..cfg(TrainingMode::StSaug)
        };
        let run_dir = dir.path().join("run");
        let opts = RunOptions {
            run_dir: Some(run_dir.clone()),
            test: Some(&c.test),
            ..Default::default()
        };
        let out = run_self_training(&c.train_labeled, &c.train_unlabeled, &conf, &opts).unwrap();
        let gens: Vec<u32> = out.reports.iter().map(|r| r.generation).collect();
        assert_eq!(gens, vec![0, 1, 2]);
        for k in 1..3 {
            assert_eq!(
                out.reports[k].teacher_digest.as_deref(),
                Some(out.reports[k - 1].params_digest.as_str())
            );
        }
        for k in 0..3 {
            assert!(run_dir.join(format!("g{k}/checkpoint.kwst")).is_file());
            assert!(run_dir.join(format!("g{k}/report.json")).is_file());
            assert!(out.reports[k].eval_summary.is_some());
        }
        let written: TrainingConfig = serde_json::from_str(
            &std::fs::read_to_string(run_dir.join("run_config.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(written, conf);

        let one = TrainingConfig {
            generations: 1,
            ..conf.clone()
        };
        let out = run_self_training(
            &c.train_labeled,
            &c.train_unlabeled,
            &one,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(out.reports.len(), 2);
        let mp = cfg(TrainingMode::MpSaug);
        let out = run_self_training(
            &c.train_labeled,
            &c.train_unlabeled,
            &mp,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(out.reports.len(), 1);
    }
}
