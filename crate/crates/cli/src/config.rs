//! Run configuration: JSON file, then command-line overrides.

use std::path::Path;

use anyhow::{Context, Result};
use kwst_core::augmentation::AugmentationPolicy;
use kwst_core::data_io::CorpusSpec;
use kwst_core::model::ArchConfig;
use kwst_core::self_training::{EvalSettings, TrainingConfig, TrainingMode};
use serde::{Deserialize, Serialize};

/// Every field is optional in the file; missing ones take the defaults of
/// the selected mode. The resolved form has every field filled in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<TrainingMode>,
    pub generations: Option<u32>,
    pub alpha: Option<f64>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub teacher_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub augmentation: Option<AugmentationPolicy>,
    pub arch: Option<ArchConfig>,
    pub corpus: Option<CorpusSpec>,
    pub eval: Option<EvalSettings>,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<TrainingMode>,
    pub generations: Option<u32>,
    pub alpha: Option<f64>,
    pub target_fa: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Applies overrides and fills every unset field.
    pub fn resolve(mut self, o: &Overrides) -> Result<RunConfig> {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.generations.is_some() {
            self.generations = o.generations;
        }
        if o.alpha.is_some() {
            self.alpha = o.alpha;
        }
        if let Some(mode) = o.mode {
            // a mode switch also switches the augmentation flags tied to it
            if self.mode != Some(mode) {
                if let Some(aug) = &mut self.augmentation {
                    let preset = TrainingConfig::for_mode(mode).augmentation;
                    aug.spec_enabled = preset.spec_enabled;
                    aug.routing = preset.routing;
                }
            }
            self.mode = Some(mode);
        }
        let mode = self.mode.unwrap_or(TrainingMode::StSaug);
        let base = TrainingConfig::for_mode(mode);
        let seed = self.seed.unwrap_or(base.seed);
        let mut eval = self.eval.unwrap_or_default();
        if let Some(fa) = o.target_fa {
            eval.target_fa_per_hour = fa;
        }
        let corpus = self.corpus.unwrap_or_else(|| CorpusSpec {
            seed,
            ..CorpusSpec::default()
        });
        let resolved = RunConfig {
            mode: Some(mode),
            generations: Some(self.generations.unwrap_or(base.generations)),
            alpha: Some(self.alpha.unwrap_or(base.alpha)),
            lr: Some(self.lr.unwrap_or(base.lr)),
            epochs: Some(self.epochs.unwrap_or(base.epochs)),
            teacher_epochs: Some(self.teacher_epochs.unwrap_or(base.teacher_epochs)),
            batch_size: Some(self.batch_size.unwrap_or(base.batch_size)),
            seed: Some(seed),
            augmentation: Some(self.augmentation.unwrap_or(base.augmentation)),
            arch: Some(self.arch.unwrap_or(base.arch)),
            corpus: Some(corpus),
            eval: Some(eval),
        };
        resolved.training()?.validate()?;
        Ok(resolved)
    }

    /// Training config of a resolved run config.
    pub fn training(&self) -> Result<TrainingConfig> {
        let missing = || anyhow::anyhow!("config is not resolved");
        Ok(TrainingConfig {
            mode: self.mode.ok_or_else(missing)?,
            generations: self.generations.ok_or_else(missing)?,
            alpha: self.alpha.ok_or_else(missing)?,
            lr: self.lr.ok_or_else(missing)?,
            epochs: self.epochs.ok_or_else(missing)?,
            teacher_epochs: self.teacher_epochs.ok_or_else(missing)?,
            batch_size: self.batch_size.ok_or_else(missing)?,
            seed: self.seed.ok_or_else(missing)?,
            augmentation: self.augmentation.clone().ok_or_else(missing)?,
            arch: self.arch.clone().ok_or_else(missing)?,
        })
    }

    pub fn corpus(&self) -> CorpusSpec {
        self.corpus.clone().unwrap_or_default()
    }

    pub fn eval(&self) -> EvalSettings {
        self.eval.unwrap_or_default()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
