use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kwst_core::augmentation::{classic_augment, make_pair, synthetic_noise};
use kwst_core::data_io::{
    generate_synthetic_corpus, load_checkpoint, load_manifest, DatasetManifest, Split,
};
use kwst_core::eval::{evaluate_scores, roc_svg, score_split};
use kwst_core::frontend::{extract_features, Spectrogram};
use kwst_core::rng::RngKey;
use kwst_core::self_training::{run_self_training, RunOptions, TrainingMode};

mod config;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "kwst",
    version,
    about = "Student-teacher self-training for keyword spotting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// baseline_mp, mp_saug, st, st_saug or st_saug_ns
    #[arg(long)]
    mode: Option<TrainingMode>,
    #[arg(long)]
    generations: Option<u32>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Target false accepts per hour for the reported operating point
    #[arg(long = "target-fa")]
    target_fa: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref())?.resolve(&Overrides {
            seed: self.seed,
            mode: self.mode,
            generations: self.generations,
            alpha: self.alpha,
            target_fa: self.target_fa,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (WAV files plus JSONL manifests)
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generation-0 teacher only
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Corpus directory written by gen-data
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher followed by student generations
    Selftrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from this teacher checkpoint instead of training one
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Skip evaluation on the test split
        #[arg(long)]
        no_eval: bool,
    },
    /// FR at the target FA/h for a checkpoint
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write report.json and roc.csv here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ROC curves (CSV per checkpoint, one SVG plot)
    Roc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher and student inputs for one utterance as PGM images
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Utterance id; defaults to the first labeled record
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_split(dir: &Path, split: Split) -> Result<DatasetManifest> {
    let path = dir.join(split.file_name());
    let m = load_manifest(&path, split).with_context(|| format!("loading {}", path.display()))?;
    m.validate()?;
    Ok(m)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("KWST_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("KWST_THREADS={v:?} is not a number"))?;
        if n == 0 {
            bail!("KWST_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(
    common: &Common,
    data: &Path,
    out: &Path,
    teacher: Option<&Path>,
    teacher_only: bool,
    eval: bool,
) -> Result<()> {
    let resolved = common.resolve()?;
    let mut cfg = resolved.training()?;
    if teacher_only {
        cfg.generations = 1;
    }
    let labeled = load_split(data, Split::TrainLabeled)?;
    let unlabeled = if cfg.mode.is_self_training() && !teacher_only {
        load_split(data, Split::TrainUnlabeled)?
    } else {
        DatasetManifest::new(Split::TrainUnlabeled, Vec::new())
    };
    let test = if eval {
        Some(load_split(data, Split::Test)?)
    } else {
        None
    };
    let teacher = teacher.map(load_checkpoint).transpose()?;
    std::fs::create_dir_all(out)?;
    resolved.write(&out.join("resolved_config.json"))?;

    let opts = RunOptions {
        run_dir: Some(out.to_path_buf()),
        teacher,
        test: test.as_ref(),
        eval: resolved.eval(),
    };
    let run_cfg = if teacher_only {
        // supervised modes stop after the teacher
        let mut c = cfg.clone();
        if c.mode.is_self_training() {
            c.mode = TrainingMode::BaselineMp;
            c.augmentation.spec_enabled = false;
            c.augmentation.routing = kwst_core::augmentation::Routing::None;
        }
        c
    } else {
        cfg
    };
    let outcome = run_self_training(&labeled, &unlabeled, &run_cfg, &opts)?;
    for r in &outcome.reports {
        let fr = r
            .eval_summary
            .as_ref()
            .map(|e| format!(" FR@{}FA/h={:.4}", e.target_fa_per_hour, e.fr_at_target))
            .unwrap_or_default();
        println!(
            "g{} {} loss {:.5} -> {:.5}{}",
            r.generation,
            r.mode,
            r.initial_train_loss.unwrap_or(f64::NAN),
            r.final_train_loss.unwrap_or(f64::NAN),
            fr
        );
    }
    Ok(())
}

fn to_pgm(spec: &Spectrogram) -> Vec<u8> {
    let (lo, hi) = spec
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(*v), b.max(*v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (spec.n_frames(), spec.n_bins());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for b in (0..h).rev() {
        for t in 0..w {
            out.push(((spec.get(t, b) - lo) / span * 255.0).round() as u8);
        }
    }
    out
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    configure_threads()?;
    match cli.command {
        Command::GenData { common, out } => {
            let resolved = common.resolve()?;
            let corpus = generate_synthetic_corpus(&out, &resolved.corpus())?;
            resolved.write(&out.join("resolved_config.json"))?;
            println!(
                "wrote {} labeled, {} unlabeled, {} test utterances to {}",
                corpus.train_labeled.len(),
                corpus.train_unlabeled.len(),
                corpus.test.len(),
                out.display()
            );
        }
        Command::TrainTeacher { common, data, out } => {
            train(&common, &data, &out, None, true, true)?
        }
        Command::Selftrain {
            common,
            data,
            out,
            teacher,
            no_eval,
        } => train(&common, &data, &out, teacher.as_deref(), false, !no_eval)?,
        Command::Evaluate {
            common,
            data,
            checkpoint,
            out,
        } => {
            let settings = common.resolve()?.eval();
            let model = load_checkpoint(&checkpoint)?.model()?;
            let test = load_split(&data, Split::Test)?;
            let scores = score_split(&test, &model, &settings.detector)?;
            let (report, curve) = evaluate_scores(
                "test",
                &scores,
                settings.target_fa_per_hour,
                settings.n_thresholds,
                &settings.detector,
            )?;
            println!(
                "FR {:.4} at {} FA/h (threshold {:.4}{})",
                report.fr_at_target,
                report.target_fa_per_hour,
                report.threshold,
                if report.extrapolated {
                    ", extrapolated"
                } else {
                    ""
                }
            );
            if let Some(out) = out {
                write_json(&report, &out.join("report.json"))?;
                curve.write_csv(&out.join("roc.csv"))?;
            }
        }
        Command::Roc {
            common,
            data,
            checkpoints,
            out,
        } => {
            let settings = common.resolve()?.eval();
            let test = load_split(&data, Split::Test)?;
            std::fs::create_dir_all(&out)?;
            let mut curves = Vec::new();
            for (i, path) in checkpoints.iter().enumerate() {
                let ckpt = load_checkpoint(path)?;
                let scores = score_split(&test, &ckpt.model()?, &settings.detector)?;
                let (_, curve) = evaluate_scores(
                    "test",
                    &scores,
                    settings.target_fa_per_hour,
                    settings.n_thresholds,
                    &settings.detector,
                )?;
                curve.write_csv(&out.join(format!("roc_{i}.csv")))?;
                curves.push((format!("{i}: g{}", ckpt.generation), curve));
            }
            let named: Vec<(&str, &_)> = curves.iter().map(|(n, c)| (n.as_str(), c)).collect();
            std::fs::write(out.join("roc.svg"), roc_svg(&named))?;
            println!("wrote {} curve(s) to {}", curves.len(), out.display());
        }
        Command::AugmentPreview {
            common,
            data,
            id,
            epoch,
            out,
        } => {
            let resolved = common.resolve()?;
            let cfg = resolved.training()?;
            let labeled = load_split(&data, Split::TrainLabeled)?;
            let record = match &id {
                Some(id) => labeled
                    .records
                    .iter()
                    .find(|r| &r.id == id)
                    .with_context(|| format!("no labeled record {id:?}"))?,
                None => labeled.records.first().context("labeled split is empty")?,
            };
            let key = RngKey::for_utterance(cfg.seed, &record.id, epoch);
            let clip = labeled.load_audio(record)?;
            let noisy = if cfg.augmentation.classic_enabled {
                let noise = synthetic_noise(clip.len(), key.derive("noise"))?;
                classic_augment(&clip, &noise, &cfg.augmentation, key.derive("classic"))?
            } else {
                clip
            };
            let features = extract_features(&noisy)?;
            let pair = make_pair(&features, &cfg.augmentation, key.derive("spec"), key.hex());
            std::fs::create_dir_all(&out)?;
            for (name, s) in [
                ("unmasked", &features),
                ("teacher", &pair.teacher_input),
                ("student", &pair.student_input),
            ] {
                std::fs::write(out.join(format!("{name}.pgm")), to_pgm(s))?;
                println!("{name}: {}", s.digest());
            }
        }
    }
    Ok(())
}
