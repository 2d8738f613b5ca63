//! Command-line surface. `run` returns the process exit code:
//! 0 on success, 2 for configuration or missing-file errors, 3 for
//! numerical failures and 1 for anything else.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{gen_ood, generate, DatasetSplit};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_predictions, gradient_variance_study, posterior_stats, posterior_stats_csv, prefix_accuracy_curve,
    EvalReport,
};
use crate::io::write_atomic;
use crate::objectives::{mutual_information, posterior_predictive, predictive_entropy, PredictionSamples};
use crate::training::{bayes_finetune, pretrain_map, Checkpoint};
use crate::BayesModel;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bayes-finetune", version, about = "Variational Bayesian fine-tuning of pre-trained networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training, evaluation and variance-study seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to load; defaults to `finetune.ckpt` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// MAP training; writes map.ckpt, train.data, metrics.csv and report.json.
    Pretrain(Common),
    /// Bayesian fine-tuning from a MAP checkpoint; writes finetune.ckpt plus metrics.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint; defaults to `map.ckpt` in the output directory.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Test-set metrics, OOD average precision and MI histograms.
    Eval(WithCheckpoint),
    /// Per-instance MI and entropy scores for the test split and each OOD set.
    OodDetect(WithCheckpoint),
    /// Gradient variance of the standard and exemplar estimators on a toy conv layer.
    VarianceStudy(Common),
    /// Test accuracy as a function of the number of posterior samples.
    EnsembleCurve(WithCheckpoint),
    /// Per-layer summary statistics of the posterior parameters.
    ExportPosterior(WithCheckpoint),
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Io { .. } => EXIT_CONFIG,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name) and runs one subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(&c.config)?;
    let cfg = match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    cfg.save(&c.out.join("resolved_config.json"))?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Training split described by the data section.
pub fn train_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    generate(&cfg.data.generator, cfg.data.train_seed).map_err(|e| Error::Config(format!("data: {e}")))
}

/// Held-out split: same generator, `test_n` rows, `test_seed`.
pub fn test_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    generate(&cfg.data.generator.with_n(cfg.data.test_n), cfg.data.test_seed)
        .map_err(|e| Error::Config(format!("data: {e}")))
}

fn load_checkpoint(arg: &Option<PathBuf>, out: &Path, default: &str) -> Result<Checkpoint> {
    let path = arg.clone().unwrap_or_else(|| out.join(default));
    Checkpoint::load(&path)
}

/// Posterior-predictive samples on the test split and on every configured OOD set.
pub fn predictions(
    model: &BayesModel,
    cfg: &RunConfig,
    test: &DatasetSplit,
) -> Result<(PredictionSamples, Vec<(String, PredictionSamples)>)> {
    let samples = if model.is_deterministic() { 1 } else { cfg.eval.samples };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let (normal, _) = posterior_predictive(model, &test.x, samples, &mut rng)?;
    let mut ood = Vec::with_capacity(cfg.eval.ood.len());
    for (i, spec) in cfg.eval.ood.iter().enumerate() {
        let x = gen_ood(test, spec)?;
        let mut name = spec.label().to_string();
        if cfg.eval.ood[..i].iter().any(|o| o.label() == spec.label()) {
            name = format!("{name}_{i}");
        }
        ood.push((name, posterior_predictive(model, &x, samples, &mut rng)?.0));
    }
    Ok((normal, ood))
}

fn write_report(model: &BayesModel, cfg: &RunConfig, test: &DatasetSplit, out: &Path) -> Result<EvalReport> {
    let (normal, ood) = predictions(model, cfg, test)?;
    let report = evaluate_predictions(&normal, &test.y, &ood)?;
    write_text(&out.join("metrics.csv"), &report.to_csv())?;
    write_text(&out.join("mi_histogram.csv"), &report.histogram_csv())?;
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(c) => {
            let cfg = load_config(&c)?;
            let train = train_split(&cfg)?;
            train.save(&c.out.join("train.data"))?;
            let ckpt = pretrain_map(&cfg.model, &cfg.pretrain, &train)?;
            ckpt.save(&c.out.join("map.ckpt"))?;
            let report = write_report(&ckpt.model, &cfg, &test_split(&cfg)?, &c.out)?;
            log::info!("MAP test accuracy {:.4}", report.top1);
        }
        Command::Finetune { common: c, from } => {
            let cfg = load_config(&c)?;
            let start = load_checkpoint(&from, &c.out, "map.ckpt")?;
            let ckpt = bayes_finetune(&start, &cfg.finetune, &train_split(&cfg)?)?;
            ckpt.save(&c.out.join("finetune.ckpt"))?;
            let report = write_report(&ckpt.model, &cfg, &test_split(&cfg)?, &c.out)?;
            log::info!("fine-tuned test accuracy {:.4}", report.top1);
        }
        Command::Eval(a) => {
            let cfg = load_config(&a.common)?;
            let ckpt = load_checkpoint(&a.checkpoint, &a.common.out, "finetune.ckpt")?;
            write_report(&ckpt.model, &cfg, &test_split(&cfg)?, &a.common.out)?;
        }
        Command::OodDetect(a) => {
            let cfg = load_config(&a.common)?;
            let ckpt = load_checkpoint(&a.checkpoint, &a.common.out, "finetune.ckpt")?;
            let test = test_split(&cfg)?;
            let (normal, ood) = predictions(&ckpt.model, &cfg, &test)?;
            let mut scores = String::from("source,index,is_ood,mi,entropy\n");
            let mut sets = vec![("test".to_string(), &normal)];
            sets.extend(ood.iter().map(|(n, p)| (n.clone(), p)));
            for (name, ps) in sets {
                let mi = mutual_information(ps);
                let h = predictive_entropy(&ps.mean())?;
                let is_ood = u8::from(name != "test");
                for (i, (m, e)) in mi.data().iter().zip(h.data()).enumerate() {
                    let _ = writeln!(scores, "{name},{i},{is_ood},{m},{e}");
                }
            }
            write_text(&a.common.out.join("ood_scores.csv"), &scores)?;
            let report = evaluate_predictions(&normal, &test.y, &ood)?;
            let mut ap = String::from("source,ap\n");
            for (name, v) in &report.ap_per_ood_source {
                let _ = writeln!(ap, "{name},{v}");
            }
            write_text(&a.common.out.join("ood_ap.csv"), &ap)?;
        }
        Command::VarianceStudy(c) => {
            let cfg = load_config(&c)?;
            let report = gradient_variance_study(&cfg.variance_study)?;
            write_text(&c.out.join("variance_study.csv"), &report.to_csv())?;
            write_text(&c.out.join("variance_study.json"), &serde_json::to_string_pretty(&report)?)?;
            log::info!("variance ratio standard/exemplar {:.3}", report.ratio);
        }
        Command::EnsembleCurve(a) => {
            let cfg = load_config(&a.common)?;
            let ckpt = load_checkpoint(&a.checkpoint, &a.common.out, "finetune.ckpt")?;
            let test = test_split(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
            let (ps, _) = posterior_predictive(&ckpt.model, &test.x, cfg.eval.samples, &mut rng)?;
            let mut csv = String::from("samples,accuracy\n");
            for (s, acc) in prefix_accuracy_curve(&ps, &test.y)?.iter().enumerate() {
                let _ = writeln!(csv, "{},{acc}", s + 1);
            }
            write_text(&a.common.out.join("ensemble_curve.csv"), &csv)?;
        }
        Command::ExportPosterior(a) => {
            load_config(&a.common)?;
            let ckpt = load_checkpoint(&a.checkpoint, &a.common.out, "finetune.ckpt")?;
            write_text(
                &a.common.out.join("posterior.csv"),
                &posterior_stats_csv(&posterior_stats(&ckpt.model)?),
            )?;
        }
    }
    Ok(())
}
