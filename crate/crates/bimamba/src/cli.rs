//! Command-line interface.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bimamba_core::data::{HealthLabel, Sample, StageLabel};
use bimamba_core::gradcheck::{primitive_suite, stage_model_check, tiny_stage_config};
use bimamba_core::model::{argmax, logits, softmax};
use bimamba_core::synth::{synth_health, synth_subject, HealthSynthConfig, SynthConfig};
use bimamba_core::training::{health_samples, EpochRecord};
use bimamba_core::Tensor;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{self, Model};
use crate::error::{write, Error, Result};
use crate::exec::RayonExecutor;
use crate::manifest::{format_labels, health_name, load_manifest, write_manifest, Dataset, Manifest, SubjectEntry};
use crate::runs::{self, read_json, write_json, RunConfig, RunInfo, RunKind, RUN_SCHEMA};
use crate::tensor_io;

#[derive(Debug, Parser)]
#[command(name = "bimamba", version, about = "Sleep staging and sleep-health classification with bidirectional state-space models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (signals, labels and manifest).
    Synth(SynthArgs),
    /// Train one fold of a subject-wise k-fold plan.
    Train(TrainArgs),
    /// Subject-wise k-fold cross-validation.
    Cv(CvArgs),
    /// Train on one dataset and evaluate on another.
    Xeval(XevalArgs),
    /// Label a dataset with a saved model.
    Predict(PredictArgs),
    /// Healthy/disordered night classification over a sweep of train ratios.
    Health(HealthArgs),
    /// Rebuild the consolidated report of a run directory.
    Report(ReportArgs),
    /// Finite-difference gradient checks of every primitive and a tiny stage model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs_per_subject: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Channels carrying the stage signature; the rest carry decoys.
    #[arg(long, default_value_t = 10)]
    pub informative: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    /// Write labelled whole-night hypnograms for the health task instead.
    #[arg(long)]
    pub health: bool,
    /// 110 healthy and 100 disordered nights (with `--health`).
    #[arg(long, requires = "health")]
    pub balance: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// JSON run configuration (`model`, `training`, `health_model`, `health_training`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epoch_samples: Option<usize>,
    #[arg(long)]
    pub n_bimamba: Option<usize>,
    /// Remove channel attention.
    #[arg(long)]
    pub no_eca: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Held-out fold used for checkpoint selection and evaluation.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Run a single fold; the report is built once every fold is present.
    #[arg(long)]
    pub fold: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct XevalArgs {
    /// Training dataset.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Evaluation dataset.
    #[arg(long)]
    pub eval_manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate this stage checkpoint instead of training.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint stem (`<stem>.json` and `<stem>.bmt`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HealthArgs {
    /// Labelled hypnograms; synthetic nights when absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `a..b` in steps of 0.1 or a comma-separated list.
    #[arg(long, default_value = "0.5..0.9", value_parser = parse_ratios)]
    pub ratios: Ratios,
    /// Synthetic nights (half disordered) when no manifest is given.
    #[arg(long, default_value_t = 200)]
    pub subjects: usize,
    /// 110 healthy and 100 disordered synthetic nights.
    #[arg(long)]
    pub balance: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random points per primitive.
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ratios(pub Vec<f64>);

pub fn parse_ratios(s: &str) -> std::result::Result<Ratios, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("not a number: {t:?}"));
    let v: Vec<f64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        let (lo, hi) = ((a * 10.0).round() as i64, (b * 10.0).round() as i64);
        if (a * 10.0 - lo as f64).abs() > 1e-9 || (b * 10.0 - hi as f64).abs() > 1e-9 || lo > hi {
            return Err(format!("range {s:?} must run upward on a 0.1 grid"));
        }
        (lo..=hi).map(|i| i as f64 / 10.0).collect()
    } else {
        s.split(',').map(num).collect::<std::result::Result<_, _>>()?
    };
    if v.is_empty() || v.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
        return Err(format!("ratios must lie strictly between 0 and 1, got {s:?}"));
    }
    Ok(Ratios(v))
}

/// Loads `--config` and applies the command-line overrides.
pub fn run_config(args: &ModelArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
        cfg.health_training.seed = seed;
    }
    if let Some(n) = args.epoch_samples {
        cfg.model.epoch_samples = n;
    }
    if let Some(n) = args.n_bimamba {
        cfg.model.n_bimamba = n;
        cfg.health_model.n_bimamba = n;
    }
    if args.no_eca {
        cfg.model.eca = false;
    }
    cfg.model.validate()?;
    cfg.training.validate()?;
    cfg.health_model.validate()?;
    cfg.health_training.validate()?;
    Ok(cfg)
}

fn print_epoch(prefix: &str, r: &EpochRecord) {
    println!(
        "{prefix} epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_acc {:.4}  val_kappa {:.4}",
        r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.val_kappa
    );
}

fn stage_dataset(path: &Path, cfg: &RunConfig, exec: &RayonExecutor) -> Result<(Dataset, Vec<Sample>)> {
    let ds = load_manifest(path)?;
    if ds.channels.len() != cfg.model.channels {
        return Err(Error::Invalid(format!(
            "{}: {} channels but the model expects {}",
            path.display(),
            ds.channels.len(),
            cfg.model.channels
        )));
    }
    let samples = exec.install(|| ds.epochs(cfg.model.epoch_samples))?;
    Ok((ds, samples))
}

fn run_info(command: &str, kind: RunKind, cfg: &RunConfig, seed: u64) -> RunInfo {
    RunInfo {
        schema: RUN_SCHEMA.into(),
        command: command.into(),
        kind,
        seed,
        folds: Vec::new(),
        ratios: Vec::new(),
        manifest: None,
        eval_manifest: None,
        config: cfg.clone(),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut subjects = Vec::new();
    if a.health {
        let cfg = if a.balance {
            HealthSynthConfig::balanced(a.seed)
        } else {
            HealthSynthConfig {
                n_healthy: a.subjects - a.subjects / 2,
                n_unhealthy: a.subjects / 2,
                seed: a.seed,
            }
        };
        for h in synth_health(&cfg) {
            let rel = format!("{}.txt", h.subject);
            let labels: Vec<Option<StageLabel>> = h.stages.iter().map(|&s| Some(s)).collect();
            write(&a.out.join(&rel), format_labels(&labels))?;
            subjects.push(SubjectEntry {
                id: h.subject.clone(),
                edf: None,
                tensor: None,
                rate_hz: None,
                labels: rel,
                health: h.health.map(|l| health_name(l).to_string()),
            });
        }
    } else {
        let mut cfg = SynthConfig::new(a.subjects, a.epochs_per_subject, a.seed);
        cfg.informative = a.informative;
        cfg.noise_std = a.noise;
        cfg.validate()?;
        for i in 0..a.subjects {
            let rec = synth_subject(&cfg, i)?;
            let t = rec.channels.len();
            let data: Vec<f64> = rec.channels.concat();
            let tensor = Tensor::new(&[t, rec.channels[0].len()], data)?;
            let (trel, lrel) = (format!("{}.bmt", rec.subject), format!("{}.txt", rec.subject));
            tensor_io::save(&a.out.join(&trel), &tensor)?;
            let labels: Vec<Option<StageLabel>> = rec.labels.iter().map(|&s| Some(s)).collect();
            write(&a.out.join(&lrel), format_labels(&labels))?;
            subjects.push(SubjectEntry {
                id: rec.subject,
                edf: None,
                tensor: Some(trel),
                rate_hz: Some(rec.rate_hz),
                labels: lrel,
                health: None,
            });
        }
    }
    let mut m = Manifest::new(subjects);
    m.name = Some(format!("synthetic seed {}", a.seed));
    write_manifest(&a.out.join("manifest.json"), &m)?;
    println!("wrote {} subjects to {}", m.subjects.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs, exec: &RayonExecutor) -> Result<()> {
    let cfg = run_config(&a.model)?;
    let (_, samples) = stage_dataset(&a.manifest, &cfg, exec)?;
    let mut info = run_info("train", RunKind::Folds, &cfg, cfg.training.seed);
    info.folds = vec![a.fold];
    info.manifest = Some(a.manifest.display().to_string());
    write_json(&a.out.join("run.json"), &info)?;
    runs::run_folds(&samples, &cfg, a.k, Some(a.fold), &a.out, exec, |f, r| print_epoch(&format!("fold {f}"), r))?;
    print!("{}", runs::report(&a.out)?);
    Ok(())
}

fn cv(a: &CvArgs, exec: &RayonExecutor) -> Result<()> {
    let cfg = run_config(&a.model)?;
    let (_, samples) = stage_dataset(&a.manifest, &cfg, exec)?;
    let mut info = run_info("cv", RunKind::Folds, &cfg, cfg.training.seed);
    info.folds = (0..a.k).collect();
    info.manifest = Some(a.manifest.display().to_string());
    write_json(&a.out.join("run.json"), &info)?;
    runs::run_folds(&samples, &cfg, a.k, a.fold, &a.out, exec, |f, r| print_epoch(&format!("fold {f}"), r))?;
    let complete = info.folds.iter().all(|&f| runs::fold_dir(&a.out, f).join("report.json").is_file());
    if complete {
        print!("{}", runs::report(&a.out)?);
    } else {
        println!("fold {} written; run `report` once every fold is present", a.fold.unwrap_or(0));
    }
    Ok(())
}

fn xeval(a: &XevalArgs, exec: &RayonExecutor) -> Result<()> {
    let mut cfg = run_config(&a.model)?;
    let ckpt = match &a.checkpoint {
        Some(p) => match checkpoint::load(p)? {
            Model::Stage(m) => {
                cfg.model = m.cfg.clone();
                Some(m)
            }
            Model::Health(_) => return Err(Error::Invalid(format!("{}: not a stage checkpoint", p.display()))),
        },
        None => None,
    };
    let (_, eval_samples) = stage_dataset(&a.eval_manifest, &cfg, exec)?;
    let mut info = run_info("xeval", RunKind::Folds, &cfg, cfg.training.seed);
    info.folds = vec![0];
    info.manifest = Some(a.manifest.display().to_string());
    info.eval_manifest = Some(a.eval_manifest.display().to_string());
    write_json(&a.out.join("run.json"), &info)?;
    match ckpt {
        Some(m) => {
            let refs: Vec<&Sample> = eval_samples.iter().collect();
            let ev = bimamba_core::training::evaluate(&m, &refs, exec)?;
            let report = runs::fold_report(0, None, &refs, &ev);
            runs::write_fold(&a.out, &report, &m)?;
        }
        None => {
            let (_, train_samples) = stage_dataset(&a.manifest, &cfg, exec)?;
            runs::run_cross(&train_samples, &eval_samples, &cfg, &a.out, exec, |r| print_epoch("train", r))?;
        }
    }
    print!("{}", runs::report(&a.out)?);
    Ok(())
}

#[derive(Serialize)]
struct StagePredictions {
    schema: &'static str,
    checkpoint: String,
    confusion: bimamba_core::metrics::ConfusionMatrix,
    metrics: bimamba_core::metrics::MetricBundle,
}

#[derive(Serialize)]
struct NightPrediction {
    subject: String,
    truth: Option<String>,
    predicted: String,
    p_unhealthy: f64,
}

fn predict(a: &PredictArgs, exec: &RayonExecutor) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let ds = load_manifest(&a.manifest)?;
    match &model {
        Model::Stage(m) => {
            let samples = exec.install(|| ds.epochs(m.cfg.epoch_samples))?;
            let (ev, hyps) = runs::evaluate_model(&model, &samples, exec)?;
            for h in &hyps {
                let labels: Vec<Option<StageLabel>> = h.predicted.chars().map(StageLabel::from_char).collect();
                write(&a.out.join("predictions").join(format!("{}.txt", h.subject)), format_labels(&labels))?;
            }
            runs::write_hypnogram_plots(&a.out.join("hypnograms"), &hyps)?;
            let out = StagePredictions {
                schema: "bimamba-predictions/1",
                checkpoint: a.checkpoint.display().to_string(),
                confusion: ev.confusion,
                metrics: ev.metrics,
            };
            write_json(&a.out.join("metrics.json"), &out)?;
            print!("{}", bimamba_core::metrics::format_table(&[("predict".into(), out.metrics.clone())]));
        }
        Model::Health(m) => {
            let mut nights = ds.hypnograms()?;
            let truth: Vec<Option<HealthLabel>> = nights.iter().map(|h| h.health).collect();
            for h in nights.iter_mut() {
                h.health.get_or_insert(HealthLabel::Healthy);
            }
            let samples = health_samples(&nights, m.cfg.max_cycles)?;
            let probs = exec_logits(m, &samples, exec)?;
            let mut rows = Vec::new();
            let mut text = String::new();
            for ((s, p), t) in samples.iter().zip(&probs).zip(truth) {
                let pred = HealthLabel::from_index(argmax(p)).expect("two classes");
                let _ = writeln!(text, "{} {}", s.subject, health_name(pred));
                rows.push(NightPrediction {
                    subject: s.subject.clone(),
                    truth: t.map(|l| health_name(l).to_string()),
                    predicted: health_name(pred).to_string(),
                    p_unhealthy: p[1],
                });
            }
            write_json(&a.out.join("predictions.json"), &rows)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn exec_logits(m: &bimamba_core::model::HealthModel, samples: &[Sample], exec: &RayonExecutor) -> Result<Vec<Vec<f64>>> {
    use bimamba_core::exec::Executor;
    exec.map_indexed(samples.len(), |i| logits(m, &samples[i].input).map(|l| softmax(&l)))
        .into_iter()
        .map(|r| r.map_err(Error::from))
        .collect()
}

fn health(a: &HealthArgs, exec: &RayonExecutor) -> Result<()> {
    let cfg = run_config(&a.model)?;
    let nights = match &a.manifest {
        Some(p) => load_manifest(p)?.hypnograms()?,
        None => {
            let seed = cfg.health_training.seed;
            let hc = if a.balance {
                HealthSynthConfig::balanced(seed)
            } else {
                HealthSynthConfig {
                    n_healthy: a.subjects - a.subjects / 2,
                    n_unhealthy: a.subjects / 2,
                    seed,
                }
            };
            synth_health(&hc)
        }
    };
    let mut info = run_info("health", RunKind::Health, &cfg, cfg.health_training.seed);
    info.ratios = a.ratios.0.clone();
    info.manifest = a.manifest.as_ref().map(|p| p.display().to_string());
    write_json(&a.out.join("run.json"), &info)?;
    runs::run_health(&nights, &cfg, &a.ratios.0, &a.out, exec, |r, e| print_epoch(&format!("ratio {r:.1}"), e))?;
    print!("{}", runs::report(&a.out)?);
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow {
    name: String,
    points: usize,
    max_rel_error: f64,
    tolerance: f64,
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut rows: Vec<GradcheckRow> = primitive_suite(a.points, a.seed)?
        .into_iter()
        .map(|c| GradcheckRow {
            name: c.name.into(),
            points: c.points,
            max_rel_error: c.max_rel_error,
            tolerance: 1e-5,
        })
        .collect();
    let model = stage_model_check(&tiny_stage_config(), a.seed)?;
    rows.push(GradcheckRow {
        name: "stage_model".into(),
        points: model.coordinates,
        max_rel_error: model.max_rel_error,
        tolerance: 1e-4,
    });
    let mut failed = Vec::new();
    for r in &rows {
        let ok = r.max_rel_error < r.tolerance;
        println!("{:<24} {:>6} {:>10.2e} {}", r.name, r.points, r.max_rel_error, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if let Some(out) = &a.out {
        write_json(&out.join("gradcheck.json"), &rows)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("gradient check above tolerance: {}", failed.join(", "))))
    }
}

fn report(a: &ReportArgs) -> Result<()> {
    print!("{}", runs::report(&a.run_dir)?);
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let exec = RayonExecutor::from_env();
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a, &exec),
        Command::Cv(a) => cv(a, &exec),
        Command::Xeval(a) => xeval(a, &exec),
        Command::Predict(a) => predict(a, &exec),
        Command::Health(a) => health(a, &exec),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 2 on a usage error and 1 on a runtime
/// failure, with a single `error: ...` line on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error");
            eprintln!("{}", one_line(first));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_ranges_and_lists() {
        assert_eq!(parse_ratios("0.5..0.9").unwrap().0, vec![0.5, 0.6, 0.7, 0.8, 0.9]);
        assert_eq!(parse_ratios("0.9").unwrap().0, vec![0.9]);
        assert_eq!(parse_ratios("0.3, 0.7").unwrap().0, vec![0.3, 0.7]);
        assert!(parse_ratios("0.9..0.5").is_err());
        assert!(parse_ratios("0.5..1.0").is_err());
        assert!(parse_ratios("0.55..0.9").is_err());
        assert!(parse_ratios("x").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["bimamba", "frobnicate"]), 2);
        assert_eq!(run(["bimamba", "cv", "--k", "3"]), 2);
        assert_eq!(run(["bimamba", "health", "--out", "x", "--ratios", "2"]), 2);
    }

    #[test]
    fn runtime_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.json");
        let out = dir.path().join("out");
        let code = run(["bimamba", "cv", "--manifest", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, 1);
        assert_eq!(run(["bimamba", "report", out.to_str().unwrap()]), 1);
    }

    #[test]
    fn overrides_apply() {
        let args = ModelArgs {
            config: None,
            seed: Some(9),
            epoch_samples: Some(256),
            n_bimamba: Some(2),
            no_eca: true,
        };
        let c = run_config(&args).unwrap();
        assert_eq!((c.training.seed, c.health_training.seed), (9, 9));
        assert_eq!((c.model.epoch_samples, c.model.n_bimamba, c.model.eca), (256, 2, false));
    }
}
