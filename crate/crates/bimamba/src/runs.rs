//! Experiment runs and their on-disk layout.
//!
//! A fold-based run directory (`train`, `cv`, `xeval`) holds `run.json`,
//! one `fold_NN/report.json` (plus checkpoint) per fold, and the
//! consolidated `aggregate.json`, `report.txt` and `hypnograms/` written
//! by [`report`]. A health run holds `run.json`, one `ratio_X.X/roc.json`
//! per train ratio and `accuracy_vs_ratio.{json,txt}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bimamba_core::data::{Hypnogram, Sample, StageLabel};
use bimamba_core::exec::Executor;
use bimamba_core::metrics::{class_names, format_table, render_hypnogram, ConfusionMatrix, MetricBundle, RocCurve};
use bimamba_core::model::{HealthModelConfig, StageModel, StageModelConfig};
use bimamba_core::training::{
    aggregate, evaluate, run_health_split, run_stage_fold, split_fold, subject_kfold, subjects_of, Aggregate, EpochRecord, Evaluation,
    TrainReport, TrainingConfig,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Architecture, Model};
use crate::error::{read, write, Error, Result};

pub const RUN_SCHEMA: &str = "bimamba-run/1";
pub const REPORT_SCHEMA: &str = "bimamba-report/1";

/// Model and optimizer settings of a run, read from `--config` and echoed
/// into the run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: StageModelConfig,
    pub training: TrainingConfig,
    pub health_model: HealthModelConfig,
    pub health_training: TrainingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Folds,
    Health,
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub schema: String,
    pub command: String,
    pub kind: RunKind,
    pub seed: u64,
    /// Fold ids (fold runs) expected in the directory.
    #[serde(default)]
    pub folds: Vec<usize>,
    /// Train ratios (health runs).
    #[serde(default)]
    pub ratios: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_manifest: Option<String>,
    pub config: RunConfig,
}

/// Per-subject hypnogram strings (`W`, `1`, `2`, `3`, `R` per epoch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectHypnogram {
    pub subject: String,
    pub truth: String,
    pub predicted: String,
}

/// Contents of `fold_NN/report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    /// Absent when a saved checkpoint was evaluated without training.
    pub train: Option<TrainReport>,
    pub eval_subjects: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricBundle,
    pub hypnograms: Vec<SubjectHypnogram>,
}

/// Contents of `aggregate.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub aggregate: Aggregate,
    pub per_class_f1: BTreeMap<String, f64>,
    pub folds: Vec<FoldSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: f64,
    pub best_epoch: usize,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("run records serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, to_json(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn fold_dir(run: &Path, fold: usize) -> PathBuf {
    run.join(format!("fold_{fold:02}"))
}

fn stage_chars(labels: impl Iterator<Item = usize>) -> String {
    labels.map(|l| StageLabel::from_index(l).map_or('?', StageLabel::to_char)).collect()
}

/// Groups an evaluation (in sample order) into per-subject hypnograms.
pub fn subject_hypnograms(samples: &[&Sample], ev: &Evaluation) -> Vec<SubjectHypnogram> {
    let mut out: Vec<SubjectHypnogram> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if out.last().is_none_or(|h| h.subject != s.subject) {
            out.push(SubjectHypnogram {
                subject: s.subject.clone(),
                truth: String::new(),
                predicted: String::new(),
            });
        }
        let h = out.last_mut().expect("pushed above");
        h.truth.push_str(&stage_chars([ev.labels[i]].into_iter()));
        h.predicted.push_str(&stage_chars([ev.predictions[i]].into_iter()));
    }
    out
}

pub fn fold_report(fold: usize, train: Option<TrainReport>, eval_samples: &[&Sample], ev: &Evaluation) -> FoldReport {
    let mut eval_subjects: Vec<String> = Vec::new();
    for s in eval_samples {
        if eval_subjects.last() != Some(&s.subject) {
            eval_subjects.push(s.subject.clone());
        }
    }
    FoldReport {
        fold,
        train,
        eval_subjects,
        confusion: ev.confusion.clone(),
        metrics: ev.metrics.clone(),
        hypnograms: subject_hypnograms(eval_samples, ev),
    }
}

pub fn write_fold(run: &Path, report: &FoldReport, model: &StageModel) -> Result<()> {
    let dir = fold_dir(run, report.fold);
    checkpoint::save(&dir.join("model"), Architecture::Stage(model.cfg.clone()), bimamba_core::model::Classifier::store(model))?;
    write_json(&dir.join("report.json"), report)
}

/// Trains and evaluates the listed folds of a subject-wise k-fold plan,
/// writing each fold's report and checkpoint.
pub fn run_folds(
    samples: &[Sample],
    cfg: &RunConfig,
    k: usize,
    only: Option<usize>,
    run: &Path,
    exec: &impl Executor,
    mut log: impl FnMut(usize, &EpochRecord),
) -> Result<Vec<FoldReport>> {
    let plan = subject_kfold(&subjects_of(samples), k, cfg.training.seed)?;
    write_json(&run.join("folds.json"), &plan)?;
    let mut out = Vec::new();
    for fold in &plan.folds {
        if only.is_some_and(|f| f != fold.index) {
            continue;
        }
        let res = run_stage_fold(&cfg.model, &cfg.training, samples, fold, exec, |r| log(fold.index, r))?;
        let (_, val) = split_fold(samples, fold);
        let report = fold_report(fold.index, Some(res.report), &val, &res.evaluation);
        write_fold(run, &report, &res.model)?;
        out.push(report);
    }
    if let Some(f) = only {
        if out.is_empty() {
            return Err(Error::Invalid(format!("fold {f} outside 0..{k}")));
        }
    }
    Ok(out)
}

/// Trains on `train_samples` (one subject-wise fold held out for
/// checkpoint selection) and evaluates on `eval_samples`.
pub fn run_cross(
    train_samples: &[Sample],
    eval_samples: &[Sample],
    cfg: &RunConfig,
    run: &Path,
    exec: &impl Executor,
    log: impl FnMut(&EpochRecord),
) -> Result<FoldReport> {
    let subjects = subjects_of(train_samples);
    let k = subjects.len().clamp(2, 5);
    let plan = subject_kfold(&subjects, k, cfg.training.seed)?;
    let fold = &plan.folds[0];
    let res = run_stage_fold(&cfg.model, &cfg.training, train_samples, fold, exec, log)?;
    let eval_refs: Vec<&Sample> = eval_samples.iter().collect();
    let ev = evaluate(&res.model, &eval_refs, exec)?;
    let report = fold_report(fold.index, Some(res.report), &eval_refs, &ev);
    write_fold(run, &report, &res.model)?;
    Ok(report)
}

/// Evaluates a frozen model on `samples`.
pub fn evaluate_model(model: &Model, samples: &[Sample], exec: &impl Executor) -> Result<(Evaluation, Vec<SubjectHypnogram>)> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let ev = match model {
        Model::Stage(m) => evaluate(m, &refs, exec)?,
        Model::Health(m) => evaluate(m, &refs, exec)?,
    };
    let hyps = subject_hypnograms(&refs, &ev);
    Ok((ev, hyps))
}

fn hypnogram_of(subject: &str, chars: &str) -> Hypnogram {
    Hypnogram::new(subject, chars.chars().map(|c| StageLabel::from_char(c).unwrap_or(StageLabel::W)).collect())
}

/// Writes `<dir>/<subject>.svg` and `.txt` comparing truth and prediction.
pub fn write_hypnogram_plots(dir: &Path, hyps: &[SubjectHypnogram]) -> Result<()> {
    for h in hyps {
        let plot = render_hypnogram(&hypnogram_of(&h.subject, &h.truth), &hypnogram_of(&h.subject, &h.predicted))?;
        write(&dir.join(format!("{}.svg", h.subject)), &plot.svg)?;
        write(&dir.join(format!("{}.txt", h.subject)), &plot.text)?;
    }
    Ok(())
}

fn mean_bundle(a: &Aggregate) -> MetricBundle {
    MetricBundle {
        accuracy: a.accuracy,
        precision: Vec::new(),
        recall: Vec::new(),
        f1: a.per_class_f1.clone(),
        macro_f1: a.macro_f1,
        kappa: a.kappa,
        p_o: a.accuracy,
        p_e: 0.0,
        support: Vec::new(),
        undefined: Vec::new(),
    }
}

/// Text table: one row per fold and the mean.
pub fn render_table(reports: &[FoldReport], agg: &Aggregate) -> String {
    let mut rows: Vec<(String, MetricBundle)> = reports.iter().map(|r| (format!("fold {:02}", r.fold), r.metrics.clone())).collect();
    rows.push(("mean".into(), mean_bundle(agg)));
    format_table(&rows)
}

/// Consolidates a run directory. Idempotent: the outputs depend only on
/// the fold (or ratio) records already present.
pub fn report(run: &Path) -> Result<String> {
    let info: RunInfo = read_json(&run.join("run.json"))?;
    match info.kind {
        RunKind::Folds => report_folds(run, &info),
        RunKind::Health => report_health(run, &info),
    }
}

fn report_folds(run: &Path, info: &RunInfo) -> Result<String> {
    let absent: Vec<String> = info
        .folds
        .iter()
        .filter(|&&f| !fold_dir(run, f).join("report.json").is_file())
        .map(|f| f.to_string())
        .collect();
    if !absent.is_empty() {
        return Err(Error::Invalid(format!("{}: missing fold reports for folds {}", run.display(), absent.join(", "))));
    }
    let reports: Vec<FoldReport> = info
        .folds
        .iter()
        .map(|&f| read_json(&fold_dir(run, f).join("report.json")))
        .collect::<Result<_>>()?;
    let bundles: Vec<MetricBundle> = reports.iter().map(|r| r.metrics.clone()).collect();
    let agg = aggregate(&bundles)?;
    let names = class_names(agg.per_class_f1.len());
    let summary = Summary {
        schema: REPORT_SCHEMA.into(),
        per_class_f1: names.iter().cloned().zip(agg.per_class_f1.iter().copied()).collect(),
        folds: reports
            .iter()
            .map(|r| FoldSummary {
                fold: r.fold,
                accuracy: r.metrics.accuracy,
                macro_f1: r.metrics.macro_f1,
                kappa: r.metrics.kappa,
                best_epoch: r.train.as_ref().map_or(0, |t| t.best_epoch),
            })
            .collect(),
        aggregate: agg,
    };
    let table = render_table(&reports, &summary.aggregate);
    write_json(&run.join("aggregate.json"), &summary)?;
    write(&run.join("report.txt"), &table)?;
    let hyps: Vec<SubjectHypnogram> = reports.iter().flat_map(|r| r.hypnograms.iter().cloned()).collect();
    write_hypnogram_plots(&run.join("hypnograms"), &hyps)?;
    Ok(table)
}

/// Contents of `ratio_X.X/roc.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthRecord {
    pub ratio: f64,
    pub train_nights: usize,
    pub test_subjects: Vec<String>,
    pub best_epoch: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub confusion: ConfusionMatrix,
    pub roc: RocCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub ratio: f64,
    pub accuracy: f64,
    pub auc: f64,
}

pub fn ratio_dir(run: &Path, ratio: f64) -> PathBuf {
    run.join(format!("ratio_{ratio:.1}"))
}

/// Runs the health classifier at each train ratio.
pub fn run_health(
    nights: &[Hypnogram],
    cfg: &RunConfig,
    ratios: &[f64],
    run: &Path,
    exec: &impl Executor,
    mut log: impl FnMut(f64, &EpochRecord),
) -> Result<Vec<HealthRecord>> {
    let mut out = Vec::new();
    for &ratio in ratios {
        let r = run_health_split(&cfg.health_model, &cfg.health_training, nights, ratio, exec, |e| log(ratio, e))?;
        let rec = HealthRecord {
            ratio,
            train_nights: r.report.train_subjects.len() + r.report.val_subjects.len(),
            test_subjects: r.test_subjects.clone(),
            best_epoch: r.report.best_epoch,
            accuracy: r.evaluation.metrics.accuracy,
            auc: r.roc.auc,
            confusion: r.evaluation.confusion.clone(),
            roc: r.roc.clone(),
        };
        let dir = ratio_dir(run, ratio);
        checkpoint::save(&dir.join("model"), Architecture::Health(r.model.cfg.clone()), bimamba_core::model::Classifier::store(&r.model))?;
        write_json(&dir.join("roc.json"), &rec)?;
        out.push(rec);
    }
    Ok(out)
}

fn report_health(run: &Path, info: &RunInfo) -> Result<String> {
    let absent: Vec<String> = info
        .ratios
        .iter()
        .filter(|&&r| !ratio_dir(run, r).join("roc.json").is_file())
        .map(|r| format!("{r:.1}"))
        .collect();
    if !absent.is_empty() {
        return Err(Error::Invalid(format!("{}: missing ratio reports for {}", run.display(), absent.join(", "))));
    }
    let rows: Vec<RatioRow> = info
        .ratios
        .iter()
        .map(|&r| {
            let rec: HealthRecord = read_json(&ratio_dir(run, r).join("roc.json"))?;
            Ok(RatioRow {
                ratio: rec.ratio,
                accuracy: rec.accuracy,
                auc: rec.auc,
            })
        })
        .collect::<Result<_>>()?;
    let mut table = String::from("Ratio     ACC    AUC\n");
    for r in &rows {
        let _ = writeln!(table, "{:<5.1}  {:>6.3} {:>6.3}", r.ratio, r.accuracy, r.auc);
    }
    write_json(&run.join("accuracy_vs_ratio.json"), &rows)?;
    write(&run.join("accuracy_vs_ratio.txt"), &table)?;
    Ok(table)
}
