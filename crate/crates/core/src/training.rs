//! Mini-batch training with Adam, subject-wise cross-validation folds and
//! evaluation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{encode_health_input, ChannelNorm, Hypnogram, Sample};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::metrics::{bundle, confusion, roc_auc, ConfusionMatrix, MetricBundle, RocCurve};
use crate::model::{
    argmax, build_health_model, build_stage_model, logits, loss_and_grad, softmax, Classifier, HealthModel, HealthModelConfig, StageModel,
    StageModelConfig,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{Gradients, ParamStore};
use crate::rng::{derive, seeded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 100,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "epochs and batch_size must be >= 1, got {} and {}",
                self.epochs, self.batch_size
            )));
        }
        self.adam().validate()
    }
}

/// Training and validation subjects of one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Shuffles `subjects` with `seed` and cuts them into `k` validation groups
/// whose sizes differ by at most one. Training lists keep input order.
pub fn subject_kfold(subjects: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    let n = subjects.len();
    if k < 2 || k > n {
        return Err(Error::Config(format!(
            "k-fold needs 2 <= k <= #subjects, got k = {k} with {n} subjects"
        )));
    }
    let unique: BTreeSet<&String> = subjects.iter().collect();
    if unique.len() != n {
        return Err(Error::Config("subject ids must be unique".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(derive(seed, &[0xf01d])));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut val_idx: Vec<usize> = order[start..start + size].to_vec();
        start += size;
        val_idx.sort_unstable();
        let val: Vec<String> = val_idx.iter().map(|&i| subjects[i].clone()).collect();
        let train = (0..n)
            .filter(|i| val_idx.binary_search(i).is_err())
            .map(|i| subjects[i].clone())
            .collect();
        folds.push(Fold { index: f, train, val });
    }
    Ok(FoldPlan { folds })
}

/// Distinct subject ids in order of first appearance.
pub fn subjects_of(samples: &[Sample]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    samples
        .iter()
        .filter(|s| seen.insert(s.subject.clone()))
        .map(|s| s.subject.clone())
        .collect()
}

/// Splits `samples` into the fold's training and validation parts.
pub fn split_fold<'a>(samples: &'a [Sample], fold: &Fold) -> (Vec<&'a Sample>, Vec<&'a Sample>) {
    let train: BTreeSet<&str> = fold.train.iter().map(String::as_str).collect();
    let val: BTreeSet<&str> = fold.val.iter().map(String::as_str).collect();
    (
        samples.iter().filter(|s| train.contains(s.subject.as_str())).collect(),
        samples.iter().filter(|s| val.contains(s.subject.as_str())).collect(),
    )
}

/// Stratified split by label: each class contributes `round(ratio·n_c)`
/// items to the training side. Returns `(train, test)` indices.
pub fn stratified_split(labels: &[usize], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("train ratio {ratio} outside (0, 1)")));
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut seeded(derive(seed, &[0x57a7, c as u64])));
        let n_train = crate::math::round(ratio * idx.len() as f64) as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    pub val_kappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Set when training stopped on a non-finite loss.
    pub stopped: Option<String>,
}

/// Predictions and metrics of a frozen model on a labelled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricBundle,
    pub loss: f64,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

pub fn evaluate<M: Classifier>(model: &M, samples: &[&Sample], exec: &impl Executor) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty set".into()));
    }
    let k = model.classes();
    let outs = exec.map_indexed(samples.len(), |i| logits(model, &samples[i].input));
    let mut loss = 0.0;
    let (mut predictions, mut probabilities, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (s, l) in samples.iter().zip(outs) {
        let l = l?;
        if s.label >= k {
            return Err(Error::Index {
                what: "class label",
                index: s.label,
                bound: k,
            });
        }
        let p = softmax(&l);
        loss -= crate::math::ln(p[s.label].max(f64::MIN_POSITIVE));
        predictions.push(argmax(&l));
        probabilities.push(p);
        labels.push(s.label);
    }
    let cm = confusion(&labels, &predictions, k)?;
    Ok(Evaluation {
        metrics: bundle(&cm)?,
        confusion: cm,
        loss: loss / samples.len() as f64,
        labels,
        predictions,
        probabilities,
    })
}

/// Samples per gradient chunk; chunk sums are added in chunk order so the
/// result does not depend on the executor.
const GRAD_CHUNK: usize = 8;

/// Mean loss and mean gradient of a mini-batch.
pub fn batch_gradient<M: Classifier>(model: &M, batch: &[&Sample], seed: u64, exec: &impl Executor) -> Result<(f64, Gradients)> {
    let chunks = batch.len().div_ceil(GRAD_CHUNK);
    let parts = exec.map_indexed(chunks, |c| -> Result<(f64, Gradients)> {
        let mut g = Gradients::zeros_like(model.store());
        let mut loss = 0.0;
        for (j, s) in batch.iter().enumerate().skip(c * GRAD_CHUNK).take(GRAD_CHUNK) {
            let (l, gs) = loss_and_grad(model, &s.input, s.label, derive(seed, &[j as u64]))?;
            loss += l;
            g.add(&gs);
        }
        Ok((loss, g))
    });
    let mut total = Gradients::zeros_like(model.store());
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        total.add(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Trains `model` on `train`, validating after every epoch and keeping the
/// parameters with the best validation accuracy.
pub fn train<M: Classifier>(
    model: &mut M,
    train: &[&Sample],
    val: &[&Sample],
    fold: &Fold,
    cfg: &TrainingConfig,
    exec: &impl Executor,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "fold {} has {} training and {} validation epochs",
            fold.index,
            train.len(),
            val.len()
        )));
    }
    let train_subjects: BTreeSet<&str> = train.iter().map(|s| s.subject.as_str()).collect();
    if let Some(s) = val.iter().find(|s| train_subjects.contains(s.subject.as_str())) {
        return Err(Error::Contract(format!(
            "subject {} appears in both training and validation of fold {}",
            s.subject, fold.index
        )));
    }
    let adam = cfg.adam();
    let mut state = AdamState::new(model.store());
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut records = Vec::new();
    let mut stopped = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded(derive(cfg.seed, &[0xe90c, fold.index as u64, epoch as u64])));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let seed = derive(cfg.seed, &[0xd809, fold.index as u64, epoch as u64, b as u64]);
            let (loss, grads) = match batch_gradient(model, &batch, seed, exec) {
                Ok(v) => v,
                Err(Error::NonFinite { context, .. }) => {
                    stopped = Some(format!("non-finite {context} in epoch {}", epoch + 1));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss * batch.len() as f64;
            adam_step(model.store_mut(), &grads, &mut state, &adam)?;
        }
        let ev = evaluate(model, val, exec)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            val_loss: ev.loss,
            val_accuracy: ev.metrics.accuracy,
            val_macro_f1: ev.metrics.macro_f1,
            val_kappa: ev.metrics.kappa,
        };
        on_epoch(&rec);
        if best.as_ref().is_none_or(|(_, acc, _)| rec.val_accuracy > *acc) {
            best = Some((epoch + 1, rec.val_accuracy, model.store().clone()));
        }
        records.push(rec);
    }
    let (best_epoch, best_val_accuracy) = match best {
        Some((e, acc, store)) => {
            model.store_mut().load_from(&store)?;
            (e, acc)
        }
        None => (0, 0.0),
    };
    Ok(TrainReport {
        fold: fold.index,
        train_subjects: fold.train.clone(),
        val_subjects: fold.val.clone(),
        records,
        best_epoch,
        best_val_accuracy,
        stopped,
    })
}

/// Result of one cross-validation fold of the stage model.
#[derive(Clone, Debug)]
pub struct FoldResult {
    pub model: StageModel,
    pub report: TrainReport,
    pub evaluation: Evaluation,
}

/// Fits input normalization on the fold's training epochs, builds a model
/// seeded by the fold, trains it and evaluates the kept parameters.
pub fn run_stage_fold(
    model_cfg: &StageModelConfig,
    train_cfg: &TrainingConfig,
    samples: &[Sample],
    fold: &Fold,
    exec: &impl Executor,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<FoldResult> {
    let (tr, va) = split_fold(samples, fold);
    if tr.is_empty() || va.is_empty() {
        return Err(Error::Config(format!(
            "fold {} has {} training and {} validation epochs",
            fold.index,
            tr.len(),
            va.len()
        )));
    }
    let mut model = build_stage_model(model_cfg, derive(train_cfg.seed, &[0x30de1, fold.index as u64]))?;
    model.set_normalization(&ChannelNorm::fit(tr.iter().map(|s| &s.input))?)?;
    let report = train(&mut model, &tr, &va, fold, train_cfg, exec, on_epoch)?;
    let evaluation = evaluate(&model, &va, exec)?;
    Ok(FoldResult {
        model,
        report,
        evaluation,
    })
}

/// Mean of each headline metric over folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub folds: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: f64,
    pub per_class_f1: Vec<f64>,
}

pub fn aggregate(bundles: &[MetricBundle]) -> Result<Aggregate> {
    let n = bundles.len();
    if n == 0 {
        return Err(Error::Contract("no folds to aggregate".into()));
    }
    let k = bundles[0].f1.len();
    if bundles.iter().any(|b| b.f1.len() != k) {
        return Err(crate::dim_err!("folds disagree on the number of classes"));
    }
    let mean = |f: &dyn Fn(&MetricBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n as f64;
    Ok(Aggregate {
        folds: n,
        accuracy: mean(&|b| b.accuracy),
        macro_f1: mean(&|b| b.macro_f1),
        kappa: mean(&|b| b.kappa),
        per_class_f1: (0..k).map(|c| mean(&|b| b.f1[c])).collect(),
    })
}

/// Share of the training side held out for checkpoint selection in the
/// health task.
pub const HEALTH_SELECTION_SHARE: f64 = 0.2;

/// One train/test split of the health task.
#[derive(Clone, Debug)]
pub struct HealthRun {
    pub ratio: f64,
    pub model: HealthModel,
    pub report: TrainReport,
    pub test_subjects: Vec<String>,
    pub evaluation: Evaluation,
    /// ROC of the unhealthy-class probability.
    pub roc: RocCurve,
}

/// Encodes labelled nights as health-model samples.
pub fn health_samples(nights: &[Hypnogram], max_cycles: usize) -> Result<Vec<Sample>> {
    nights
        .iter()
        .map(|h| {
            let label = h
                .health
                .ok_or_else(|| Error::Config(format!("night {} has no health label", h.subject)))?;
            Ok(Sample {
                input: encode_health_input(h, max_cycles),
                label: label.index(),
                subject: h.subject.clone(),
            })
        })
        .collect()
}

/// Stratified `ratio` train/test split of labelled nights. The training
/// side is split again to select the checkpoint; the test side is only
/// used for the final evaluation.
pub fn run_health_split(
    model_cfg: &HealthModelConfig,
    train_cfg: &TrainingConfig,
    nights: &[Hypnogram],
    ratio: f64,
    exec: &impl Executor,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<HealthRun> {
    let samples = health_samples(nights, model_cfg.max_cycles)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let key = ratio.to_bits();
    let (train_idx, test_idx) = stratified_split(&labels, ratio, derive(train_cfg.seed, &[0x4ea5, key]))?;
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let (fit_pos, sel_pos) = stratified_split(
        &train_labels,
        1.0 - HEALTH_SELECTION_SHARE,
        derive(train_cfg.seed, &[0x4ea6, key]),
    )?;
    let fit: Vec<&Sample> = fit_pos.iter().map(|&p| &samples[train_idx[p]]).collect();
    let sel: Vec<&Sample> = sel_pos.iter().map(|&p| &samples[train_idx[p]]).collect();
    let test: Vec<&Sample> = test_idx.iter().map(|&i| &samples[i]).collect();
    if fit.is_empty() || sel.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "ratio {ratio} leaves {} training, {} selection and {} test nights",
            fit.len(),
            sel.len(),
            test.len()
        )));
    }
    let fold = Fold {
        index: 0,
        train: fit.iter().map(|s| s.subject.clone()).collect(),
        val: sel.iter().map(|s| s.subject.clone()).collect(),
    };
    let mut model = build_health_model(model_cfg, derive(train_cfg.seed, &[0x4ea7, key]))?;
    let report = train(&mut model, &fit, &sel, &fold, train_cfg, exec, on_epoch)?;
    let evaluation = evaluate(&model, &test, exec)?;
    let scores: Vec<f64> = evaluation.probabilities.iter().map(|p| p[1]).collect();
    let positive: Vec<bool> = evaluation.labels.iter().map(|&l| l == 1).collect();
    let roc = roc_auc(&scores, &positive)?;
    Ok(HealthRun {
        ratio,
        model,
        report,
        test_subjects: test.iter().map(|s| s.subject.clone()).collect(),
        evaluation,
        roc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sequential;
    use crate::tensor::Tensor;
    use alloc::string::ToString;
    use alloc::vec;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| alloc::format!("s{i}")).collect()
    }

    #[test]
    fn kfold_sizes() {
        let p = subject_kfold(&ids(10), 10, 1).unwrap();
        assert!(p.folds.iter().all(|f| f.val.len() == 1 && f.train.len() == 9));
        let p = subject_kfold(&ids(50), 25, 1).unwrap();
        assert!(p.folds.iter().all(|f| f.val.len() == 2 && f.train.len() == 48));
        assert!(matches!(subject_kfold(&ids(3), 4, 0), Err(Error::Config(_))));
        let mut dup = ids(4);
        dup[3] = "s0".to_string();
        assert!(subject_kfold(&dup, 2, 0).is_err());
        assert_eq!(subject_kfold(&ids(9), 4, 5), subject_kfold(&ids(9), 4, 5));
        assert_ne!(subject_kfold(&ids(9), 4, 5), subject_kfold(&ids(9), 4, 6));
    }

    #[test]
    fn stratified_keeps_proportions() {
        let labels: Vec<usize> = (0..210).map(|i| usize::from(i >= 110)).collect();
        let (tr, te) = stratified_split(&labels, 0.9, 3).unwrap();
        assert_eq!(tr.len() + te.len(), 210);
        assert_eq!(tr.iter().filter(|&&i| labels[i] == 0).count(), 99);
        assert_eq!(tr.iter().filter(|&&i| labels[i] == 1).count(), 90);
        assert!(stratified_split(&labels, 1.0, 0).is_err());
    }

    #[test]
    fn aggregate_means() {
        let mk = |acc: f64| MetricBundle {
            accuracy: acc,
            precision: vec![],
            recall: vec![],
            f1: vec![acc],
            macro_f1: acc,
            kappa: acc,
            p_o: acc,
            p_e: 0.0,
            support: vec![],
            undefined: vec![],
        };
        let a = aggregate(&[mk(0.8), mk(0.9)]).unwrap();
        assert!((a.accuracy - 0.85).abs() < 1e-15);
        assert_eq!(aggregate(&[mk(0.8)]).unwrap().accuracy, 0.8);
    }

    fn toy_health_samples() -> Vec<Sample> {
        // Class 0: mostly stage row 0; class 1: mostly stage row 2.
        (0..16)
            .map(|i| {
                let mut x = Tensor::zeros(&[6, 20]);
                let label = i % 2;
                for t in 0..10 + i % 5 {
                    let stage = if (t + i) % 4 == 0 { 4 } else { 2 * label };
                    x.data_mut()[stage * 20 + t] = 1.0;
                    x.data_mut()[5 * 20 + t] = 1.0;
                }
                Sample {
                    input: x,
                    label,
                    subject: alloc::format!("h{i}"),
                }
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let cfg = HealthModelConfig {
            max_cycles: 20,
            d_model: 4,
            state_dim: 2,
            ..HealthModelConfig::default()
        };
        let samples = toy_health_samples();
        let fold = Fold {
            index: 0,
            train: (0..12).map(|i| alloc::format!("h{i}")).collect(),
            val: (12..16).map(|i| alloc::format!("h{i}")).collect(),
        };
        let (tr, va) = split_fold(&samples, &fold);
        let tcfg = TrainingConfig {
            epochs: 2,
            batch_size: 4,
            lr: 0.01,
            ..TrainingConfig::default()
        };
        let run = || {
            let mut m = build_health_model(&cfg, 1).unwrap();
            train(&mut m, &tr, &va, &fold, &tcfg, &Sequential, |_| {}).unwrap()
        };
        let a = run();
        assert!(a.records[1].train_loss < a.records[0].train_loss, "{:?}", a.records);
        assert_eq!(a, run());

        let bad = Fold {
            index: 1,
            train: fold.train.clone(),
            val: vec![],
        };
        let mut m = build_health_model(&cfg, 1).unwrap();
        assert!(matches!(
            train(&mut m, &tr, &[], &bad, &tcfg, &Sequential, |_| {}),
            Err(Error::Config(_))
        ));
        let leak: Vec<&Sample> = vec![tr[0]];
        assert!(matches!(
            train(&mut m, &tr, &leak, &fold, &tcfg, &Sequential, |_| {}),
            Err(Error::Contract(_))
        ));
    }
}
