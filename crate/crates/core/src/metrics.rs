//! Confusion matrices, the metric bundle derived from them, ROC analysis
//! and hypnogram comparison plots.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Hypnogram, StageLabel};
use crate::error::{Error, Result};

/// `K×K` counts, rows are true classes and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(crate::dim_err!("confusion matrix rows must all have length {}", k));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.k + p]
    }

    pub fn record(&mut self, t: usize, p: usize) -> Result<()> {
        for (what, v) in [("true label", t), ("predicted label", p)] {
            if v >= self.k {
                return Err(Error::Index {
                    what,
                    index: v,
                    bound: self.k,
                });
            }
        }
        self.counts[t * self.k + p] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(crate::dim_err!("cannot merge {}-class and {}-class matrices", self.k, other.k));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, t: usize) -> u64 {
        (0..self.k).map(|p| self.get(t, p)).sum()
    }

    pub fn col_sum(&self, p: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, p)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }
}

/// Counts `(true, pred)` pairs into a `k`-class matrix.
pub fn confusion(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(crate::dim_err!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        ));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t >= k || p >= k {
            return Err(Error::Index {
                what: if t >= k { "true label at position" } else { "predicted label at position" },
                index: i,
                bound: truth.len(),
            });
        }
        cm.counts[t * k + p] += 1;
    }
    Ok(cm)
}

/// A metric whose denominator was zero and was reported as 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedMetric {
    pub metric: String,
    pub class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    pub kappa: f64,
    pub p_o: f64,
    pub p_e: f64,
    pub support: Vec<u64>,
    pub undefined: Vec<UndefinedMetric>,
}

fn ratio(num: f64, den: f64, metric: &str, class: Option<usize>, flags: &mut Vec<UndefinedMetric>) -> f64 {
    if den == 0.0 {
        flags.push(UndefinedMetric {
            metric: metric.to_string(),
            class,
        });
        0.0
    } else {
        num / den
    }
}

/// One-vs-rest precision/recall/F1 per class, accuracy, macro-F1 and
/// Cohen's kappa.
pub fn bundle(cm: &ConfusionMatrix) -> Result<MetricBundle> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Contract("metrics of an empty confusion matrix".into()));
    }
    let nf = n as f64;
    let k = cm.classes();
    let mut flags = Vec::new();
    let (mut precision, mut recall, mut f1, mut support) = (vec![], vec![], vec![], vec![]);
    for c in 0..k {
        let tp = cm.get(c, c) as f64;
        let row = cm.row_sum(c) as f64;
        let col = cm.col_sum(c) as f64;
        let p = ratio(tp, col, "precision", Some(c), &mut flags);
        let r = ratio(tp, row, "recall", Some(c), &mut flags);
        let f = if p + r == 0.0 {
            flags.push(UndefinedMetric {
                metric: "f1".into(),
                class: Some(c),
            });
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        precision.push(p);
        recall.push(r);
        f1.push(f);
        support.push(cm.row_sum(c));
    }
    let p_o = cm.trace() as f64 / nf;
    let p_e = (0..k)
        .map(|c| cm.row_sum(c) as f64 * cm.col_sum(c) as f64)
        .sum::<f64>()
        / (nf * nf);
    let kappa = ratio(p_o - p_e, 1.0 - p_e, "kappa", None, &mut flags);
    Ok(MetricBundle {
        accuracy: p_o,
        macro_f1: f1.iter().sum::<f64>() / k as f64,
        precision,
        recall,
        f1,
        kappa,
        p_o,
        p_e,
        support,
        undefined: flags,
    })
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve over every unique score (predict positive when
/// `score >= threshold`) and its trapezoidal area. Tied scores move the
/// curve diagonally, which gives them half credit.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(crate::dim_err!("{} scores but {} labels", scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "roc scores".into(),
            index: i,
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined(alloc::format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Starts above every score, so no sample is called positive.
    let mut points = vec![RocPoint {
        threshold: scores[order[0]] + 1.0,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = points.last().expect("non-empty");
        let (fpr, tpr) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (fpr - prev.fpr) * (tpr + prev.tpr) / 2.0;
        points.push(RocPoint {
            threshold: s,
            fpr,
            tpr,
        });
    }
    Ok(RocCurve { points, auc })
}

/// Vertical position of a stage in hypnogram plots, top to bottom.
fn plot_level(s: StageLabel) -> usize {
    match s {
        StageLabel::W => 0,
        StageLabel::Rem => 1,
        StageLabel::N1 => 2,
        StageLabel::N2 => 3,
        StageLabel::N3 => 4,
    }
}

const PLOT_ORDER: [StageLabel; 5] = [
    StageLabel::W,
    StageLabel::Rem,
    StageLabel::N1,
    StageLabel::N2,
    StageLabel::N3,
];

#[derive(Clone, Debug, PartialEq)]
pub struct HypnogramPlot {
    pub svg: String,
    pub text: String,
    /// Maximal runs of disagreeing epochs as `(start, len)`.
    pub disagreements: Vec<(usize, usize)>,
}

/// Two-track step plot of an expert and a predicted hypnogram with the
/// disagreeing epochs tinted.
pub fn render_hypnogram(truth: &Hypnogram, pred: &Hypnogram) -> Result<HypnogramPlot> {
    let n = truth.len();
    if pred.len() != n {
        return Err(crate::dim_err!(
            "expert hypnogram has {} epochs, predicted has {}",
            n,
            pred.len()
        ));
    }
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        if truth.stages[i] != pred.stages[i] {
            match spans.last_mut() {
                Some((s, l)) if *s + *l == i => *l += 1,
                _ => spans.push((i, 1)),
            }
        }
    }

    const LEFT: f64 = 48.0;
    const WIDTH: f64 = 800.0;
    const ROW: f64 = 16.0;
    const TRACK: f64 = ROW * 5.0;
    const GAP: f64 = 28.0;
    let step = if n == 0 { 0.0 } else { WIDTH / n as f64 };
    let tops = [GAP, GAP * 2.0 + TRACK];
    let height = tops[1] + TRACK + 12.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="monospace" font-size="11">"#,
        LEFT + WIDTH + 12.0,
        height
    );
    for &(s, l) in &spans {
        let _ = writeln!(
            svg,
            r##"<rect class="diff" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#f4a6a6" fill-opacity="0.6"/>"##,
            LEFT + s as f64 * step,
            tops[0],
            l as f64 * step,
            tops[1] + TRACK - tops[0]
        );
    }
    for (track, (h, title)) in [(truth, "expert"), (pred, "predicted")].into_iter().enumerate() {
        let top = tops[track];
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}">{title}</text>"#, LEFT, top - 8.0);
        for (lvl, s) in PLOT_ORDER.iter().enumerate() {
            let _ = writeln!(
                svg,
                r#"<text x="4" y="{:.2}">{}</text>"#,
                top + lvl as f64 * ROW + ROW * 0.5 + 4.0,
                s.name()
            );
        }
        let mut pts = String::new();
        for (i, &s) in h.stages.iter().enumerate() {
            let y = top + plot_level(s) as f64 * ROW + ROW * 0.5;
            let x0 = LEFT + i as f64 * step;
            let _ = write!(pts, "{:.2},{:.2} {:.2},{:.2} ", x0, y, x0 + step, y);
        }
        let _ = writeln!(
            svg,
            r##"<polyline fill="none" stroke="#1f3a93" stroke-width="1.5" points="{}"/>"##,
            pts.trim_end()
        );
    }
    svg.push_str("</svg>\n");

    let mut text = String::new();
    for (h, title) in [(truth, "expert"), (pred, "predicted")] {
        let _ = writeln!(text, "{title}");
        for s in PLOT_ORDER {
            let _ = write!(text, "{:<4}|", s.name());
            for &x in &h.stages {
                text.push(if x == s { '#' } else { ' ' });
            }
            text.push('\n');
        }
    }
    let _ = write!(text, "diff|");
    for i in 0..n {
        text.push(if truth.stages[i] != pred.stages[i] { '^' } else { ' ' });
    }
    text.push('\n');

    Ok(HypnogramPlot {
        svg,
        text,
        disagreements: spans,
    })
}

/// Column header names for `k` classes: stage names for five classes,
/// indices otherwise.
pub fn class_names(k: usize) -> Vec<String> {
    if k == StageLabel::COUNT {
        StageLabel::ALL.iter().map(|s| s.name().to_string()).collect()
    } else {
        (0..k).map(|i| alloc::format!("C{i}")).collect()
    }
}

/// Aligned plain-text table: one row per labelled bundle with ACC, F1,
/// Kappa and per-class F1.
pub fn format_table(rows: &[(String, MetricBundle)]) -> String {
    let k = rows.first().map_or(StageLabel::COUNT, |(_, b)| b.f1.len());
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}  {:>6} {:>6} {:>6}", "Model", "ACC", "F1", "Kappa");
    for name in class_names(k) {
        let _ = write!(out, " {name:>6}");
    }
    out.push('\n');
    for (label, b) in rows {
        let _ = write!(
            out,
            "{label:<label_w$}  {:>6.3} {:>6.3} {:>6.3}",
            b.accuracy, b.macro_f1, b.kappa
        );
        for f in &b.f1 {
            let _ = write!(out, " {f:>6.3}");
        }
        out.push('\n');
    }
    out
}
