//! Pixel-level scoring of splice maps against ground-truth masks.

use std::fmt::Write as _;

use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::otsu_threshold;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_dims<A, B>(a: &ArrayView2<A>, b: &ArrayView2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("map is {:?}, mask is {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

pub fn confusion(pred: ArrayView2<bool>, truth: ArrayView2<bool>) -> Result<ConfusionCounts> {
    check_dims(&pred, &truth)?;
    let mut c = ConfusionCounts::default();
    Zip::from(&pred).and(&truth).for_each(|&p, &t| match (p, t) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, false) => c.tn += 1,
        (false, true) => c.fn_ += 1,
    });
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`, zero when undefined.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / den as f64
    }
}

/// Matthews correlation, zero when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        0.0
    } else {
        ((tp * tn - fp * fn_) / den.sqrt()).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    F1,
    Mcc,
}

impl Metric {
    pub fn score(self, c: &ConfusionCounts) -> f64 {
        match self {
            Metric::F1 => f1(c),
            Metric::Mcc => mcc(c),
        }
    }
}

fn class_counts(truth: &ArrayView2<bool>) -> Result<(u64, u64)> {
    let pos = truth.iter().filter(|&&t| t).count() as u64;
    let neg = truth.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined);
    }
    Ok((pos, neg))
}

/// Sorted `(score, is_positive)` pairs, ascending by score.
fn sorted_pairs(scores: &ArrayView2<f64>, truth: &ArrayView2<bool>) -> Result<Vec<(f64, bool)>> {
    let mut v: Vec<(f64, bool)> = scores.iter().copied().zip(truth.iter().copied()).collect();
    if v.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::Domain("non-finite score".into()));
    }
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(v)
}

/// Mann-Whitney AUC with midranks for ties.
pub fn roc_auc(scores: ArrayView2<f64>, truth: ArrayView2<bool>) -> Result<f64> {
    check_dims(&scores, &truth)?;
    let (pos, neg) = class_counts(&truth)?;
    let v = sorted_pairs(&scores, &truth)?;
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * v[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok((u / (pos as f64 * neg as f64)).clamp(0.0, 1.0))
}

/// Best threshold for `metric` over every cut between distinct map values,
/// plus the all-spliced and none-spliced cuts just outside the value range.
/// Pixels strictly above the threshold are predicted spliced; ties in score
/// keep the lowest threshold.
pub fn optimal_threshold(scores: ArrayView2<f64>, truth: ArrayView2<bool>, metric: Metric) -> Result<(f64, f64)> {
    check_dims(&scores, &truth)?;
    let (pos, neg) = class_counts(&truth)?;
    let v = sorted_pairs(&scores, &truth)?;
    // start with everything predicted spliced and move the cut upwards
    let mut c = ConfusionCounts {
        tp: pos,
        fp: neg,
        tn: 0,
        fn_: 0,
    };
    let mut best = (v[0].0 - 0.5, metric.score(&c));
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            if v[j].1 {
                c.tp -= 1;
                c.fn_ += 1;
            } else {
                c.fp -= 1;
                c.tn += 1;
            }
            j += 1;
        }
        let t = if j < v.len() { 0.5 * (v[i].0 + v[j].0) } else { v[i].0 + 0.5 };
        let s = metric.score(&c);
        if s > best.1 {
            best = (t, s);
        }
        i = j;
    }
    Ok(best)
}

pub fn score_at(scores: ArrayView2<f64>, truth: ArrayView2<bool>, threshold: f64, metric: Metric) -> Result<f64> {
    let pred = scores.mapv(|s| s > threshold);
    Ok(metric.score(&confusion(pred.view(), truth)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub f1_optimal: f64,
    pub f1_threshold: f64,
    pub mcc_optimal: f64,
    pub mcc_threshold: f64,
    pub f1_otsu: f64,
    pub mcc_otsu: f64,
    /// `None` when the map is flat; the Otsu row then predicts nothing spliced.
    pub otsu_threshold: Option<f64>,
    pub auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub f1_optimal: f64,
    pub f1_otsu: f64,
    pub mcc_optimal: f64,
    pub mcc_otsu: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCase {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub images: Vec<ImageScore>,
    pub mean: Aggregate,
    pub skipped: Vec<SkippedCase>,
}

pub struct EvalCase<'a> {
    pub id: String,
    pub map: ArrayView2<'a, f64>,
    pub truth: ArrayView2<'a, bool>,
}

pub fn score_image(id: &str, map: ArrayView2<f64>, truth: ArrayView2<bool>) -> Result<ImageScore> {
    let (f1_threshold, f1_optimal) = optimal_threshold(map, truth, Metric::F1)?;
    let (mcc_threshold, mcc_optimal) = optimal_threshold(map, truth, Metric::Mcc)?;
    let auc = roc_auc(map, truth)?;
    let otsu = match otsu_threshold(map) {
        Ok(t) => Some(t),
        Err(Error::DegenerateHistogram) => None,
        Err(e) => return Err(e),
    };
    let t = otsu.unwrap_or(f64::INFINITY);
    Ok(ImageScore {
        id: id.to_string(),
        f1_optimal,
        f1_threshold,
        mcc_optimal,
        mcc_threshold,
        f1_otsu: score_at(map, truth, t, Metric::F1)?,
        mcc_otsu: score_at(map, truth, t, Metric::Mcc)?,
        otsu_threshold: otsu,
        auc,
    })
}

/// Scores every case and averages per image. Cases failing a precondition
/// are logged and skipped; an error is returned only if none remain.
pub fn evaluate_dataset(cases: &[EvalCase]) -> Result<ScoreReport> {
    if cases.is_empty() {
        return Err(Error::Empty("no cases to evaluate".into()));
    }
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for case in cases {
        match score_image(&case.id, case.map, case.truth) {
            Ok(s) => images.push(s),
            Err(e) => {
                log::warn!("skipping {}: {e}", case.id);
                skipped.push(SkippedCase {
                    id: case.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Empty("every case was skipped".into()));
    }
    let n = images.len() as f64;
    let mean_of = |f: fn(&ImageScore) -> f64| images.iter().map(f).sum::<f64>() / n;
    let mean = Aggregate {
        f1_optimal: mean_of(|s| s.f1_optimal),
        f1_otsu: mean_of(|s| s.f1_otsu),
        mcc_optimal: mean_of(|s| s.mcc_optimal),
        mcc_otsu: mean_of(|s| s.mcc_otsu),
        auc: mean_of(|s| s.auc),
    };
    Ok(ScoreReport { images, mean, skipped })
}

impl ScoreReport {
    /// Plain-text table with one optimal and one Otsu row.
    pub fn table(&self, label: &str) -> String {
        let m = &self.mean;
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:<9} {:>7} {:>7} {:>7}", label, "threshold", "F1", "MCC", "AUC");
        let _ = writeln!(out, "{:<12} {:<9} {:>7.4} {:>7.4} {:>7.4}", "", "optimal", m.f1_optimal, m.mcc_optimal, m.auc);
        let _ = writeln!(out, "{:<12} {:<9} {:>7.4} {:>7.4} {:>7}", "", "otsu", m.f1_otsu, m.mcc_otsu, "-");
        let _ = writeln!(out, "images scored: {}, skipped: {}", self.images.len(), self.skipped.len());
        out
    }
}
