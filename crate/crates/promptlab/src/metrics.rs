//! Confusion-matrix metrics, bootstrap standard errors and confidence
//! intervals, and paired significance tests between prompt variants.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::promptkit::ParseOutcome;
use crate::util;

/// How parse failures are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Treat a failure as a negative prediction (keeps n constant).
    CountAsNegative,
    /// Exclude the item from the counts and tally it separately.
    CountAsError,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub true_negatives: u64,
    pub parse_failures: u64,
}

impl ConfusionMatrix {
    pub fn counted(&self) -> u64 {
        self.true_positives + self.false_positives + self.false_negatives + self.true_negatives
    }

    pub fn total(&self) -> u64 {
        self.counted() + self.parse_failures
    }

    fn add(&mut self, outcome: ParseOutcome, gold: Label, policy: FailurePolicy) {
        let predicted = match outcome.label() {
            Some(label) => label,
            None => match policy {
                FailurePolicy::CountAsNegative => Label::Negative,
                FailurePolicy::CountAsError => {
                    self.parse_failures += 1;
                    return;
                }
            },
        };
        match (predicted, gold) {
            (Label::Positive, Label::Positive) => self.true_positives += 1,
            (Label::Positive, Label::Negative) => self.false_positives += 1,
            (Label::Negative, Label::Positive) => self.false_negatives += 1,
            (Label::Negative, Label::Negative) => self.true_negatives += 1,
        }
    }
}

/// Accuracy, precision, recall and F1. `None` marks an undefined metric
/// (zero denominator); callers that need a number for aggregation use the
/// documented fallback of 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl MetricSet {
    pub fn get(&self, kind: MetricKind) -> Option<f64> {
        match kind {
            MetricKind::Accuracy => self.accuracy,
            MetricKind::Precision => self.precision,
            MetricKind::Recall => self.recall,
            MetricKind::F1 => self.f1,
        }
    }

    /// F1 with the fallback of 0 for the undefined case.
    pub fn f1_or_zero(&self) -> f64 {
        self.f1.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Precision,
    Recall,
    F1,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::Accuracy,
        MetricKind::Precision,
        MetricKind::Recall,
        MetricKind::F1,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Precision => "precision",
            MetricKind::Recall => "recall",
            MetricKind::F1 => "f1",
        }
    }
}

/// Count the 2x2 table from aligned predictions and gold labels.
pub fn confusion(
    predictions: &[ParseOutcome],
    golds: &[Label],
    policy: FailurePolicy,
) -> Result<ConfusionMatrix> {
    if predictions.len() != golds.len() {
        return Err(Error::Arity {
            left: predictions.len(),
            right: golds.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (outcome, gold) in predictions.iter().zip(golds) {
        cm.add(*outcome, *gold, policy);
    }
    Ok(cm)
}

fn metric_value(cm: &ConfusionMatrix, kind: MetricKind) -> Option<f64> {
    let tp = cm.true_positives as f64;
    let fp = cm.false_positives as f64;
    let fn_ = cm.false_negatives as f64;
    let tn = cm.true_negatives as f64;
    let ratio = |num: f64, den: f64| if den > 0.0 { Some(num / den) } else { None };
    match kind {
        MetricKind::Accuracy => ratio(tp + tn, tp + tn + fp + fn_),
        MetricKind::Precision => ratio(tp, tp + fp),
        MetricKind::Recall => ratio(tp, tp + fn_),
        MetricKind::F1 => ratio(2.0 * tp, 2.0 * tp + fp + fn_),
    }
}

/// All four metrics from a confusion matrix.
pub fn metric_set(cm: &ConfusionMatrix) -> Result<MetricSet> {
    if cm.counted() == 0 {
        return Err(Error::DegenerateInput(
            "confusion matrix has no counted items".into(),
        ));
    }
    Ok(MetricSet {
        accuracy: metric_value(cm, MetricKind::Accuracy),
        precision: metric_value(cm, MetricKind::Precision),
        recall: metric_value(cm, MetricKind::Recall),
        f1: metric_value(cm, MetricKind::F1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// Empirical 2.5th/97.5th percentiles of the resample distribution.
    Percentile,
    /// Normal approximation: point +/- 1.96 * se.
    Normal,
}

/// Bootstrap summary for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub metric: MetricKind,
    pub point: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: u64,
    pub skipped: u64,
    pub seed: u64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lower = pos.floor() as usize;
    let upper = pos.ceil() as usize;
    if lower == upper {
        sorted[lower]
    } else {
        let weight = pos - lower as f64;
        sorted[lower] * (1.0 - weight) + sorted[upper] * weight
    }
}

fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

fn resample_metric(
    predictions: &[ParseOutcome],
    golds: &[Label],
    indices: &[usize],
    policy: FailurePolicy,
    metric: MetricKind,
) -> Option<f64> {
    let mut cm = ConfusionMatrix::default();
    for &i in indices {
        cm.add(predictions[i], golds[i], policy);
    }
    if cm.counted() == 0 {
        return None;
    }
    metric_value(&cm, metric)
}

/// Per-resample seeds are derived from the base seed so the loop could run
/// on any number of workers without changing the result.
fn resample_indices(seed: u64, resample: u64, n: usize) -> Vec<usize> {
    let mut rng = util::rng(util::derive_seed(seed, &format!("resample/{resample}")));
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Nonparametric bootstrap of one metric: resample items with replacement,
/// recompute the metric, and summarize the distribution. Undefined resamples
/// are skipped and their count reported.
pub fn bootstrap_with(
    predictions: &[ParseOutcome],
    golds: &[Label],
    policy: FailurePolicy,
    metric: MetricKind,
    resamples: u64,
    seed: u64,
    ci_method: CiMethod,
) -> Result<BootstrapSummary> {
    if predictions.len() != golds.len() {
        return Err(Error::Arity {
            left: predictions.len(),
            right: golds.len(),
        });
    }
    if predictions.len() < 2 {
        return Err(Error::InsufficientData(
            "bootstrap requires at least 2 items".into(),
        ));
    }
    if resamples == 0 {
        return Err(Error::Configuration("resamples must be >= 1".into()));
    }

    let full = confusion(predictions, golds, policy)?;
    let point = metric_set(&full)?.get(metric).unwrap_or(0.0);

    let n = predictions.len();
    let mut values = Vec::with_capacity(resamples as usize);
    let mut skipped = 0u64;
    for r in 0..resamples {
        let indices = resample_indices(seed, r, n);
        match resample_metric(predictions, golds, &indices, policy, metric) {
            Some(v) => values.push(v),
            None => skipped += 1,
        }
    }
    if values.is_empty() {
        return Err(Error::DegenerateDistribution(format!(
            "all {resamples} resamples were undefined for {}",
            metric.name()
        )));
    }

    let se = sample_sd(&values);
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (ci_low, ci_high) = match ci_method {
        CiMethod::Percentile => (percentile(&values, 0.025), percentile(&values, 0.975)),
        CiMethod::Normal => (point - 1.96 * se, point + 1.96 * se),
    };

    Ok(BootstrapSummary {
        metric,
        point,
        se,
        ci_low,
        ci_high,
        resamples,
        skipped,
        seed,
    })
}

/// [`bootstrap_with`] using the default percentile interval.
pub fn bootstrap(
    predictions: &[ParseOutcome],
    golds: &[Label],
    policy: FailurePolicy,
    metric: MetricKind,
    resamples: u64,
    seed: u64,
) -> Result<BootstrapSummary> {
    bootstrap_with(
        predictions,
        golds,
        policy,
        metric,
        resamples,
        seed,
        CiMethod::Percentile,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stars {
    None,
    One,
    Two,
    Three,
}

impl Stars {
    /// Thresholds: * p<0.10, ** p<0.05, *** p<0.01.
    pub fn from_p(p: f64) -> Stars {
        if p < 0.01 {
            Stars::Three
        } else if p < 0.05 {
            Stars::Two
        } else if p < 0.10 {
            Stars::One
        } else {
            Stars::None
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stars::None => "",
            Stars::One => "*",
            Stars::Two => "**",
            Stars::Three => "***",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub metric: MetricKind,
    /// Point difference, metric A minus metric B.
    pub delta: f64,
    pub p_value: f64,
    pub stars: Stars,
    pub resamples: u64,
    pub skipped: u64,
    pub seed: u64,
}

/// Shared-index paired bootstrap between two systems scored on the same
/// items. Two-sided p is twice the smaller tail of the delta distribution.
pub fn paired_test(
    predictions_a: &[ParseOutcome],
    predictions_b: &[ParseOutcome],
    golds: &[Label],
    policy: FailurePolicy,
    metric: MetricKind,
    resamples: u64,
    seed: u64,
) -> Result<PairedTestResult> {
    if predictions_a.len() != golds.len() {
        return Err(Error::Arity {
            left: predictions_a.len(),
            right: golds.len(),
        });
    }
    if predictions_b.len() != golds.len() {
        return Err(Error::Arity {
            left: predictions_b.len(),
            right: golds.len(),
        });
    }
    if golds.len() < 2 {
        return Err(Error::InsufficientData(
            "paired test requires at least 2 items".into(),
        ));
    }
    if resamples == 0 {
        return Err(Error::Configuration("resamples must be >= 1".into()));
    }

    let full_a = metric_set(&confusion(predictions_a, golds, policy)?)?
        .get(metric)
        .unwrap_or(0.0);
    let full_b = metric_set(&confusion(predictions_b, golds, policy)?)?
        .get(metric)
        .unwrap_or(0.0);

    let n = golds.len();
    let mut deltas = Vec::with_capacity(resamples as usize);
    let mut skipped = 0u64;
    for r in 0..resamples {
        let indices = resample_indices(seed, r, n);
        let a = resample_metric(predictions_a, golds, &indices, policy, metric);
        let b = resample_metric(predictions_b, golds, &indices, policy, metric);
        match (a, b) {
            (Some(a), Some(b)) => deltas.push(a - b),
            _ => skipped += 1,
        }
    }
    if deltas.is_empty() {
        return Err(Error::DegenerateDistribution(format!(
            "all {resamples} paired resamples were undefined for {}",
            metric.name()
        )));
    }

    let m = deltas.len() as f64;
    let le_zero = deltas.iter().filter(|d| **d <= 0.0).count() as f64 / m;
    let ge_zero = deltas.iter().filter(|d| **d >= 0.0).count() as f64 / m;
    let p_value = (2.0 * le_zero.min(ge_zero)).min(1.0);

    Ok(PairedTestResult {
        metric,
        delta: full_a - full_b,
        p_value,
        stars: Stars::from_p(p_value),
        resamples,
        skipped,
        seed,
    })
}

/// One evaluation of a prompt on a dataset: counts, metrics, and any
/// bootstrap or paired-test statistics attached later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bootstraps: BTreeMap<String, BootstrapSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired_vs_anchor: Option<PairedTestResult>,
}

impl EvalResult {
    pub fn from_counts(confusion: ConfusionMatrix) -> Result<EvalResult> {
        Ok(EvalResult {
            metrics: metric_set(&confusion)?,
            confusion,
            bootstraps: BTreeMap::new(),
            paired_vs_anchor: None,
        })
    }
}
