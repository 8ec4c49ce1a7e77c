use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Windows with `score < threshold` are predicted anomalous.
    pub fn at(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s < threshold, y != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

/// F1 from counts; 0 when undefined.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { what: "score", index });
    }
    Ok(())
}

fn has_both_classes(labels: &[u8]) -> bool {
    labels.iter().any(|&y| y != 0) && labels.iter().any(|&y| y == 0)
}

/// F1-maximizing threshold τ (anomalous iff score < τ) over midpoints of
/// consecutive distinct scores and ±∞. Ties go to the smallest τ.
pub fn select_threshold(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    check_inputs(scores, labels)?;
    if !has_both_classes(labels) {
        return Err(Error::ThresholdUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = labels.iter().filter(|&&y| y != 0).count();

    // τ = −∞ flags nothing
    let mut best = (f64::NEG_INFINITY, 0.0);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let tau = if k < order.len() {
            0.5 * (s + scores[order[k]])
        } else {
            f64::INFINITY
        };
        let f1 = f1_from_counts(tp, fp, positives - tp);
        if f1 > best.1 {
            best = (tau, f1);
        }
    }
    Ok(best)
}

/// Area under the ROC curve with anomalies as positives ranked by −score;
/// ties earn half credit.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    if !has_both_classes(labels) {
        return Err(Error::ThresholdUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // midranks of −score, ascending
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let start = k;
        while k < order.len() && scores[order[k]] == s {
            k += 1;
        }
        let mid = 0.5 * ((start + 1) + k) as f64;
        let pos_in_group = order[start..k].iter().filter(|&&i| labels[i] != 0).count();
        rank_sum += mid * pos_in_group as f64;
    }
    let n_pos = labels.iter().filter(|&&y| y != 0).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc_roc: f64,
    pub confusion: Confusion,
    /// Set when precision or recall had an empty denominator and was
    /// reported as 0.
    pub zero_division: bool,
}

pub fn classification_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Classification> {
    let auc = auc_roc(scores, labels)?;
    let c = Confusion::at(scores, labels, threshold);
    let ratio = |a: usize, b: usize| if a + b == 0 { None } else { Some(a as f64 / (a + b) as f64) };
    let precision = ratio(c.tp, c.fp);
    let recall = ratio(c.tp, c.fn_);
    Ok(Classification {
        precision: precision.unwrap_or(0.0),
        recall: recall.unwrap_or(0.0),
        f1: f1_from_counts(c.tp, c.fp, c.fn_),
        auc_roc: auc,
        confusion: c,
        zero_division: precision.is_none() || recall.is_none(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDelay {
    /// Mean delay over detected events; `None` when nothing was detected.
    pub add: Option<f64>,
    pub detected: usize,
    pub missed: usize,
}

/// Average detection delay for stride-1 windows of length `window`: window
/// i ends at i + window − 1. For each maximal run of anomalous timestamps
/// starting at t_s, the delay is t_d − t_s with t_d the earliest end of a
/// flagged window that ends at or after t_s and starts no later than the
/// run's last timestamp.
pub fn average_detection_delay(predictions: &[u8], labels: &[u8], window: usize) -> Result<DetectionDelay> {
    if window == 0 {
        return Err(Error::InvalidConfig("window length must be positive".into()));
    }
    let expected = labels.len().saturating_sub(window - 1);
    if predictions.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "window predictions",
            expected,
            got: predictions.len(),
        });
    }
    let events = crate::synthdata::events_from_labels(labels);
    let mut delays = Vec::new();
    let mut missed = 0;
    for (t_s, t_e) in events {
        let first = t_s.saturating_sub(window - 1);
        let last = t_e.min(predictions.len().saturating_sub(1));
        let hit = (first..=last)
            .filter(|&i| i < predictions.len())
            .find(|&i| predictions[i] != 0 && i + window - 1 >= t_s);
        match hit {
            Some(i) => delays.push((i + window - 1 - t_s) as f64),
            None => missed += 1,
        }
    }
    let detected = delays.len();
    Ok(DetectionDelay {
        add: if detected == 0 {
            None
        } else {
            Some(delays.iter().sum::<f64>() / detected as f64)
        },
        detected,
        missed,
    })
}
