//! Binary classification metrics: confusion counts, precision/recall/F1,
//! accuracy and the rank-statistic AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::contract(format!("label {bad} is not binary")));
    }
    Ok(())
}

/// Counts outcomes, predicting positive iff `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::contract("confusion needs at least one sample"));
    }
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Threshold metrics. A ratio with a zero denominator is 0 and flagged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub precision_degenerate: bool,
    pub recall_degenerate: bool,
    pub f1_degenerate: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn prf_accuracy(c: &Confusion) -> Prf {
    let (precision, precision_degenerate) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_degenerate) = ratio(c.tp, c.tp + c.fn_);
    // 2PR/(P+R) written in counts so it stays exact and needs no special case
    // when only one of P and R is defined
    let (f1, f1_degenerate) = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let (accuracy, _) = ratio(c.tp + c.tn, c.total());
    Prf {
        precision,
        recall,
        f1,
        accuracy,
        precision_degenerate,
        recall_degenerate,
        f1_degenerate,
    }
}

/// Exact Mann-Whitney statistic: twice the number of positive/negative pairs
/// won by the positive plus the number of ties, over twice the pair count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AucFraction {
    pub doubled_wins: u128,
    pub doubled_pairs: u128,
}

impl AucFraction {
    pub fn value(&self) -> f64 {
        self.doubled_wins as f64 / self.doubled_pairs as f64
    }
}

/// Rank-based AUC as an exact fraction, in `O(n log n)`.
pub fn auc_fraction(scores: &[f64], labels: &[u8]) -> Result<AucFraction> {
    check_inputs(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // walk tie groups in ascending score order, counting negatives strictly below
    let mut doubled_wins = 0u128;
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(AucFraction {
        doubled_wins,
        doubled_pairs: 2 * positives * negatives,
    })
}

pub fn auc_rank(scores: &[f64], labels: &[u8]) -> Result<f64> {
    auc_fraction(scores, labels).map(|f| f.value())
}

/// All five benchmark metrics for one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub threshold: f64,
    /// Names of metrics reported as 0 because they are undefined.
    pub degenerate: Vec<String>,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let c = confusion(scores, labels, threshold)?;
        let prf = prf_accuracy(&c);
        let mut degenerate = Vec::new();
        let auc = match auc_rank(scores, labels) {
            Ok(a) => a,
            Err(Error::UndefinedMetric(_)) => {
                degenerate.push("auc".to_string());
                0.0
            }
            Err(e) => return Err(e),
        };
        for (flag, name) in [
            (prf.f1_degenerate, "f1"),
            (prf.precision_degenerate, "precision"),
            (prf.recall_degenerate, "recall"),
        ] {
            if flag {
                degenerate.push(name.to_string());
            }
        }
        Ok(MetricsReport {
            accuracy: prf.accuracy,
            auc,
            f1: prf.f1,
            precision: prf.precision,
            recall: prf.recall,
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
            threshold,
            degenerate,
        })
    }

    /// Metric values in table column order: accuracy, AUC, F1, precision, recall.
    pub fn columns(&self) -> [(&'static str, f64); 5] {
        [
            ("accuracy", self.accuracy),
            ("auc", self.auc),
            ("f1", self.f1),
            ("precision", self.precision),
            ("recall", self.recall),
        ]
    }

    pub fn is_degenerate(&self, metric: &str) -> bool {
        self.degenerate.iter().any(|d| d == metric)
    }
}
