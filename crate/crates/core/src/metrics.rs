//! Multi-label evaluation: macro/micro AUC, macro/micro F1 and precision@k.
//!
//! Scores and labels are `docs × codes` matrices given as one row per document.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Average {
    Macro,
    Micro,
}

fn check_matrix<A, B>(scores: &[Vec<A>], labels: &[Vec<B>]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Empty("no documents to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("metrics", &[scores.len()], &[labels.len()]));
    }
    let width = scores[0].len();
    for (s, l) in scores.iter().zip(labels) {
        if s.len() != width || l.len() != width {
            return Err(Error::shape("metrics", &[s.len()], &[l.len()]));
        }
    }
    Ok(width)
}

/// Mann–Whitney AUC, `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`. `None` unless both classes occur.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Sum of positive ranks, counted in half-units so ties stay exact.
    let mut twice_rank_sum = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean (i + j + 2) / 2
        let twice_mean = (i + j + 2) as u64;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_mean * tied_pos;
        i = j + 1;
    }
    let pos = pos as u64;
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Some(twice_u as f64 / (2 * pos * neg as u64) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacroAuc {
    pub value: f64,
    /// Per-label AUC, `None` for labels with a single class.
    pub per_label: Vec<Option<f64>>,
    /// Indices of labels left out of the mean.
    pub excluded: Vec<usize>,
}

/// Mean AUC over labels that have both classes; single-class labels are
/// excluded and recorded.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MacroAuc> {
    let width = check_matrix(scores, labels)?;
    let per_label: Vec<Option<f64>> = (0..width)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
            binary_auc(&s, &l)
        })
        .collect();
    let excluded: Vec<usize> = per_label.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(i, _)| i).collect();
    let valid: Vec<f64> = per_label.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::invalid("macro AUC undefined: no label has both classes"));
    }
    Ok(MacroAuc {
        value: valid.iter().sum::<f64>() / valid.len() as f64,
        per_label,
        excluded,
    })
}

/// AUC over all (document, label) pairs pooled.
pub fn micro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64> {
    check_matrix(scores, labels)?;
    let s: Vec<f64> = scores.iter().flatten().copied().collect();
    let l: Vec<bool> = labels.iter().flatten().copied().collect();
    binary_auc(&s, &l).ok_or_else(|| Error::invalid("micro AUC undefined: pooled labels have a single class"))
}

pub fn auc(scores: &[Vec<f64>], labels: &[Vec<bool>], mode: Average) -> Result<f64> {
    match mode {
        Average::Macro => macro_auc(scores, labels).map(|m| m.value),
        Average::Micro => micro_auc(scores, labels),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// `2tp / (2tp + fp + fn)`, zero when undefined.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    fn add(&mut self, pred: bool, gold: bool) {
        match (pred, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }
}

pub fn label_counts(predictions: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<Vec<Counts>> {
    let width = check_matrix(predictions, labels)?;
    let mut counts = vec![Counts::default(); width];
    for (p, l) in predictions.iter().zip(labels) {
        for c in 0..width {
            counts[c].add(p[c], l[c]);
        }
    }
    Ok(counts)
}

/// F1 of thresholded predictions. Micro pools counts; macro averages
/// per-label F1 with `0/0 → 0`.
pub fn f1(predictions: &[Vec<bool>], labels: &[Vec<bool>], mode: Average) -> Result<f64> {
    let counts = label_counts(predictions, labels)?;
    Ok(match mode {
        Average::Micro => {
            let total = counts.iter().fold(Counts::default(), |a, c| Counts {
                tp: a.tp + c.tp,
                fp: a.fp + c.fp,
                fn_: a.fn_ + c.fn_,
            });
            total.f1()
        }
        Average::Macro => counts.iter().map(Counts::f1).sum::<f64>() / counts.len() as f64,
    })
}

/// Mean over documents of the gold fraction among the `k` top-scored codes
/// (ties broken by lower code index).
pub fn precision_at_k(scores: &[Vec<f64>], labels: &[Vec<bool>], k: usize) -> Result<f64> {
    let width = check_matrix(scores, labels)?;
    if k == 0 || k > width {
        return Err(Error::invalid(format!("precision@{k} needs 1 ≤ k ≤ {width}")));
    }
    let mut total = 0.0;
    for (s, l) in scores.iter().zip(labels) {
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        let hits = order[..k].iter().filter(|&&c| l[c]).count();
        total += hits as f64 / k as f64;
    }
    Ok(total / scores.len() as f64)
}

pub fn threshold_predictions(scores: &[Vec<f64>], threshold: f64) -> Vec<Vec<bool>> {
    scores.iter().map(|r| r.iter().map(|&p| p >= threshold).collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub code: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub support: usize,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_docs: usize,
    pub macro_auc: f64,
    pub micro_auc: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub p_at_k: BTreeMap<usize, f64>,
    pub threshold: f64,
    /// Codes with a single class in this split, left out of macro AUC.
    pub auc_excluded: Vec<String>,
    pub per_label: Vec<LabelReport>,
}

/// Full report for probabilities `scores` at `threshold`. Precision is
/// reported for each `k` in `ks` that does not exceed the code count.
pub fn evaluate(scores: &[Vec<f64>], labels: &[Vec<bool>], codes: &[String], threshold: f64, ks: &[usize]) -> Result<EvalReport> {
    let width = check_matrix(scores, labels)?;
    if codes.len() != width {
        return Err(Error::shape("evaluate", &[codes.len()], &[width]));
    }
    if scores.iter().flatten().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let macro_ = macro_auc(scores, labels)?;
    let micro_auc = micro_auc(scores, labels)?;
    let preds = threshold_predictions(scores, threshold);
    let counts = label_counts(&preds, labels)?;
    let mut p_at_k = BTreeMap::new();
    for &k in ks.iter().filter(|&&k| k >= 1 && k <= width) {
        p_at_k.insert(k, precision_at_k(scores, labels, k)?);
    }
    let per_label = codes
        .iter()
        .enumerate()
        .map(|(c, code)| LabelReport {
            code: code.clone(),
            tp: counts[c].tp,
            fp: counts[c].fp,
            fn_: counts[c].fn_,
            support: labels.iter().filter(|r| r[c]).count(),
            auc: macro_.per_label[c],
        })
        .collect();
    Ok(EvalReport {
        num_docs: scores.len(),
        macro_auc: macro_.value,
        micro_auc,
        macro_f1: f1(&preds, labels, Average::Macro)?,
        micro_f1: f1(&preds, labels, Average::Micro)?,
        p_at_k,
        threshold,
        auc_excluded: macro_.excluded.iter().map(|&i| codes[i].clone()).collect(),
        per_label,
    })
}

impl EvalReport {
    /// Aligned table in percent: AUC macro/micro, F1 macro/micro, P@k.
    pub fn table(&self) -> String {
        let mut head1 = format!("{:<10}{:>8}{:>8}{:>8}{:>8}", "", "AUC", "", "F1", "");
        let mut head2 = format!("{:<10}{:>8}{:>8}{:>8}{:>8}", "", "Macro", "Micro", "Macro", "Micro");
        let mut row = format!(
            "{:<10}{:>8.1}{:>8.1}{:>8.1}{:>8.1}",
            "MSMN",
            100.0 * self.macro_auc,
            100.0 * self.micro_auc,
            100.0 * self.macro_f1,
            100.0 * self.micro_f1
        );
        for (k, p) in &self.p_at_k {
            let _ = write!(head1, "{:>8}", "");
            let _ = write!(head2, "{:>8}", format!("P@{k}"));
            let _ = write!(row, "{:>8.1}", 100.0 * p);
        }
        format!(
            "{head1}\n{head2}\n{row}\n(threshold {:.4}, {} documents)\n",
            self.threshold, self.num_docs
        )
    }
}
