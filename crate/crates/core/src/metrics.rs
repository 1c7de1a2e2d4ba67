//! Per-class AUC, accuracy, F1 and average precision with their class
//! averages, all in percent.

use serde::Serialize;

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

/// Mann–Whitney AUC; `None` unless both classes occur.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (&s, &y) in scores.iter().zip(labels) {
        if y == 1 {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    // rank-sum with midranks over ties
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Some(100.0 * (rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Mean precision at each positive's rank after a stable descending sort;
/// `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| 100.0 * total / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub name: String,
    pub auc: Option<f64>,
    pub acc: f64,
    pub f1: f64,
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub a_auc: f64,
    pub a_acc: f64,
    pub a_f1: f64,
    pub m_ap: f64,
    /// Classes left out of aAUC (single-class labels).
    pub auc_excluded: usize,
    /// Classes left out of mAP (no positives).
    pub ap_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassMetrics>,
    pub summary: Summary,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (f64, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    (if n == 0 { f64::NAN } else { sum / n as f64 }, skipped)
}

/// `predictions` and `labels` are `N` rows of `C` values.
pub fn evaluate(predictions: &[Vec<f64>], labels: &[Vec<u8>], names: &[String]) -> Result<EvalResult> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("evaluate", &[predictions.len()], &[labels.len()]));
    }
    let c = names.len();
    for (p, y) in predictions.iter().zip(labels) {
        if p.len() != c || y.len() != c {
            return Err(Error::shape("evaluate", &[p.len(), y.len()], &[c, c]));
        }
    }
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let scores: Vec<f64> = predictions.iter().map(|p| p[k]).collect();
        let ys: Vec<u8> = labels.iter().map(|y| y[k]).collect();
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&s, &y) in scores.iter().zip(&ys) {
            match (s >= THRESHOLD, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let n = scores.len();
        let acc = if n == 0 { 100.0 } else { 100.0 * (tp + tn) as f64 / n as f64 };
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 { 100.0 } else { 200.0 * tp as f64 / denom as f64 };
        per_class.push(ClassMetrics {
            name: names[k].clone(),
            auc: auc(&scores, &ys),
            acc,
            f1,
            ap: average_precision(&scores, &ys),
            tp,
            fp,
            tn,
            fn_,
        });
    }
    let (a_auc, auc_excluded) = mean_defined(per_class.iter().map(|m| m.auc));
    let (m_ap, ap_excluded) = mean_defined(per_class.iter().map(|m| m.ap));
    let (a_acc, _) = mean_defined(per_class.iter().map(|m| Some(m.acc)));
    let (a_f1, _) = mean_defined(per_class.iter().map(|m| Some(m.f1)));
    Ok(EvalResult {
        per_class,
        summary: Summary {
            a_auc,
            a_acc,
            a_f1,
            m_ap,
            auc_excluded,
            ap_excluded,
        },
    })
}

impl EvalResult {
    /// Plain-text table: one column per class then aAUC, aACC, aF1, mAP.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        let width = self.per_class.iter().map(|m| m.name.len()).max().unwrap_or(0).max(7);
        let mut header = format!("{:<6}", "metric");
        for m in &self.per_class {
            header.push_str(&format!(" | {:>width$}", m.name));
        }
        for s in ["aAUC", "aACC", "aF1", "mAP"] {
            header.push_str(&format!(" | {s:>6}"));
        }
        let mut lines = vec![header.clone(), "-".repeat(header.len())];
        let s = &self.summary;
        let summary = [s.a_auc, s.a_acc, s.a_f1, s.m_ap].map(|v| fmt((!v.is_nan()).then_some(v)));
        let rows: [(&str, Box<dyn Fn(&ClassMetrics) -> Option<f64>>); 4] = [
            ("AUC", Box::new(|m| m.auc)),
            ("ACC", Box::new(|m| Some(m.acc))),
            ("F1", Box::new(|m| Some(m.f1))),
            ("AP", Box::new(|m| m.ap)),
        ];
        for (i, (label, get)) in rows.iter().enumerate() {
            let mut line = format!("{label:<6}");
            for m in &self.per_class {
                line.push_str(&format!(" | {:>width$}", fmt(get(m))));
            }
            for v in &summary {
                line.push_str(&format!(" | {:>6}", if i == 0 { v.as_str() } else { "" }));
            }
            lines.push(line);
        }
        if s.auc_excluded + s.ap_excluded > 0 {
            lines.push(format!(
                "excluded from averages: {} class(es) without both labels (AUC), {} without positives (AP)",
                s.auc_excluded, s.ap_excluded
            ));
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_fixtures() {
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[1, 0, 1]), Some(50.0));
        assert_eq!(auc(&[0.9, 0.7, 0.2, 0.1], &[1, 1, 0, 0]), Some(100.0));
        assert_eq!(auc(&[0.3; 5], &[1, 0, 1, 0, 0]), Some(50.0));
        assert_eq!(auc(&[0.3, 0.2], &[1, 1]), None);
    }

    #[test]
    fn ap_fixtures() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[1, 0, 1]).unwrap();
        assert!((ap - 250.0 / 3.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1]), Some(25.0));
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]), Some(100.0));
        assert_eq!(average_precision(&[0.9], &[0]), None);
    }

    #[test]
    fn perfect_predictions_and_exclusion() {
        let names = vec!["a".to_string(), "b".to_string()];
        let labels = vec![vec![1, 0], vec![0, 0], vec![1, 0]];
        let preds: Vec<Vec<f64>> = labels.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
        let r = evaluate(&preds, &labels, &names).unwrap();
        assert_eq!(r.summary.a_acc, 100.0);
        assert_eq!(r.summary.a_f1, 100.0);
        assert_eq!(r.summary.a_auc, 100.0);
        assert_eq!((r.summary.auc_excluded, r.summary.ap_excluded), (1, 1));
        assert!(r.table().contains("excluded from averages"));
        assert!(evaluate(&preds[..2], &labels, &names).is_err());
    }

    #[test]
    fn f1_zero_without_true_positives() {
        let names = vec!["a".to_string()];
        let r = evaluate(&[vec![0.9], vec![0.1]], &[vec![0], vec![1]], &names).unwrap();
        assert_eq!(r.per_class[0].f1, 0.0);
        assert_eq!(r.per_class[0].acc, 0.0);
    }
}
