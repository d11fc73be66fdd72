//! Ranking metrics for scored nodes: AUC-ROC, AUC-PR (average precision)
//! and Precision@K, plus a random-score baseline.
//!
//! Rankings sort by score descending and break ties by position ascending.
//! AUC-ROC gives tied anomaly/normal pairs half credit.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub precision_at_k: BTreeMap<usize, f64>,
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(position) = labels.iter().position(|&y| y > 1) {
        return Err(Error::Label {
            position,
            label: labels[position],
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    Ok((positives, labels.len() - positives))
}

/// Positions ordered by score descending, then position ascending.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Mann-Whitney rank-sum AUC with mid-ranks for ties.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC-ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled ranks keep mid-ranks integral
    let mut doubled_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let doubled_mid = (start + 1 + end) as u64;
        let tied_pos = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        doubled_rank_sum += doubled_mid * tied_pos;
        start = end;
    }
    let (pos, neg) = (pos as u64, neg as u64);
    let numerator = doubled_rank_sum - pos * (pos + 1);
    Ok(numerator as f64 / (2 * pos * neg) as f64)
}

/// Average precision over the descending-score sweep.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::Metric("AUC-PR needs at least one positive".into()));
    }
    let mut ap = 0.0;
    let mut hits = 0usize;
    let mut prev_recall = 0.0;
    for (k, &i) in ranking(scores).iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            let recall = hits as f64 / pos as f64;
            let precision = hits as f64 / (k + 1) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    Ok(ap)
}

/// Fraction of anomalies among the top `k` ranked positions.
pub fn precision_at_k(scores: &[f64], labels: &[u8], k: usize) -> Result<f64> {
    check(scores, labels)?;
    if k == 0 || k > scores.len() {
        return Err(Error::Metric(format!(
            "K = {k} outside 1..={}",
            scores.len()
        )));
    }
    let hits = ranking(scores)[..k]
        .iter()
        .filter(|&&i| labels[i] == 1)
        .count();
    Ok(hits as f64 / k as f64)
}

/// All metrics at once. `K` values larger than the input are skipped.
pub fn evaluate(scores: &[f64], labels: &[u8], ks: &[usize]) -> Result<MetricsReport> {
    let mut precision = BTreeMap::new();
    for &k in ks {
        if k >= 1 && k <= scores.len() {
            precision.insert(k, precision_at_k(scores, labels, k)?);
        }
    }
    Ok(MetricsReport {
        auc_roc: auc_roc(scores, labels)?,
        auc_pr: auc_pr(scores, labels)?,
        precision_at_k: precision,
    })
}

/// Metrics of uniform random scores, averaged over `repeats` draws.
pub fn random_baseline(labels: &[u8], ks: &[usize], rng: &mut Rng, repeats: usize) -> Result<MetricsReport> {
    if repeats == 0 {
        return Err(Error::Config("random baseline needs at least one repeat".into()));
    }
    let mut sum: Option<MetricsReport> = None;
    for _ in 0..repeats {
        let scores: Vec<f64> = (0..labels.len()).map(|_| rng.gen::<f64>()).collect();
        let r = evaluate(&scores, labels, ks)?;
        match sum.as_mut() {
            None => sum = Some(r),
            Some(s) => {
                s.auc_roc += r.auc_roc;
                s.auc_pr += r.auc_pr;
                for (k, v) in r.precision_at_k {
                    *s.precision_at_k.entry(k).or_insert(0.0) += v;
                }
            }
        }
    }
    let mut report = sum.expect("repeats >= 1");
    let scale = 1.0 / repeats as f64;
    report.auc_roc *= scale;
    report.auc_pr *= scale;
    report.precision_at_k.values_mut().for_each(|v| *v *= scale);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    // a:0.9, n:0.8, a:0.7, n:0.1
    const SCORES: [f64; 4] = [0.9, 0.8, 0.7, 0.1];
    const LABELS: [u8; 4] = [1, 0, 1, 0];

    #[test]
    fn auc_roc_examples() {
        assert_eq!(auc_roc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
        assert_eq!(auc_roc(&SCORES, &LABELS).unwrap(), 0.75);
        assert!(auc_roc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auc_pr_examples() {
        assert_eq!(auc_pr(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let ap = auc_pr(&[0.5, 0.4, 0.3, 0.2, 0.1], &[0, 0, 0, 0, 1]).unwrap();
        assert!((ap - 0.2).abs() < 1e-15);
        assert!((auc_pr(&SCORES, &LABELS).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!(auc_pr(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_k(&[0.9, 0.8, 0.2], &[1, 1, 0], 2).unwrap(), 1.0);
        assert_eq!(precision_at_k(&SCORES, &LABELS, 4).unwrap(), 0.5);
        assert_eq!(precision_at_k(&SCORES, &LABELS, 2).unwrap(), 0.5);
        assert!(precision_at_k(&SCORES, &LABELS, 0).is_err());
        assert!(precision_at_k(&SCORES, &LABELS, 5).is_err());
    }

    #[test]
    fn ties_break_by_position() {
        assert_eq!(ranking(&[0.5, 0.7, 0.5, 0.7]), vec![1, 3, 0, 2]);
        assert_eq!(precision_at_k(&[0.5, 0.5], &[0, 1], 1).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_skips_large_k() {
        let r = evaluate(&SCORES, &LABELS, &[2, 25]).unwrap();
        assert_eq!(r.precision_at_k.keys().copied().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn random_baseline_is_null() {
        let labels: Vec<u8> = (0..400).map(|i| u8::from(i % 10 == 0)).collect();
        let a = random_baseline(&labels, &[40], &mut seeded(5), 100).unwrap();
        let b = random_baseline(&labels, &[40], &mut seeded(5), 100).unwrap();
        assert_eq!(a, b);
        // s.e. of one AUC with 40 pos / 360 neg is about 0.048; of the mean of 100, 0.0048
        assert!((a.auc_roc - 0.5).abs() <= 3.0 * 0.0048, "{}", a.auc_roc);
        // hypergeometric: top-40 hit rate has s.d. ~0.045 per draw
        assert!((a.precision_at_k[&40] - 0.1).abs() <= 3.0 * 0.0045, "{:?}", a.precision_at_k);
        assert!(random_baseline(&labels, &[], &mut seeded(1), 0).is_err());
    }
}
