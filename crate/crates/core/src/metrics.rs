//! Ranking-oriented evaluation metrics.
//!
//! Height counts, for each negative, the positives scored at or below it;
//! rHeight counts, for each positive, the negatives scored at or above it.
//! Both use the non-strict comparison, so tied pairs count fully. ROC-AUC
//! uses the usual half-credit for ties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub mean_height: f64,
    pub mean_rheight: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl MetricReport {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let counts = pair_counts(scores, labels)?;
        let (mean_height, mean_rheight) = counts.heights();
        Ok(Self {
            roc_auc: counts.roc_auc(),
            pr_auc: pr_auc(scores, labels)?,
            mean_height,
            mean_rheight,
            n_pos: counts.n_pos,
            n_neg: counts.n_neg,
        })
    }
}

/// Integer pair statistics over all (positive, negative) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub n_pos: usize,
    pub n_neg: usize,
    /// Pairs with positive score strictly above the negative.
    pub concordant: u64,
    pub ties: u64,
    /// Pairs with positive score strictly below the negative.
    pub discordant: u64,
}

impl PairCounts {
    /// Pairs with `pos <= neg`; the numerator of both Height metrics.
    pub fn non_strict_discordant(&self) -> u64 {
        self.discordant + self.ties
    }

    pub fn heights(&self) -> (f64, f64) {
        let c = self.non_strict_discordant() as f64;
        (c / self.n_neg as f64, c / self.n_pos as f64)
    }

    pub fn roc_auc(&self) -> f64 {
        let total = self.n_pos as f64 * self.n_neg as f64;
        (2 * self.concordant + self.ties) as f64 / (2.0 * total)
    }
}

fn split_classes(scores: &[f64], labels: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Domain(format!("score {s} is not comparable")));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &y) in scores.iter().zip(labels) {
        if y == 1 {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Domain(
            "ranking metrics need at least one positive and one negative".into(),
        ));
    }
    Ok((pos, neg))
}

/// Pair counts in `O((P + N) log(P + N))` via sorting.
pub fn pair_counts(scores: &[f64], labels: &[u8]) -> Result<PairCounts> {
    let (pos, mut neg) = split_classes(scores, labels)?;
    neg.sort_by(f64::total_cmp);
    let mut concordant = 0u64;
    let mut ties = 0u64;
    for &s in &pos {
        let below = neg.partition_point(|&v| v < s);
        let at_or_below = neg.partition_point(|&v| v <= s);
        concordant += below as u64;
        ties += (at_or_below - below) as u64;
    }
    let total = pos.len() as u64 * neg.len() as u64;
    Ok(PairCounts {
        n_pos: pos.len(),
        n_neg: neg.len(),
        concordant,
        ties,
        discordant: total - concordant - ties,
    })
}

/// `(mean_height, mean_rheight)`.
pub fn height_metrics(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    Ok(pair_counts(scores, labels)?.heights())
}

pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(pair_counts(scores, labels)?.roc_auc())
}

/// Average precision over a descending-score sweep; tied scores enter as
/// one block.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = split_classes(scores, labels)?;
    let n_pos = pos.len() as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut block_tp = 0;
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                block_tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if block_tp > 0 {
            tp += block_tp;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += block_tp as f64 / n_pos * precision;
        }
    }
    Ok(ap)
}
