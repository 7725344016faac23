//! Ranking and fairness metrics.
//!
//! Rankings sort by descending score and break ties by ascending node id,
//! so every metric is a deterministic function of its inputs.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::graph::NodeId;

/// One scored review.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub id: NodeId,
    pub score: f64,
    pub spam: bool,
}

fn rank_order(a: &Scored, b: &Scored) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

/// NDCG over the full list with binary gain `2^y - 1` and `log2(r + 1)`
/// discount.
pub fn ndcg(items: &[Scored]) -> Result<f64> {
    ndcg_named(items, "ranking")
}

fn ndcg_named(items: &[Scored], what: &'static str) -> Result<f64> {
    let positives = items.iter().filter(|s| s.spam).count();
    if positives == 0 {
        return Err(Error::NoPositives(what));
    }
    let mut ranked = items.to_vec();
    ranked.sort_by(rank_order);
    let dcg: f64 = ranked
        .iter()
        .enumerate()
        .filter(|(_, s)| s.spam)
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..positives).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Ok(dcg / idcg)
}

/// Within-group NDCG of the protected group (`A = 1`) minus that of the
/// favoured group (`A = 0`). `groups[k]` is the `A` of `items[k]`.
pub fn delta_ndcg(items: &[Scored], groups: &[u8]) -> Result<f64> {
    let (protected, favored) = split_by_group(items, groups);
    let p = ndcg_named(&protected, "protected group")?;
    let f = ndcg_named(&favored, "favoured group")?;
    Ok(p - f)
}

/// Items of group 1 and group 0 respectively.
pub fn split_by_group(items: &[Scored], groups: &[u8]) -> (Vec<Scored>, Vec<Scored>) {
    assert_eq!(items.len(), groups.len());
    let pick = |g: u8| items.iter().zip(groups).filter(|(_, &a)| a == g).map(|(s, _)| *s).collect::<Vec<_>>();
    (pick(1), pick(0))
}

/// Average false ranking ratio of the spams in favoured subgroup `a_prime`:
/// for each such spam, the share of favoured non-spams scored strictly
/// above it, averaged over the subgroup's spams.
///
/// `groups[k]` is the `A` of `items[k]` and `subgroups[k]` the `A'` of its
/// author.
pub fn afrr(items: &[Scored], groups: &[u8], subgroups: &[Option<u8>], a_prime: u8) -> Result<f64> {
    assert_eq!(items.len(), groups.len());
    assert_eq!(items.len(), subgroups.len());
    let mut negatives: Vec<f64> = items
        .iter()
        .zip(groups)
        .filter(|(s, &a)| a == 0 && !s.spam)
        .map(|(s, _)| s.score)
        .collect();
    if negatives.is_empty() {
        return Err(Error::NoFavoredNonSpams);
    }
    negatives.sort_by(f64::total_cmp);
    let mut spams: Vec<&Scored> = items
        .iter()
        .enumerate()
        .filter(|(k, s)| s.spam && groups[*k] == 0 && subgroups[*k] == Some(a_prime))
        .map(|(_, s)| s)
        .collect();
    if spams.is_empty() {
        return Err(Error::NoSubgroupSpams);
    }
    spams.sort_by_key(|s| s.id);
    let total = negatives.len() as f64;
    let sum: f64 = spams
        .iter()
        .map(|s| {
            let above = negatives.len() - negatives.partition_point(|&v| v <= s.score);
            above as f64 / total
        })
        .sum();
    Ok(sum / spams.len() as f64)
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
pub fn auc(predictions: &[(f64, bool)]) -> Result<f64> {
    let positives = predictions.iter().filter(|p| p.1).count();
    let negatives = predictions.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::OneClassOnly);
    }
    let mut sorted = predictions.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of (average) ranks of the positives, 1-based.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start;
        while end + 1 < sorted.len() && sorted[end + 1].0 == sorted[start].0 {
            end += 1;
        }
        let avg_rank = (start + end + 2) as f64 / 2.0;
        let pos_in_tie = sorted[start..=end].iter().filter(|p| p.1).count();
        rank_sum += avg_rank * pos_in_tie as f64;
        start = end + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Test-set evaluation of one trained run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ndcg_all: f64,
    pub ndcg_protected: f64,
    pub ndcg_favored: f64,
    pub delta_ndcg: f64,
    pub afrr_mixed: Option<f64>,
    pub afrr_pure: Option<f64>,
    pub auc_aprime: Option<f64>,
}
