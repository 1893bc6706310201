//! Leave-one-out ranking evaluation: Recall@K and NDCG@K over full item
//! rankings.

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::data::SplitDataset;

pub const DEFAULT_EVAL_K: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no user holds a held-out test item")]
    NoTestUsers,
}

/// Metric means over every user with a held-out item.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub num_eval_users: usize,
    /// Indexed by user; false for users without a test item.
    pub per_user_hits: Vec<bool>,
}

impl EvalReport {
    pub fn metrics_json(&self, seed: u64) -> String {
        serde_json::json!({
            "k": self.k,
            "recall": self.recall_at_k,
            "ndcg": self.ndcg_at_k,
            "num_eval_users": self.num_eval_users,
            "seed": seed,
        })
        .to_string()
    }
}

/// All items sorted by descending score, ties to the lower index, with the
/// user's training positives removed before ranking.
pub fn rank_items(scores: &[f64], train_positives: &[u32]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| train_positives.binary_search(i).is_err())
        .collect();
    order.sort_by(|&a, &b| {
        scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b))
    });
    order
}

/// 1 if the held-out item appears in the first k positions, else 0; the
/// single-relevant-item form of recall.
pub fn recall_at_k(ranking: &[u32], held_out: u32, k: usize) -> f64 {
    let top = &ranking[..k.min(ranking.len())];
    if top.contains(&held_out) {
        1.0
    } else {
        0.0
    }
}

/// 1/log2(rank+1) for a hit at 1-based rank ≤ k, else 0. The ideal DCG is 1
/// (the single relevant item at rank 1), so this is already normalized.
pub fn ndcg_at_k(ranking: &[u32], held_out: u32, k: usize) -> f64 {
    let top = &ranking[..k.min(ranking.len())];
    match top.iter().position(|&i| i == held_out) {
        Some(pos) => 1.0 / (pos as f64 + 2.0).log2(),
        None => 0.0,
    }
}

/// Score every user against every item and average the per-user metrics
/// over users holding a test item. Users run in parallel; the final means
/// reduce in user order.
pub fn evaluate(
    users: &Tensor,
    items: &Tensor,
    split: &SplitDataset,
    k: usize,
) -> Result<EvalReport, EvalError> {
    evaluate_with(users, items, split, k, true)
}

/// [`evaluate`] with train-positive exclusion optional; ranking over the
/// full catalog when `exclude_train` is off.
pub fn evaluate_with(
    users: &Tensor,
    items: &Tensor,
    split: &SplitDataset,
    k: usize,
    exclude_train: bool,
) -> Result<EvalReport, EvalError> {
    let n = users.shape()[0];
    let d = users.shape()[1];
    let m = items.shape()[0];
    assert_eq!(items.shape()[1], d);
    assert_eq!(split.test.len(), n);

    let per_user: Vec<Option<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|u| {
            let held_out = split.test[u]?;
            let urow = users.row(u);
            let scores: Vec<f64> = (0..m)
                .map(|i| items.row(i).iter().zip(urow).map(|(a, b)| a * b).sum())
                .collect();
            let positives: Vec<u32> = if exclude_train {
                split.train.items_of(u).collect()
            } else {
                Vec::new()
            };
            let ranking = rank_items(&scores, &positives);
            Some((recall_at_k(&ranking, held_out, k), ndcg_at_k(&ranking, held_out, k)))
        })
        .collect();

    let mut recall_sum = 0.0;
    let mut ndcg_sum = 0.0;
    let mut num_eval_users = 0usize;
    let mut per_user_hits = vec![false; n];
    for (u, entry) in per_user.iter().enumerate() {
        if let Some((recall, ndcg)) = entry {
            recall_sum += recall;
            ndcg_sum += ndcg;
            num_eval_users += 1;
            per_user_hits[u] = *recall > 0.0;
        }
    }
    if num_eval_users == 0 {
        return Err(EvalError::NoTestUsers);
    }
    Ok(EvalReport {
        k,
        recall_at_k: recall_sum / num_eval_users as f64,
        ndcg_at_k: ndcg_sum / num_eval_users as f64,
        num_eval_users,
        per_user_hits,
    })
}
