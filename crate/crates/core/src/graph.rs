//! Top-K neighbor graphs over user similarity scores, with temperature
//! softmax edge weights and the scheduled-rebuild machinery that makes the
//! graphs dynamic across training.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::data::RatingMatrix;
use crate::similarity::{pairwise_similarity, SimilarityKind, SimilarityScores};

pub const DEFAULT_K: usize = 30;
pub const DEFAULT_EDGE_SCALE: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("cannot normalize an empty neighbor list")]
    EmptyNeighborhood,
    #[error("{kind} graph produced a non-finite edge weight for user {user}")]
    NonFinite { kind: SimilarityKind, user: usize },
}

/// Weighted directed kNN graph for one similarity measure. Row `u` holds up
/// to K `(neighbor, weight)` edges, no self-loops, weights summing to 1 when
/// the row is non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub kind: SimilarityKind,
    pub neighbors: Vec<Vec<(u32, f64)>>,
}

impl SimilarityGraph {
    pub fn num_users(&self) -> usize {
        self.neighbors.len()
    }

    /// CSV rows `user,kind,neighbor,weight`, one per edge.
    pub fn append_csv(&self, out: &mut String) {
        use std::fmt::Write;
        for (u, row) in self.neighbors.iter().enumerate() {
            for &(v, w) in row {
                let _ = writeln!(out, "{u},{kind},{v},{w}", kind = self.kind);
            }
        }
    }
}

/// The four per-measure graphs built from one snapshot of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSet {
    pub cos: SimilarityGraph,
    pub jac: SimilarityGraph,
    pub dpcc: SimilarityGraph,
    pub ipij: SimilarityGraph,
    pub built_at_epoch: u32,
}

impl GraphSet {
    pub fn get(&self, kind: SimilarityKind) -> &SimilarityGraph {
        match kind {
            SimilarityKind::Cosine => &self.cos,
            SimilarityKind::Jaccard => &self.jac,
            SimilarityKind::DiscountPcc => &self.dpcc,
            SimilarityKind::IpIj => &self.ipij,
        }
    }

    pub fn all(&self) -> [&SimilarityGraph; 4] {
        [&self.cos, &self.jac, &self.dpcc, &self.ipij]
    }

    pub fn num_users(&self) -> usize {
        self.cos.num_users()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("user,kind,neighbor,weight\n");
        for g in self.all() {
            g.append_csv(&mut out);
        }
        out
    }
}

/// Where rebuilds read their similarity signal from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RebuildSource {
    /// The rating matrix, static across training. Rebuilds reproduce the
    /// initial graphs exactly.
    Interactions,
    /// Cosine over the current user embeddings, so topology tracks training.
    Embeddings,
}

/// Epochs at which graphs are (re)built. Epoch 0 is always a member: the
/// first build happens before any training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RebuildSchedule {
    epochs: BTreeSet<u32>,
}

impl RebuildSchedule {
    pub fn from_epochs(epochs: impl IntoIterator<Item = u32>) -> Self {
        let mut set: BTreeSet<u32> = epochs.into_iter().collect();
        set.insert(0);
        Self { epochs: set }
    }

    /// The published 20-epoch run schedule.
    pub fn default_run() -> Self {
        Self::from_epochs([0, 3, 6, 9, 10, 15, 20])
    }

    /// Two-phase rule: every 3 epochs through the first half of the run,
    /// every 5 epochs thereafter. Reproduces [`Self::default_run`] for 20.
    pub fn two_phase(total_epochs: u32) -> Self {
        let mid = total_epochs / 2;
        let early = (0..mid).step_by(3);
        let late = (mid..=total_epochs).step_by(5);
        Self::from_epochs(early.chain(late))
    }

    pub fn contains(&self, epoch: u32) -> bool {
        self.epochs.contains(&epoch)
    }

    pub fn epochs(&self) -> impl Iterator<Item = u32> + '_ {
        self.epochs.iter().copied()
    }
}

pub fn should_rebuild(epoch: u32, schedule: &RebuildSchedule) -> bool {
    schedule.contains(epoch)
}

/// Temperature softmax over retained neighbor scores, max-subtracted for
/// stability. The output sums to 1.
pub fn softmax_edge_weights(scores: &[f64], scale: f64) -> Result<Vec<f64>, GraphError> {
    let max = scores
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(GraphError::EmptyNeighborhood);
    }
    let mut out: Vec<f64> = scores.iter().map(|&s| (scale * (s - max)).exp()).collect();
    let sum: f64 = out.iter().sum();
    for w in &mut out {
        *w /= sum;
    }
    Ok(out)
}

/// Retain each user's K highest-scoring other users (ties to the lower
/// index) and softmax the retained raw scores into edge weights.
pub fn build_knn_graph(scores: &SimilarityScores, k: usize) -> SimilarityGraph {
    let n = scores.num_users;
    let neighbors: Vec<Vec<(u32, f64)>> = (0..n)
        .into_par_iter()
        .map(|u| {
            let row = scores.row(u);
            let mut cands: Vec<u32> = (0..n as u32).filter(|&v| v as usize != u).collect();
            cands.sort_by(|&a, &b| {
                row[b as usize]
                    .total_cmp(&row[a as usize])
                    .then(a.cmp(&b))
            });
            cands.truncate(k.min(n.saturating_sub(1)));
            if cands.is_empty() {
                return Vec::new();
            }
            let raw: Vec<f64> = cands.iter().map(|&v| row[v as usize]).collect();
            let weights = softmax_edge_weights(&raw, DEFAULT_EDGE_SCALE)
                .expect("non-empty candidate list");
            cands.into_iter().zip(weights).collect()
        })
        .collect();
    SimilarityGraph { kind: scores.kind, neighbors }
}

fn validate(graph: SimilarityGraph) -> Result<SimilarityGraph, GraphError> {
    for (u, row) in graph.neighbors.iter().enumerate() {
        if row.iter().any(|&(_, w)| !w.is_finite()) {
            return Err(GraphError::NonFinite { kind: graph.kind, user: u });
        }
    }
    Ok(graph)
}

/// Build all four graphs from the rating matrix, one logical worker per
/// similarity kind. Pure in (matrix, k): repeated calls agree edge for edge.
pub fn rebuild_all(matrix: &RatingMatrix, k: usize, epoch: u32) -> Result<GraphSet, GraphError> {
    let build = |kind| validate(build_knn_graph(&pairwise_similarity(matrix, kind), k));
    let ((cos, jac), (dpcc, ipij)) = rayon::join(
        || {
            rayon::join(
                || build(SimilarityKind::Cosine),
                || build(SimilarityKind::Jaccard),
            )
        },
        || {
            rayon::join(
                || build(SimilarityKind::DiscountPcc),
                || build(SimilarityKind::IpIj),
            )
        },
    );
    Ok(GraphSet {
        cos: cos?,
        jac: jac?,
        dpcc: dpcc?,
        ipij: ipij?,
        built_at_epoch: epoch,
    })
}

/// Rebuild in embedding space: cosine over current user embedding rows. The
/// four slots share one topology since the measure no longer differs by kind.
pub fn rebuild_all_from_embeddings(
    emb: &[f64],
    num_users: usize,
    dim: usize,
    k: usize,
    epoch: u32,
) -> Result<GraphSet, GraphError> {
    assert_eq!(emb.len(), num_users * dim);
    let upper: Vec<Vec<f64>> = (0..num_users)
        .into_par_iter()
        .map(|u| {
            let ru = &emb[u * dim..(u + 1) * dim];
            ((u + 1)..num_users)
                .map(|v| {
                    let rv = &emb[v * dim..(v + 1) * dim];
                    let mut dot = 0.0;
                    let mut nu = 0.0;
                    let mut nv = 0.0;
                    for t in 0..dim {
                        dot += ru[t] * rv[t];
                        nu += ru[t] * ru[t];
                        nv += rv[t] * rv[t];
                    }
                    dot / (nu.sqrt() * nv.sqrt() + 1e-8)
                })
                .collect()
        })
        .collect();
    let mut values = vec![0.0f64; num_users * num_users];
    for (u, row) in upper.iter().enumerate() {
        for (off, &s) in row.iter().enumerate() {
            let v = u + 1 + off;
            values[u * num_users + v] = s;
            values[v * num_users + u] = s;
        }
    }
    let base = validate(build_knn_graph(
        &SimilarityScores::from_dense(SimilarityKind::Cosine, num_users, values),
        k,
    ))?;
    let with_kind = |kind| SimilarityGraph { kind, neighbors: base.neighbors.clone() };
    Ok(GraphSet {
        cos: with_kind(SimilarityKind::Cosine),
        jac: with_kind(SimilarityKind::Jaccard),
        dpcc: with_kind(SimilarityKind::DiscountPcc),
        ipij: with_kind(SimilarityKind::IpIj),
        built_at_epoch: epoch,
    })
}
