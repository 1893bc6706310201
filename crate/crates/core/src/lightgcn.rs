//! LightGCN baseline: linear propagation of joint user-item embeddings over
//! the symmetric-normalized interaction bipartite graph, trained under the
//! same pairwise objective and evaluator as the primary model.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::{RatingMatrix, SplitDataset};
use crate::model::ModelError;
use crate::sparse::SparseMatrix;
use crate::sub_seed;
use crate::train::{train_model, BprModel, ModelVars, TrainConfig, TrainError, TrainReport};

pub const DEFAULT_LIGHTGCN_DIM: usize = 64;
pub const DEFAULT_LIGHTGCN_LAYERS: usize = 3;

/// Â = D^(−1/2)·A·D^(−1/2) over the joint node set: users are nodes
/// 0..N, items are nodes N..N+M, edges are binary interactions weighted
/// 1/√(deg_u·deg_i). Nodes without interactions keep all-zero rows.
pub fn build_bipartite(train: &RatingMatrix) -> SparseMatrix {
    let (n, m) = (train.num_users, train.num_items);
    let mut item_users: Vec<Vec<u32>> = vec![Vec::new(); m];
    for u in 0..n {
        for item in train.items_of(u) {
            item_users[item as usize].push(u as u32);
        }
    }
    let user_deg = |u: usize| train.row(u).len() as f64;
    let item_deg = |i: usize| item_users[i].len() as f64;
    let mut entries = Vec::with_capacity(2 * train.interaction_count());
    for u in 0..n {
        for item in train.items_of(u) {
            let w = 1.0 / (user_deg(u) * item_deg(item as usize)).sqrt();
            entries.push((u as u32, (n + item as usize) as u32, w));
        }
    }
    for (i, users) in item_users.iter().enumerate() {
        for &u in users {
            let w = 1.0 / (user_deg(u as usize) * item_deg(i)).sqrt();
            entries.push(((n + i) as u32, u, w));
        }
    }
    SparseMatrix::from_sorted_entries(n + m, n + m, entries)
}

/// The baseline model: one joint embedding table and the fixed normalized
/// adjacency. Negative sampling is uniform unless hard mining is switched
/// on to match the primary model's sampler.
pub struct LightGcn {
    pub emb: Tensor,
    pub adj: Arc<SparseMatrix>,
    pub num_users: usize,
    pub num_items: usize,
    pub num_layers: usize,
    pub hard_negatives: bool,
}

impl LightGcn {
    /// Embeddings Normal(0, 0.1) from the run seed, dimension and depth per
    /// the published comparison setup (d=64, 3 layers).
    pub fn new(train: &RatingMatrix, dim: usize, num_layers: usize, seed: u64) -> Self {
        let (n, m) = (train.num_users, train.num_items);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "init"));
        let emb = crate::model::normal_init(&mut rng, &[n + m, dim], 0.1);
        Self {
            emb,
            adj: Arc::new(build_bipartite(train)),
            num_users: n,
            num_items: m,
            num_layers,
            hard_negatives: false,
        }
    }

    pub fn with_hard_negatives(mut self, on: bool) -> Self {
        self.hard_negatives = on;
        self
    }

    /// E^(l+1) = Â·E^(l); the output is the uniform mean of E^(0..L), split
    /// into the user and item blocks.
    fn propagate(&self, tape: &mut Tape) -> Result<ModelVars, ModelError> {
        let e0 = tape.param(self.emb.clone());
        let mut acc = e0;
        let mut e = e0;
        for _ in 0..self.num_layers {
            e = tape.spmm(self.adj.clone(), e)?;
            acc = tape.add(acc, e)?;
        }
        let mean = tape.scale(acc, 1.0 / (self.num_layers + 1) as f64);
        let users = tape.slice_rows(mean, 0, self.num_users)?;
        let items = tape.slice_rows(mean, self.num_users, self.num_items)?;
        Ok(ModelVars { users, items, params: vec![e0] })
    }
}

impl BprModel for LightGcn {
    fn forward_train(&self, tape: &mut Tape) -> Result<ModelVars, TrainError> {
        Ok(self.propagate(tape)?)
    }

    fn forward_eval(&self) -> Result<(Tensor, Tensor), TrainError> {
        let mut tape = Tape::eval();
        let mv = self.propagate(&mut tape)?;
        Ok((tape.value(mv.users).clone(), tape.value(mv.items).clone()))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.emb]
    }

    fn mines_hard_negatives(&self) -> bool {
        self.hard_negatives
    }

    fn method(&self) -> &'static str {
        "lightgcn"
    }
}

/// Train the baseline under the shared loop and return it with the report.
pub fn train_lightgcn(
    data: &SplitDataset,
    config: &TrainConfig,
) -> Result<(LightGcn, TrainReport), TrainError> {
    let mut model =
        LightGcn::new(&data.train, DEFAULT_LIGHTGCN_DIM, DEFAULT_LIGHTGCN_LAYERS, config.seed);
    let report = train_model(&mut model, data, config)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RebuildSchedule;

    fn dense(adj: &SparseMatrix) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; adj.cols]; adj.rows];
        for r in 0..adj.rows {
            for (c, v) in adj.row(r) {
                out[r][c as usize] = v;
            }
        }
        out
    }

    fn tiny_split() -> SplitDataset {
        let train = RatingMatrix::new(
            3,
            4,
            vec![vec![(0, 5.0), (1, 3.0)], vec![(1, 4.0), (2, 2.0)], vec![(3, 1.0)]],
        );
        SplitDataset { train, test: vec![Some(2), Some(0), Some(1)], split_seed: 0 }
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 0.01,
            l2: 1e-4,
            hard_ratio: 0.7,
            pool_size: 3,
            clip_norm: 5.0,
            schedule: RebuildSchedule::from_epochs([0]),
            seed,
        }
    }

    #[test]
    fn single_edge_normalizes_to_one() {
        let train = RatingMatrix::new(1, 1, vec![vec![(0, 4.0)]]);
        let adj = build_bipartite(&train);
        let d = dense(&adj);
        assert_eq!(d[0], vec![0.0, 1.0]);
        assert_eq!(d[1], vec![1.0, 0.0]);
    }

    #[test]
    fn degrees_scale_entries_by_inverse_sqrt() {
        // u0 has degree 2; each item has degree 1: entries 1/√2.
        let train = RatingMatrix::new(1, 2, vec![vec![(0, 1.0), (1, 1.0)]]);
        let adj = build_bipartite(&train);
        let d = dense(&adj);
        let w = 1.0 / 2.0f64.sqrt();
        assert_eq!(d[0], vec![0.0, w, w]);
        assert_eq!(d[1], vec![w, 0.0, 0.0]);
        assert_eq!(d[2], vec![w, 0.0, 0.0]);
    }

    #[test]
    fn empty_interactions_give_a_zero_matrix() {
        let train = RatingMatrix::new(2, 3, vec![vec![], vec![]]);
        let adj = build_bipartite(&train);
        assert_eq!(adj.nnz(), 0);
        assert_eq!(adj.rows, 5);
    }

    #[test]
    fn adjacency_is_exactly_symmetric() {
        let split = tiny_split();
        let adj = build_bipartite(&split.train);
        let d = dense(&adj);
        for r in 0..adj.rows {
            for c in 0..adj.cols {
                assert_eq!(d[r][c], d[c][r]);
            }
        }
    }

    #[test]
    fn zero_layers_return_the_initial_embeddings() {
        let split = tiny_split();
        let mut model = LightGcn::new(&split.train, 4, 0, 3);
        model.emb = Tensor::new(vec![7, 1], (0..7).map(|i| i as f64).collect());
        let (users, items) = model.forward_eval().unwrap();
        assert_eq!(users.data(), &[0.0, 1.0, 2.0]);
        assert_eq!(items.data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn isolated_graph_averages_to_a_quarter() {
        // Zero adjacency: three propagation layers contribute nothing, so
        // the four-term mean is E0/4.
        let train = RatingMatrix::new(2, 2, vec![vec![], vec![]]);
        let split = SplitDataset { train, test: vec![Some(0), None], split_seed: 0 };
        let mut model = LightGcn::new(&split.train, 2, 3, 3);
        model.emb = Tensor::new(vec![4, 2], (0..8).map(|i| i as f64).collect());
        let (users, items) = model.forward_eval().unwrap();
        assert_eq!(users.data(), &[0.0, 0.25, 0.5, 0.75]);
        assert_eq!(items.data(), &[1.0, 1.25, 1.5, 1.75]);
    }

    #[test]
    fn two_node_propagation_matches_hand_values() {
        // Single user-item pair: Â swaps the two rows, so the one-layer
        // mean is (E0 + swapped)/2 for both nodes.
        let train = RatingMatrix::new(1, 1, vec![vec![(0, 2.0)]]);
        let mut model = LightGcn::new(&train, 2, 1, 3);
        model.emb = Tensor::new(vec![2, 2], vec![2.0, 4.0, 6.0, 8.0]);
        let (users, items) = model.forward_eval().unwrap();
        assert_eq!(users.data(), &[4.0, 6.0]);
        assert_eq!(items.data(), &[4.0, 6.0]);
    }

    #[test]
    fn propagation_stays_bounded_by_the_adjacency_norm() {
        let split = tiny_split();
        let adj = build_bipartite(&split.train);
        let row_norm = (0..adj.rows)
            .map(|r| adj.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let model = LightGcn::new(&split.train, 8, 3, 5);
        let mut tape = Tape::eval();
        let e0 = tape.param(model.emb.clone());
        let mut e = e0;
        let mut prev_max = model.emb.data().iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for _ in 0..3 {
            e = tape.spmm(model.adj.clone(), e).unwrap();
            let max = tape.value(e).data().iter().fold(0.0f64, |a, x| a.max(x.abs()));
            assert!(max <= row_norm * prev_max + 1e-12);
            assert!(max.is_finite());
            prev_max = max;
        }
    }

    #[test]
    fn zero_learning_rate_leaves_embeddings_unchanged() {
        let split = tiny_split();
        let mut config = tiny_config(5);
        config.lr = 0.0;
        let before = LightGcn::new(&split.train, DEFAULT_LIGHTGCN_DIM, 3, 5).emb;
        let (model, _) = train_lightgcn(&split, &config).unwrap();
        assert_eq!(model.emb, before);
    }

    #[test]
    fn training_is_reproducible_for_a_fixed_seed() {
        let split = tiny_split();
        let config = tiny_config(9);
        let (a, ra) = train_lightgcn(&split, &config).unwrap();
        let (b, rb) = train_lightgcn(&split, &config).unwrap();
        assert_eq!(a.emb, b.emb);
        assert_eq!(ra.records.len(), rb.records.len());
        for (x, y) in ra.records.iter().zip(&rb.records) {
            assert_eq!((x.loss, x.recall, x.ndcg), (y.loss, y.recall, y.ndcg));
        }
    }

    #[test]
    fn baseline_defaults_to_uniform_sampling() {
        let split = tiny_split();
        let model = LightGcn::new(&split.train, 4, 3, 1);
        assert!(!model.mines_hard_negatives());
        assert!(model.with_hard_negatives(true).mines_hard_negatives());
    }
}
