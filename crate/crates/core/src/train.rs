//! Pairwise ranking optimization: hard-negative mining, the epoch loop with
//! scheduled graph rebuilds, per-epoch evaluation, and best-epoch tracking.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{clip_global_norm, AdamState, Tape, Tensor, TensorError, Var};
use crate::data::{RatingMatrix, SplitDataset};
use crate::eval::{evaluate, EvalError, DEFAULT_EVAL_K};
use crate::graph::{
    rebuild_all, rebuild_all_from_embeddings, GraphError, GraphSet, RebuildSchedule,
    RebuildSource, DEFAULT_K,
};
use crate::model::{
    forward, full_forward, score_matrix, ForwardInputs, ModelError, ModelParams,
};
use crate::sub_seed;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch} step {step}: loss {loss}, pre-clip gradient norm {grad_norm}")]
    NonFiniteLoss { epoch: u32, step: usize, loss: f64, grad_norm: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One training example: a user, one of their rated items, one item they
/// never rated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: u32,
    pub pos_item: u32,
    pub neg_item: u32,
}

/// Per-user candidate negatives: the highest-scoring non-interacted items
/// at the time of the last refresh, descending.
#[derive(Debug, Clone)]
pub struct HardPool {
    pub pools: Vec<Vec<u32>>,
    pub refreshed_at_step: u64,
}

impl HardPool {
    pub fn empty(num_users: usize) -> Self {
        Self { pools: vec![Vec::new(); num_users], refreshed_at_step: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub hard_ratio: f64,
    pub pool_size: usize,
    pub clip_norm: f64,
    pub schedule: RebuildSchedule,
    pub seed: u64,
}

impl TrainConfig {
    /// Published run settings: 20 epochs, batch 1024, Adam lr 0.001,
    /// L2 1e-4, hard ratio 0.7 over a 200-item pool, clip norm 5.
    pub fn new(seed: u64) -> Self {
        Self {
            epochs: 20,
            batch_size: 1024,
            lr: 0.001,
            l2: 1e-4,
            hard_ratio: 0.7,
            pool_size: 200,
            clip_norm: 5.0,
            schedule: RebuildSchedule::default_run(),
            seed,
        }
    }

    fn validate(&self) {
        assert!((0.0..=1.0).contains(&self.hard_ratio));
        assert!(self.batch_size > 0 && self.pool_size > 0);
        assert!(self.lr >= 0.0 && self.l2 >= 0.0 && self.clip_norm > 0.0);
    }
}

/// How negatives were drawn in one batch, for sampling-statistics checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub pool_draws: usize,
    pub uniform_draws: usize,
    pub skipped_users: usize,
}

/// Per user, the `pool_size` highest-scoring items they never interacted
/// with, ties to the lower index.
pub fn refresh_hard_pool(
    scores: &Tensor,
    train: &RatingMatrix,
    pool_size: usize,
    step: u64,
) -> HardPool {
    let (n, m) = (scores.shape()[0], scores.shape()[1]);
    assert_eq!(n, train.num_users);
    assert_eq!(m, train.num_items);
    let pools = (0..n)
        .into_par_iter()
        .map(|u| {
            let row = scores.row(u);
            let mut candidates: Vec<u32> =
                (0..m as u32).filter(|&i| !train.rated(u, i)).collect();
            candidates
                .sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
            candidates.truncate(pool_size);
            candidates
        })
        .collect();
    HardPool { pools, refreshed_at_step: step }
}

/// Draw `batch_size` triples: users uniform with replacement over users with
/// positives, positives uniform per user, negatives from the hard pool with
/// probability `hard_ratio` (uniform over non-interacted items otherwise,
/// and as fallback when the pool is empty). Users with every item rated are
/// skipped and resampled.
pub fn sample_batch(
    train: &RatingMatrix,
    pool: &HardPool,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<Triple>, SampleStats) {
    let eligible: Vec<u32> = (0..train.num_users as u32)
        .filter(|&u| !train.row(u as usize).is_empty())
        .collect();
    assert!(!eligible.is_empty(), "no user has any training interaction");
    let m = train.num_items as u32;
    let mut stats = SampleStats::default();
    let mut warned = false;
    let mut batch = Vec::with_capacity(config.batch_size);
    while batch.len() < config.batch_size {
        let user = eligible[rng.random_range(0..eligible.len())];
        let row = train.row(user as usize);
        if row.len() == train.num_items {
            stats.skipped_users += 1;
            if !warned {
                log::warn!("user {user} rated every item; no negative exists, resampling");
                warned = true;
            }
            continue;
        }
        let pos_item = row[rng.random_range(0..row.len())].0;
        let user_pool = &pool.pools[user as usize];
        let from_pool = rng.random::<f64>() < config.hard_ratio && !user_pool.is_empty();
        let neg_item = if from_pool {
            stats.pool_draws += 1;
            let item = user_pool[rng.random_range(0..user_pool.len())];
            debug_assert!(!train.rated(user as usize, item));
            item
        } else {
            stats.uniform_draws += 1;
            loop {
                let item = rng.random_range(0..m);
                if !train.rated(user as usize, item) {
                    break item;
                }
            }
        };
        batch.push(Triple { user, pos_item, neg_item });
    }
    (batch, stats)
}

/// Mean over the batch of softplus(−(ŷ⁺ − ŷ⁻)), the stable form of
/// −log σ(ŷ⁺ − ŷ⁻), plus l2 · Σ‖θ‖² over every parameter in `params`.
pub fn bpr_loss(
    tape: &mut Tape,
    users: Var,
    items: Var,
    batch: &[Triple],
    params: &[Var],
    l2: f64,
) -> Result<Var, TensorError> {
    assert!(!batch.is_empty());
    let user_idx: Vec<u32> = batch.iter().map(|t| t.user).collect();
    let pos_idx: Vec<u32> = batch.iter().map(|t| t.pos_item).collect();
    let neg_idx: Vec<u32> = batch.iter().map(|t| t.neg_item).collect();
    let u = tape.gather_rows(users, &user_idx)?;
    let pos = tape.gather_rows(items, &pos_idx)?;
    let neg = tape.gather_rows(items, &neg_idx)?;
    let pos_scores = tape.mul(u, pos)?;
    let pos_scores = tape.sum_last(pos_scores);
    let neg_scores = tape.mul(u, neg)?;
    let neg_scores = tape.sum_last(neg_scores);
    let margin = tape.sub(pos_scores, neg_scores)?;
    let flipped = tape.scale(margin, -1.0);
    let penalties = tape.softplus(flipped);
    let mut loss = tape.mean_all(penalties);
    if l2 > 0.0 && !params.is_empty() {
        let mut reg = tape.sum_squares(params[0]);
        for &p in &params[1..] {
            let sq = tape.sum_squares(p);
            reg = tape.add(reg, sq)?;
        }
        let scaled = tape.scale(reg, l2);
        loss = tape.add(loss, scaled)?;
    }
    Ok(loss)
}

/// Tape handles one model forward exposes to the shared trainer.
pub struct ModelVars {
    pub users: Var,
    pub items: Var,
    pub params: Vec<Var>,
}

/// Anything trainable under the shared BPR loop. Implementations own their
/// parameters and whatever graph state their forward pass needs.
pub trait BprModel {
    /// Rebuild dynamic inputs for a scheduled epoch; no-op by default.
    fn rebuild(&mut self, _epoch: u32) -> Result<(), TrainError> {
        Ok(())
    }
    /// Differentiable forward on the given tape.
    fn forward_train(&self, tape: &mut Tape) -> Result<ModelVars, TrainError>;
    /// Value-level forward for evaluation and scoring.
    fn forward_eval(&self) -> Result<(Tensor, Tensor), TrainError>;
    /// Mutable views of every parameter, aligned with `ModelVars::params`.
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Whether negatives should be mined from the hard pool.
    fn mines_hard_negatives(&self) -> bool;
    fn method(&self) -> &'static str;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub loss: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub rebuilt: bool,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<u32>,
    pub num_eval_users: usize,
}

impl TrainReport {
    pub fn best(&self) -> Option<&EpochRecord> {
        let best = self.best_epoch?;
        self.records.iter().find(|r| r.epoch == best)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// CSV with one row per epoch. Wall time is informational; consumers
    /// comparing runs for reproducibility should drop the last column.
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,loss,recall,ndcg,rebuild_flag,wall_ms\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.loss, r.recall, r.ndcg, u8::from(r.rebuilt), r.wall_ms
            ));
        }
        out
    }

    /// Final JSON report: config echo, method tag, final and best metrics.
    /// Contains nothing time-dependent, so identical runs emit identical
    /// bytes.
    pub fn report_json(&self, config: &TrainConfig, method: &str) -> String {
        let epoch_json = |r: &EpochRecord| {
            serde_json::json!({
                "epoch": r.epoch,
                "loss": r.loss,
                "recall": r.recall,
                "ndcg": r.ndcg,
            })
        };
        serde_json::json!({
            "method": method,
            "seed": config.seed,
            "config": {
                "epochs": config.epochs,
                "batch_size": config.batch_size,
                "lr": config.lr,
                "l2": config.l2,
                "hard_ratio": config.hard_ratio,
                "pool_size": config.pool_size,
                "clip_norm": config.clip_norm,
                "rebuild_epochs": config.schedule.epochs().collect::<Vec<_>>(),
            },
            "num_eval_users": self.num_eval_users,
            "final": self.last().map(&epoch_json),
            "best": self.best().map(&epoch_json),
        })
        .to_string()
    }
}

/// Run the full loop: per epoch, an optional scheduled rebuild, then
/// ⌈users/batch⌉ steps of forward → pool refresh → sample → loss →
/// backward → clip → Adam, then an evaluation pass. Parameters end at the
/// best epoch by Recall@20.
pub fn train_model<M: BprModel>(
    model: &mut M,
    data: &SplitDataset,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "sampling"));
    let dropout_base = sub_seed(config.seed, "dropout");
    let mut adam = AdamState::new(config.lr);
    let steps = data.train.num_users.div_ceil(config.batch_size);
    let mut records = Vec::new();
    let mut best: Option<(u32, f64, Vec<Tensor>)> = None;
    let mut num_eval_users = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let rebuilt = config.schedule.contains(epoch);
        if rebuilt {
            model.rebuild(epoch)?;
        }

        let mut loss_sum = 0.0;
        for step in 0..steps {
            let global_step = epoch as u64 * steps as u64 + step as u64;
            let mut tape = Tape::train(dropout_base.wrapping_add(global_step));
            let mv = model.forward_train(&mut tape)?;
            let pool = if model.mines_hard_negatives() {
                let scores = score_matrix(tape.value(mv.users), tape.value(mv.items));
                refresh_hard_pool(&scores, &data.train, config.pool_size, global_step)
            } else {
                HardPool::empty(data.train.num_users)
            };
            let ratio = if model.mines_hard_negatives() { config.hard_ratio } else { 0.0 };
            let step_config = TrainConfig { hard_ratio: ratio, ..config.clone() };
            let (batch, _) = sample_batch(&data.train, &pool, &step_config, &mut rng);
            let loss = bpr_loss(&mut tape, mv.users, mv.items, &batch, &mv.params, config.l2)?;
            let loss_val = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let mut grad_tensors: Vec<Tensor> =
                mv.params.iter().map(|&v| grads.get(v)).collect();
            let grad_norm = clip_global_norm(&mut grad_tensors, config.clip_norm);
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step, loss: loss_val, grad_norm });
            }
            adam.step(&mut model.params_mut(), &grad_tensors);
            loss_sum += loss_val;
        }

        let (user_emb, item_emb) = model.forward_eval()?;
        let report = evaluate(&user_emb, &item_emb, data, DEFAULT_EVAL_K)?;
        num_eval_users = report.num_eval_users;
        if best.as_ref().is_none_or(|(_, r, _)| report.recall_at_k > *r) {
            let snapshot = model.params_mut().iter().map(|t| (**t).clone()).collect();
            best = Some((epoch, report.recall_at_k, snapshot));
        }
        records.push(EpochRecord {
            epoch,
            loss: loss_sum / steps as f64,
            recall: report.recall_at_k,
            ndcg: report.ndcg_at_k,
            rebuilt,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    let best_epoch = best.map(|(epoch, _, snapshot)| {
        for (slot, value) in model.params_mut().into_iter().zip(snapshot) {
            *slot = value;
        }
        epoch
    });
    Ok(TrainReport { records, best_epoch, num_eval_users })
}

/// The primary model wired for training: parameters plus the similarity
/// graphs its forward pass propagates over, rebuilt on schedule from
/// interactions or from current embeddings.
pub struct GraphRecommender {
    pub params: ModelParams,
    pub train: RatingMatrix,
    pub graphs: Option<GraphSet>,
    inputs: Option<ForwardInputs>,
    pub knn_k: usize,
    pub rebuild_source: RebuildSource,
}

impl GraphRecommender {
    pub fn new(params: ModelParams, train: RatingMatrix, rebuild_source: RebuildSource) -> Self {
        assert_eq!(params.dims.num_users, train.num_users);
        assert_eq!(params.dims.num_items, train.num_items);
        Self { params, train, graphs: None, inputs: None, knn_k: DEFAULT_K, rebuild_source }
    }

    fn current_inputs(&self) -> &ForwardInputs {
        self.inputs.as_ref().expect("graphs never built; schedule must include epoch 0")
    }
}

impl BprModel for GraphRecommender {
    fn rebuild(&mut self, epoch: u32) -> Result<(), TrainError> {
        let graphs = match self.rebuild_source {
            RebuildSource::Interactions => rebuild_all(&self.train, self.knn_k, epoch)?,
            RebuildSource::Embeddings => rebuild_all_from_embeddings(
                self.params.user_emb.data(),
                self.params.dims.num_users,
                self.params.dims.embed_dim,
                self.knn_k,
                epoch,
            )?,
        };
        self.inputs = Some(ForwardInputs::new(&graphs, &self.params.views, &self.train));
        self.graphs = Some(graphs);
        Ok(())
    }

    fn forward_train(&self, tape: &mut Tape) -> Result<ModelVars, TrainError> {
        let fv = forward(tape, &self.params, self.current_inputs(), None)?;
        Ok(ModelVars {
            users: fv.refined_users,
            items: fv.enriched_items,
            params: fv.params.ordered(),
        })
    }

    fn forward_eval(&self) -> Result<(Tensor, Tensor), TrainError> {
        let graphs = self.graphs.as_ref().expect("graphs never built");
        let out = full_forward(&self.params, graphs, &self.train, false, 0)?;
        Ok((out.refined_users, out.enriched_items))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.collect_mut()
    }

    fn mines_hard_negatives(&self) -> bool {
        true
    }

    fn method(&self) -> &'static str {
        "dgsagnn"
    }
}
