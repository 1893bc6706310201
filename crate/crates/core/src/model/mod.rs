//! The recommender forward pass: per-view user GNNs over the similarity
//! graphs, Transformer fusion across views, rating-weighted item enrichment,
//! and cross-attention refinement over each user's strongest items.

mod ops;

pub use ops::{
    cross_attention_refine, enrich_items, fuse_views, select_top_items, user_gnn_forward,
};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::tensor::matmul_nt;
use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::data::RatingMatrix;
use crate::graph::GraphSet;
use crate::similarity::SimilarityKind;
use crate::sparse::SparseMatrix;
use crate::sub_seed;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cannot select top {k} of {num_items} items")]
    TopKTooLarge { k: usize, num_items: usize },
    #[error("checkpoint is missing array {0}")]
    MissingArray(String),
    #[error("checkpoint array {name} has shape {got:?}, expected {expected:?}")]
    ArrayShape { name: String, got: Vec<usize>, expected: Vec<usize> },
}

/// Static hyperparameters of the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub num_users: usize,
    pub num_items: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub gnn_layers: usize,
    pub encoder_layers: usize,
    pub top_refine: usize,
    pub dropout: f64,
    pub layer_attention: bool,
}

impl ModelDims {
    /// Published defaults: d=128, 4 heads, feedforward 2d, 2+2 layers,
    /// top-50 refinement, dropout 0.1.
    pub fn new(num_users: usize, num_items: usize) -> Self {
        Self {
            num_users,
            num_items,
            embed_dim: 128,
            num_heads: 4,
            ff_dim: 256,
            gnn_layers: 2,
            encoder_layers: 2,
            top_refine: 50,
            dropout: 0.1,
            layer_attention: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        assert_eq!(self.embed_dim % self.num_heads, 0);
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub alpha: Tensor,
    pub weights: Vec<Tensor>,
    pub layer_scalars: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub heads: Vec<HeadParams>,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ff1: Tensor,
    pub bf1: Tensor,
    pub ff2: Tensor,
    pub bf2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnParams {
    pub heads: Vec<HeadParams>,
    pub wc: Tensor,
}

/// All learnable state. The traversal order of `visit`, `collect_mut`, and
/// `register` must stay identical: it aligns gradients, Adam moments, and
/// checkpoint arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub views: Vec<SimilarityKind>,
    pub user_emb: Tensor,
    pub item_emb: Tensor,
    pub gnns: Vec<GnnParams>,
    pub encoder: Vec<EncoderLayerParams>,
    pub cross: CrossAttnParams,
}

fn draw_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random();
    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Tensor of independent Normal(0, std) draws, consumed in element order.
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let data = (0..shape.iter().product::<usize>()).map(|_| draw_normal(rng, std)).collect();
    Tensor::new(shape.to_vec(), data)
}

fn xavier_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit).collect();
    Tensor::new(vec![rows, cols], data)
}

fn init_head(rng: &mut ChaCha8Rng, d: usize, dh: usize) -> HeadParams {
    HeadParams {
        wq: xavier_tensor(rng, d, dh),
        bq: Tensor::zeros(&[dh]),
        wk: xavier_tensor(rng, d, dh),
        bk: Tensor::zeros(&[dh]),
        wv: xavier_tensor(rng, d, dh),
        bv: Tensor::zeros(&[dh]),
    }
}

impl ModelParams {
    /// Fresh parameters: embeddings Normal(0, 0.1), weights Xavier-uniform,
    /// self-weights α = 1, layer-mix scalars 0 (uniform softmax), layer-norm
    /// gain 1 / bias 0. All draws come from one stream derived from the run
    /// seed, in traversal order.
    pub fn init(dims: ModelDims, views: Vec<SimilarityKind>, seed: u64) -> Self {
        assert!(!views.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "init"));
        let d = dims.embed_dim;
        let dh = dims.head_dim();
        let user_emb = normal_init(&mut rng, &[dims.num_users, d], 0.1);
        let item_emb = normal_init(&mut rng, &[dims.num_items, d], 0.1);
        let gnns = views
            .iter()
            .map(|_| GnnParams {
                alpha: Tensor::scalar(1.0),
                weights: (0..dims.gnn_layers).map(|_| xavier_tensor(&mut rng, d, d)).collect(),
                layer_scalars: Tensor::zeros(&[dims.gnn_layers + 1]),
            })
            .collect();
        let encoder = (0..dims.encoder_layers)
            .map(|_| EncoderLayerParams {
                heads: (0..dims.num_heads).map(|_| init_head(&mut rng, d, dh)).collect(),
                wo: xavier_tensor(&mut rng, d, d),
                bo: Tensor::zeros(&[d]),
                ff1: xavier_tensor(&mut rng, d, dims.ff_dim),
                bf1: Tensor::zeros(&[dims.ff_dim]),
                ff2: xavier_tensor(&mut rng, dims.ff_dim, d),
                bf2: Tensor::zeros(&[d]),
                ln1_gamma: Tensor::new(vec![d], vec![1.0; d]),
                ln1_beta: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::new(vec![d], vec![1.0; d]),
                ln2_beta: Tensor::zeros(&[d]),
            })
            .collect();
        let cross = CrossAttnParams {
            heads: (0..dims.num_heads).map(|_| init_head(&mut rng, d, dh)).collect(),
            wc: xavier_tensor(&mut rng, d, d),
        };
        Self { dims, views, user_emb, item_emb, gnns, encoder, cross }
    }

    /// Read-only traversal in canonical order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor)) {
        f("user_emb", &self.user_emb);
        f("item_emb", &self.item_emb);
        for (gnn, kind) in self.gnns.iter().zip(&self.views) {
            f(&format!("gnn.{kind}.alpha"), &gnn.alpha);
            for (l, w) in gnn.weights.iter().enumerate() {
                f(&format!("gnn.{kind}.w{l}"), w);
            }
            if self.dims.layer_attention {
                f(&format!("gnn.{kind}.layer_scalars"), &gnn.layer_scalars);
            }
        }
        for (l, enc) in self.encoder.iter().enumerate() {
            for (h, head) in enc.heads.iter().enumerate() {
                f(&format!("enc{l}.head{h}.wq"), &head.wq);
                f(&format!("enc{l}.head{h}.bq"), &head.bq);
                f(&format!("enc{l}.head{h}.wk"), &head.wk);
                f(&format!("enc{l}.head{h}.bk"), &head.bk);
                f(&format!("enc{l}.head{h}.wv"), &head.wv);
                f(&format!("enc{l}.head{h}.bv"), &head.bv);
            }
            f(&format!("enc{l}.wo"), &enc.wo);
            f(&format!("enc{l}.bo"), &enc.bo);
            f(&format!("enc{l}.ff1"), &enc.ff1);
            f(&format!("enc{l}.bf1"), &enc.bf1);
            f(&format!("enc{l}.ff2"), &enc.ff2);
            f(&format!("enc{l}.bf2"), &enc.bf2);
            f(&format!("enc{l}.ln1_gamma"), &enc.ln1_gamma);
            f(&format!("enc{l}.ln1_beta"), &enc.ln1_beta);
            f(&format!("enc{l}.ln2_gamma"), &enc.ln2_gamma);
            f(&format!("enc{l}.ln2_beta"), &enc.ln2_beta);
        }
        for (h, head) in self.cross.heads.iter().enumerate() {
            f(&format!("cross.head{h}.wq"), &head.wq);
            f(&format!("cross.head{h}.bq"), &head.bq);
            f(&format!("cross.head{h}.wk"), &head.wk);
            f(&format!("cross.head{h}.bk"), &head.bk);
            f(&format!("cross.head{h}.wv"), &head.wv);
            f(&format!("cross.head{h}.bv"), &head.bv);
        }
        f("cross.wc", &self.cross.wc);
    }

    /// Mutable references in the same order as [`Self::visit`].
    pub fn collect_mut(&mut self) -> Vec<&mut Tensor> {
        let layer_attention = self.dims.layer_attention;
        let mut out: Vec<&mut Tensor> = vec![&mut self.user_emb, &mut self.item_emb];
        for gnn in &mut self.gnns {
            out.push(&mut gnn.alpha);
            for w in &mut gnn.weights {
                out.push(w);
            }
            if layer_attention {
                out.push(&mut gnn.layer_scalars);
            }
        }
        for enc in &mut self.encoder {
            for head in &mut enc.heads {
                out.extend([
                    &mut head.wq,
                    &mut head.bq,
                    &mut head.wk,
                    &mut head.bk,
                    &mut head.wv,
                    &mut head.bv,
                ]);
            }
            out.extend([
                &mut enc.wo,
                &mut enc.bo,
                &mut enc.ff1,
                &mut enc.bf1,
                &mut enc.ff2,
                &mut enc.bf2,
                &mut enc.ln1_gamma,
                &mut enc.ln1_beta,
                &mut enc.ln2_gamma,
                &mut enc.ln2_beta,
            ]);
        }
        for head in &mut self.cross.heads {
            out.extend([
                &mut head.wq,
                &mut head.bq,
                &mut head.wk,
                &mut head.bk,
                &mut head.wv,
                &mut head.bv,
            ]);
        }
        out.push(&mut self.cross.wc);
        out
    }

    /// Copy every parameter onto the tape as a trainable leaf, in the same
    /// order as [`Self::visit`].
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let user_emb = tape.param(self.user_emb.clone());
        let item_emb = tape.param(self.item_emb.clone());
        let gnns = self
            .gnns
            .iter()
            .map(|g| GnnVars {
                alpha: tape.param(g.alpha.clone()),
                weights: g.weights.iter().map(|w| tape.param(w.clone())).collect(),
                layer_scalars: tape.param(g.layer_scalars.clone()),
                trainable_scalars: self.dims.layer_attention,
            })
            .collect();
        let reg_head = |tape: &mut Tape, h: &HeadParams| HeadVars {
            wq: tape.param(h.wq.clone()),
            bq: tape.param(h.bq.clone()),
            wk: tape.param(h.wk.clone()),
            bk: tape.param(h.bk.clone()),
            wv: tape.param(h.wv.clone()),
            bv: tape.param(h.bv.clone()),
        };
        let encoder = self
            .encoder
            .iter()
            .map(|e| EncoderLayerVars {
                heads: e.heads.iter().map(|h| reg_head(tape, h)).collect(),
                wo: tape.param(e.wo.clone()),
                bo: tape.param(e.bo.clone()),
                ff1: tape.param(e.ff1.clone()),
                bf1: tape.param(e.bf1.clone()),
                ff2: tape.param(e.ff2.clone()),
                bf2: tape.param(e.bf2.clone()),
                ln1_gamma: tape.param(e.ln1_gamma.clone()),
                ln1_beta: tape.param(e.ln1_beta.clone()),
                ln2_gamma: tape.param(e.ln2_gamma.clone()),
                ln2_beta: tape.param(e.ln2_beta.clone()),
            })
            .collect();
        let cross = CrossAttnVars {
            heads: self.cross.heads.iter().map(|h| reg_head(tape, h)).collect(),
            wc: tape.param(self.cross.wc.clone()),
        };
        ParamVars { user_emb, item_emb, gnns, encoder, cross }
    }

    /// Name → tensor map for checkpointing.
    pub fn to_arrays(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, t| {
            out.insert(name.to_string(), t.clone());
        });
        out
    }

    /// Overwrite parameters from a checkpoint map; every visited name must
    /// be present with a matching shape.
    pub fn load_arrays(&mut self, arrays: &BTreeMap<String, Tensor>) -> Result<(), ModelError> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        let mut err = None;
        for (slot, name) in self.collect_mut().into_iter().zip(&names) {
            match arrays.get(name) {
                None => {
                    err.get_or_insert(ModelError::MissingArray(name.clone()));
                }
                Some(t) if t.shape() != slot.shape() => {
                    err.get_or_insert(ModelError::ArrayShape {
                        name: name.clone(),
                        got: t.shape().to_vec(),
                        expected: slot.shape().to_vec(),
                    });
                }
                Some(t) => *slot = t.clone(),
            }
        }
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GnnVars {
    pub alpha: Var,
    pub weights: Vec<Var>,
    /// Registered unconditionally; counts as trainable only with layer
    /// attention on, mirroring `ModelParams::visit`.
    pub layer_scalars: Var,
    trainable_scalars: bool,
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerVars {
    pub heads: Vec<HeadVars>,
    pub wo: Var,
    pub bo: Var,
    pub ff1: Var,
    pub bf1: Var,
    pub ff2: Var,
    pub bf2: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

#[derive(Debug, Clone)]
pub struct CrossAttnVars {
    pub heads: Vec<HeadVars>,
    pub wc: Var,
}

/// Tape handles for every registered parameter of one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub user_emb: Var,
    pub item_emb: Var,
    pub gnns: Vec<GnnVars>,
    pub encoder: Vec<EncoderLayerVars>,
    pub cross: CrossAttnVars,
}

impl ParamVars {
    /// Vars in [`ModelParams::visit`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.user_emb, self.item_emb];
        for g in &self.gnns {
            out.push(g.alpha);
            out.extend(&g.weights);
            if g.trainable_scalars {
                out.push(g.layer_scalars);
            }
        }
        for e in &self.encoder {
            for h in &e.heads {
                out.extend([h.wq, h.bq, h.wk, h.bk, h.wv, h.bv]);
            }
            out.extend([
                e.wo, e.bo, e.ff1, e.bf1, e.ff2, e.bf2, e.ln1_gamma, e.ln1_beta, e.ln2_gamma,
                e.ln2_beta,
            ]);
        }
        for h in &self.cross.heads {
            out.extend([h.wq, h.bq, h.wk, h.bk, h.wv, h.bv]);
        }
        out.push(self.cross.wc);
        out
    }
}

/// Sparse inputs of one forward pass, rebuilt only when the graphs change.
#[derive(Debug, Clone)]
pub struct ForwardInputs {
    pub view_adj: Vec<Arc<SparseMatrix>>,
    pub rating_t: Arc<SparseMatrix>,
}

impl ForwardInputs {
    pub fn new(graphs: &GraphSet, views: &[SimilarityKind], train: &RatingMatrix) -> Self {
        Self {
            view_adj: views
                .iter()
                .map(|&k| Arc::new(SparseMatrix::from_graph(graphs.get(k))))
                .collect(),
            rating_t: Arc::new(SparseMatrix::rating_transpose(train)),
        }
    }
}

/// Tape-level result of a forward pass.
pub struct ForwardVars {
    pub refined_users: Var,
    pub enriched_items: Var,
    pub top_items: Vec<Vec<u32>>,
    pub params: ParamVars,
}

/// Value-level result for evaluation and scoring.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub refined_users: Tensor,
    pub enriched_items: Tensor,
    pub top_items: Vec<Vec<u32>>,
}

/// Run the whole pipeline on the given tape. `fixed_top` bypasses top-item
/// selection, which gradient checks need to keep the selection frozen while
/// probing parameters.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    inputs: &ForwardInputs,
    fixed_top: Option<&[Vec<u32>]>,
) -> Result<ForwardVars, ModelError> {
    assert_eq!(params.views.len(), inputs.view_adj.len());
    let pv = params.register(tape);
    let view_outs: Vec<Var> = pv
        .gnns
        .iter()
        .zip(&inputs.view_adj)
        .map(|(g, adj)| {
            user_gnn_forward(tape, pv.user_emb, adj, g, params.dims.layer_attention)
        })
        .collect::<Result<_, _>>()?;
    let fused = fuse_views(tape, &view_outs, &pv.encoder, &params.dims)?;
    let items = enrich_items(tape, pv.item_emb, inputs.rating_t.clone(), fused)?;
    let top_items = match fixed_top {
        Some(t) => t.to_vec(),
        None => select_top_items(tape.value(fused), tape.value(items), params.dims.top_refine)?,
    };
    let refined = cross_attention_refine(tape, fused, items, &top_items, &pv.cross, &params.dims)?;
    Ok(ForwardVars { refined_users: refined, enriched_items: items, top_items, params: pv })
}

/// Evaluation-friendly wrapper: builds its own tape and extracts values.
/// `dropout_seed` only matters when `train_mode` is set.
pub fn full_forward(
    params: &ModelParams,
    graphs: &GraphSet,
    train: &RatingMatrix,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<ForwardOutput, ModelError> {
    let inputs = ForwardInputs::new(graphs, &params.views, train);
    let mut tape = if train_mode { Tape::train(dropout_seed) } else { Tape::eval() };
    let fv = forward(&mut tape, params, &inputs, None)?;
    Ok(ForwardOutput {
        refined_users: tape.value(fv.refined_users).clone(),
        enriched_items: tape.value(fv.enriched_items).clone(),
        top_items: fv.top_items,
    })
}

/// ŷ = U*·I′ᵀ as plain values.
pub fn score_matrix(users: &Tensor, items: &Tensor) -> Tensor {
    let (n, d) = (users.shape()[0], users.shape()[1]);
    let m = items.shape()[0];
    assert_eq!(items.shape()[1], d);
    let mut out = vec![0.0; n * m];
    matmul_nt(users.data(), items.data(), n, d, m, &mut out);
    Tensor::new(vec![n, m], out)
}
