//! Wengert-list reverse-mode differentiation. Every op records its inputs
//! and saved intermediates on the tape at forward time; `backward` walks the
//! list once in reverse. Gradients accumulate in fixed order, so a training
//! step is reproducible bit for bit.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{
    bmm_nn, bmm_nt, bmm_tn, matmul_nn, matmul_nt, matmul_tn, transpose01, Tensor,
};
use crate::sparse::SparseMatrix;

const NORM_EPS: f64 = 1e-8;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: needs at least one input")]
    EmptyInput { op: &'static str },
    #[error("gather index {index} out of bounds for {rows} rows")]
    IndexOutOfBounds { index: u32, rows: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Handle to a tape node. Valid only for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    BmmNN { a: Var, b: Var },
    BmmNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    ScaleBy { x: Var, s: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softplus { x: Var },
    SoftmaxLast { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    MeanAxis { x: Var, axis: usize },
    MeanAll { x: Var },
    SumLast { x: Var },
    SumSquares { x: Var },
    L2NormRows { x: Var, inv_norm: Vec<f64>, clamped: Vec<bool> },
    GatherRows { x: Var, idx: Vec<u32> },
    Stack { xs: Vec<Var> },
    Transpose01 { x: Var },
    ConcatLast { xs: Vec<Var> },
    Reshape { x: Var },
    Spmm { m: Arc<SparseMatrix>, x: Var },
    WeightedSum { xs: Vec<Var>, w: Var },
    SliceRows { x: Var, start: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by tape position after a backward pass. Leaves that did
/// not participate in the loss read back as zeros.
pub struct Gradients {
    entries: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Tensor {
        match &self.entries[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.entries[v.0].as_ref()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    train_mode: bool,
}

impl Tape {
    /// Evaluation tape: dropout is the identity.
    pub fn eval() -> Self {
        Self { nodes: Vec::new(), rng: ChaCha8Rng::seed_from_u64(0), train_mode: false }
    }

    /// Training tape: dropout draws masks from a stream seeded here, so a
    /// rebuilt tape with the same seed replays identical masks.
    pub fn train(dropout_seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            train_mode: true,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train_mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
        TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    /// [n,k] x [k,m] -> [n,m]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        matmul_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), n, k, m, &mut out);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![n, m], out), Op::Matmul { a, b }, rg))
    }

    /// [s,n,k] x [s,k,m] -> [s,n,m]
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Self::mismatch("bmm", sa, sb));
        }
        let (s, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; s * n * m];
        bmm_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), s, n, k, m, &mut out);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![s, n, m], out), Op::BmmNN { a, b }, rg))
    }

    /// [s,n,k] x [s,m,k]ᵀ -> [s,n,m]
    pub fn bmm_rhs_transposed(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Self::mismatch("bmm_rhs_transposed", sa, sb));
        }
        let (s, n, k, m) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; s * n * m];
        bmm_nt(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), s, n, k, m, &mut out);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![s, n, m], out), Op::BmmNT { a, b }, rg))
    }

    /// Elementwise sum; the right side may also be a [1] scalar or a strict
    /// suffix of the left shape (broadcast over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa == sb
            || sb == [1]
            || (sb.len() < sa.len() && sa.ends_with(&sb));
        if !compatible {
            return Err(Self::mismatch("add", &sa, &sb));
        }
        let bv = self.nodes[b.0].value.data();
        let blen = bv.len();
        let mut out = self.nodes[a.0].value.data().to_vec();
        if sa == sb {
            for (o, &x) in out.iter_mut().zip(bv) {
                *o += x;
            }
        } else if blen == 1 {
            let c = bv[0];
            for o in &mut out {
                *o += c;
            }
        } else {
            for chunk in out.chunks_mut(blen) {
                for (o, &x) in chunk.iter_mut().zip(bv) {
                    *o += x;
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(sa, out), Op::Add { a, b }, rg))
    }

    /// Elementwise difference, same shapes only.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Self::mismatch("sub", &sa, &sb));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(sa, out), Op::Sub { a, b }, rg))
    }

    /// Elementwise product, same shapes only.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Self::mismatch("mul", &sa, &sb));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(sa, out), Op::Mul { a, b }, rg))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(Tensor::new(shape, out), Op::Scale { x, c }, rg)
    }

    /// Multiply by a learnable [1] scalar.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.shape(s) != [1] {
            return Err(Self::mismatch("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.nodes[s.0].value.item();
        let out: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x) || self.requires(s);
        Ok(self.push(Tensor::new(shape, out), Op::ScaleBy { x, s }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(Tensor::new(shape, out), Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(Tensor::new(shape, out), Op::Sigmoid { x }, rg)
    }

    /// ln(1 + eˣ), computed without overflow for large |x|.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(Tensor::new(shape, out), Op::Softplus { x }, rg)
    }

    /// Softmax over the last axis, max-subtracted per row.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("softmax_last needs rank >= 1");
        let mut out = self.nodes[x.0].value.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.requires(x);
        self.push(Tensor::new(shape, out), Op::SoftmaxLast { x }, rg)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm needs rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Self::mismatch("layer_norm", &shape, self.shape(gamma)));
        }
        let xs = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data().to_vec();
        let bv = self.nodes[beta.0].value.data().to_vec();
        let mut normed = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(xs.len() / d);
        let mut out = vec![0.0; xs.len()];
        for (row_i, row) in xs.chunks(d).enumerate() {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let nv = (v - mu) * is;
                normed[row_i * d + j] = nv;
                out[row_i * d + j] = gv[j] * nv + bv[j];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::new(shape, out),
            Op::LayerNorm { x, gamma, beta, normed, inv_std },
            rg,
        ))
    }

    /// Inverted dropout: identity on an eval tape, otherwise zeroes entries
    /// with probability p and scales survivors by 1/(1-p).
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train_mode || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x.0].value.len())
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(Tensor::new(shape, out), Op::Dropout { x, mask }, rg)
    }

    /// Mean over one axis; the axis disappears from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len(), "mean_axis: axis {axis} out of rank {}", shape.len());
        let (outer, mid, inner) = split_at_axis(&shape, axis);
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xs[base + i];
                }
            }
        }
        for v in &mut out {
            *v /= mid as f64;
        }
        let mut out_shape: Vec<usize> =
            shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &s)| s).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.requires(x);
        self.push(Tensor::new(out_shape, out), Op::MeanAxis { x, axis }, rg)
    }

    /// Mean of every element, as a [1] scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xs = self.nodes[x.0].value.data();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let rg = self.requires(x);
        self.push(Tensor::scalar(mean), Op::MeanAll { x }, rg)
    }

    /// Sum over the last axis; rank-1 inputs collapse to a [1] scalar.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("sum_last needs rank >= 1");
        let xs = self.nodes[x.0].value.data();
        let out: Vec<f64> = xs.chunks(d).map(|row| row.iter().sum()).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.requires(x);
        self.push(Tensor::new(out_shape, out), Op::SumLast { x }, rg)
    }

    /// Σ x², as a [1] scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().map(|&v| v * v).sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::SumSquares { x }, rg)
    }

    /// Normalize each row of a rank-2 tensor to unit L2 norm; rows with norm
    /// below epsilon are divided by epsilon instead.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Self::mismatch("l2_normalize_rows", &shape, &[]));
        }
        let d = shape[1];
        let xs = self.nodes[x.0].value.data();
        let mut out = vec![0.0; xs.len()];
        let mut inv_norm = Vec::with_capacity(shape[0]);
        let mut clamped = Vec::with_capacity(shape[0]);
        for (r, row) in xs.chunks(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            let clamp = norm < NORM_EPS;
            let inv = 1.0 / if clamp { NORM_EPS } else { norm };
            inv_norm.push(inv);
            clamped.push(clamp);
            for (j, &v) in row.iter().enumerate() {
                out[r * d + j] = v * inv;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::new(shape, out),
            Op::L2NormRows { x, inv_norm, clamped },
            rg,
        ))
    }

    /// Select rows of a rank-2 tensor by index, with repetition allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[u32]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Self::mismatch("gather_rows", &shape, &[idx.len()]));
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= n) {
            return Err(TensorError::IndexOutOfBounds { index: bad, rows: n });
        }
        let xs = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xs[i as usize * d..(i as usize + 1) * d]);
        }
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], out),
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Stack same-shape tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs.first().ok_or(TensorError::EmptyInput { op: "stack" })?;
        let base = self.shape(first).to_vec();
        let mut out = Vec::with_capacity(xs.len() * self.nodes[first.0].value.len());
        let mut rg = false;
        for &x in xs {
            if self.shape(x) != base {
                return Err(Self::mismatch("stack", &base, self.shape(x)));
            }
            out.extend_from_slice(self.nodes[x.0].value.data());
            rg |= self.requires(x);
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&base);
        Ok(self.push(Tensor::new(shape, out), Op::Stack { xs: xs.to_vec() }, rg))
    }

    /// Swap the first two axes of a rank-3 tensor.
    pub fn transpose01(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Self::mismatch("transpose01", &shape, &[]));
        }
        let (a, b, c) = (shape[0], shape[1], shape[2]);
        let mut out = vec![0.0; a * b * c];
        transpose01(self.nodes[x.0].value.data(), a, b, c, &mut out);
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(vec![b, a, c], out), Op::Transpose01 { x }, rg))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs.first().ok_or(TensorError::EmptyInput { op: "concat_last" })?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut total_last = 0;
        let mut rg = false;
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(Self::mismatch("concat_last", self.shape(first), s));
            }
            total_last += *s.last().unwrap();
            rg |= self.requires(x);
        }
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total_last];
        let mut offset = 0;
        for &x in xs {
            let d = *self.shape(x).last().unwrap();
            let xv = self.nodes[x.0].value.data();
            for r in 0..rows {
                out[r * total_last + offset..r * total_last + offset + d]
                    .copy_from_slice(&xv[r * d..(r + 1) * d]);
            }
            offset += d;
        }
        let mut shape = lead;
        shape.push(total_last);
        Ok(self.push(Tensor::new(shape, out), Op::ConcatLast { xs: xs.to_vec() }, rg))
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.nodes[x.0].value.len() {
            return Err(Self::mismatch("reshape", self.shape(x), &shape));
        }
        let value = Tensor::new(shape, self.nodes[x.0].value.data().to_vec());
        let rg = self.requires(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Sparse-dense product m · x with a constant sparse matrix.
    pub fn spmm(&mut self, m: Arc<SparseMatrix>, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != m.cols {
            return Err(Self::mismatch("spmm", &[m.rows, m.cols], &shape));
        }
        let d = shape[1];
        let mut out = vec![0.0; m.rows * d];
        m.spmm(self.nodes[x.0].value.data(), d, &mut out);
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(vec![m.rows, d], out), Op::Spmm { m, x }, rg))
    }

    /// Σ w_i · x_i for same-shape tensors and a [k] weight vector.
    pub fn weighted_sum(&mut self, xs: &[Var], w: Var) -> Result<Var, TensorError> {
        let first = *xs.first().ok_or(TensorError::EmptyInput { op: "weighted_sum" })?;
        let base = self.shape(first).to_vec();
        if self.shape(w) != [xs.len()] {
            return Err(Self::mismatch("weighted_sum", &[xs.len()], self.shape(w)));
        }
        let wv = self.nodes[w.0].value.data().to_vec();
        let mut out = vec![0.0; self.nodes[first.0].value.len()];
        let mut rg = self.requires(w);
        for (&x, &wi) in xs.iter().zip(&wv) {
            if self.shape(x) != base {
                return Err(Self::mismatch("weighted_sum", &base, self.shape(x)));
            }
            for (o, &v) in out.iter_mut().zip(self.nodes[x.0].value.data()) {
                *o += wi * v;
            }
            rg |= self.requires(x);
        }
        Ok(self.push(Tensor::new(base, out), Op::WeightedSum { xs: xs.to_vec(), w }, rg))
    }

    /// Contiguous row block [start, start+len) of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || start + len > shape[0] {
            return Err(Self::mismatch("slice_rows", &shape, &[start, len]));
        }
        let d = shape[1];
        let out = self.nodes[x.0].value.data()[start * d..(start + len) * d].to_vec();
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(vec![len, d], out), Op::SliceRows { x, start }, rg))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per tape
    /// node; only leaves are usually read.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut entries: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        entries[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = entries[i].take() else { continue };
            self.backprop_node(i, &g, &mut entries);
            // leaves keep their accumulated gradient
            if matches!(self.nodes[i].op, Op::Leaf) {
                entries[i] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { entries, shapes })
    }

    fn accum(&self, entries: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut entries[v.0] {
            Some(t) => {
                for (o, &c) in t.data_mut().iter_mut().zip(contrib.data()) {
                    *o += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, entries: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.requires(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_nt(g.data(), self.nodes[b.0].value.data(), n, m, k, &mut da);
                    self.accum(entries, *a, Tensor::new(vec![n, k], da));
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; k * m];
                    matmul_tn(self.nodes[a.0].value.data(), g.data(), n, k, m, &mut db);
                    self.accum(entries, *b, Tensor::new(vec![k, m], db));
                }
            }
            Op::BmmNN { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (s, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
                if self.requires(*a) {
                    let mut da = vec![0.0; s * n * k];
                    bmm_nt(g.data(), self.nodes[b.0].value.data(), s, n, m, k, &mut da);
                    self.accum(entries, *a, Tensor::new(sa.to_vec(), da));
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; s * k * m];
                    bmm_tn(self.nodes[a.0].value.data(), g.data(), s, n, k, m, &mut db);
                    self.accum(entries, *b, Tensor::new(sb.to_vec(), db));
                }
            }
            Op::BmmNT { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (s, n, k, m) = (sa[0], sa[1], sa[2], sb[1]);
                if self.requires(*a) {
                    let mut da = vec![0.0; s * n * k];
                    bmm_nn(g.data(), self.nodes[b.0].value.data(), s, n, m, k, &mut da);
                    self.accum(entries, *a, Tensor::new(sa.to_vec(), da));
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; s * m * k];
                    bmm_tn(g.data(), self.nodes[a.0].value.data(), s, n, m, k, &mut db);
                    self.accum(entries, *b, Tensor::new(sb.to_vec(), db));
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    self.accum(entries, *a, g.clone());
                }
                if self.requires(*b) {
                    let sb = self.shape(*b).to_vec();
                    let blen: usize = sb.iter().product();
                    if self.shape(*a) == sb {
                        self.accum(entries, *b, g.clone());
                    } else {
                        let mut db = vec![0.0; blen];
                        for chunk in g.data().chunks(blen) {
                            for (o, &c) in db.iter_mut().zip(chunk) {
                                *o += c;
                            }
                        }
                        self.accum(entries, *b, Tensor::new(sb, db));
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.requires(*a) {
                    self.accum(entries, *a, g.clone());
                }
                if self.requires(*b) {
                    let db: Vec<f64> = g.data().iter().map(|&v| -v).collect();
                    self.accum(entries, *b, Tensor::new(self.shape(*b).to_vec(), db));
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accum(entries, *a, Tensor::new(self.shape(*a).to_vec(), da));
                }
                if self.requires(*b) {
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accum(entries, *b, Tensor::new(self.shape(*b).to_vec(), db));
                }
            }
            Op::Scale { x, c } => {
                if self.requires(*x) {
                    let dx: Vec<f64> = g.data().iter().map(|&v| c * v).collect();
                    self.accum(entries, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = self.nodes[s.0].value.item();
                if self.requires(*x) {
                    let dx: Vec<f64> = g.data().iter().map(|&v| sv * v).collect();
                    self.accum(entries, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
                if self.requires(*s) {
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(&gv, &xv)| gv * xv)
                        .sum();
                    self.accum(entries, *s, Tensor::scalar(ds));
                }
            }
            Op::Relu { x } => {
                if self.requires(*x) {
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    self.accum(entries, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
            }
            Op::Sigmoid { x } => {
                if self.requires(*x) {
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * y * (1.0 - y))
                        .collect();
                    self.accum(entries, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
            }
            Op::Softplus { x } => {
                if self.requires(*x) {
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(&gv, &xv)| gv * stable_sigmoid(xv))
                        .collect();
                    self.accum(entries, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
            }
            Op::SoftmaxLast { x } => {
                if self.requires(*x) {
                    let d = *node.value.shape().last().unwrap();
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for (r, (yrow, grow)) in y.chunks(d).zip(g.data().chunks(d)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..d {
                            dx[r * d + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.accum(entries, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
            }
            Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
                let d = self.shape(*gamma)[0];
                let gv = self.nodes[gamma.0].value.data();
                if self.requires(*x) {
                    let mut dx = vec![0.0; normed.len()];
                    for (r, grow) in g.data().chunks(d).enumerate() {
                        let nrow = &normed[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        let gg: Vec<f64> = grow.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        for j in 0..d {
                            m1 += gg[j];
                            m2 += gg[j] * nrow[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] * (gg[j] - m1 - nrow[j] * m2);
                        }
                    }
                    self.accum(entries, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
                if self.requires(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (r, grow) in g.data().chunks(d).enumerate() {
                        for j in 0..d {
                            dg[j] += grow[j] * normed[r * d + j];
                        }
                    }
                    self.accum(entries, *gamma, Tensor::new(vec![d], dg));
                }
                if self.requires(*beta) {
                    let mut db = vec![0.0; d];
                    for grow in g.data().chunks(d) {
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                    self.accum(entries, *beta, Tensor::new(vec![d], db));
                }
            }
            Op::Dropout { x, mask } => {
                if self.requires(*x) {
                    let dx: Vec<f64> =
                        g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    self.accum(entries, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
            }
            Op::MeanAxis { x, axis } => {
                if self.requires(*x) {
                    let shape = self.shape(*x).to_vec();
                    let (outer, mid, inner) = split_at_axis(&shape, *axis);
                    let scale = 1.0 / mid as f64;
                    let mut dx = vec![0.0; outer * mid * inner];
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i in 0..inner {
                                dx[base + i] = g.data()[o * inner + i] * scale;
                            }
                        }
                    }
                    self.accum(entries, *x, Tensor::new(shape, dx));
                }
            }
            Op::MeanAll { x } => {
                if self.requires(*x) {
                    let n = self.nodes[x.0].value.len();
                    let gv = g.item() / n as f64;
                    self.accum(
                        entries,
                        *x,
                        Tensor::new(self.shape(*x).to_vec(), vec![gv; n]),
                    );
                }
            }
            Op::SumLast { x } => {
                if self.requires(*x) {
                    let shape = self.shape(*x).to_vec();
                    let d = *shape.last().unwrap();
                    let mut dx = Vec::with_capacity(shape.iter().product());
                    for &gv in g.data() {
                        dx.extend(std::iter::repeat(gv).take(d));
                    }
                    self.accum(entries, *x, Tensor::new(shape, dx));
                }
            }
            Op::SumSquares { x } => {
                if self.requires(*x) {
                    let gv = g.item();
                    let dx: Vec<f64> =
                        self.nodes[x.0].value.data().iter().map(|&v| 2.0 * v * gv).collect();
                    self.accum(entries, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
            }
            Op::L2NormRows { x, inv_norm, clamped } => {
                if self.requires(*x) {
                    let d = self.shape(*x)[1];
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for (r, (yrow, grow)) in y.chunks(d).zip(g.data().chunks(d)).enumerate() {
                        if clamped[r] {
                            for j in 0..d {
                                dx[r * d + j] = grow[j] * inv_norm[r];
                            }
                        } else {
                            let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                            for j in 0..d {
                                dx[r * d + j] = inv_norm[r] * (grow[j] - yrow[j] * dot);
                            }
                        }
                    }
                    self.accum(entries, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
            }
            Op::GatherRows { x, idx } => {
                if self.requires(*x) {
                    let shape = self.shape(*x).to_vec();
                    let d = shape[1];
                    let mut dx = vec![0.0; shape.iter().product()];
                    for (pos, &i) in idx.iter().enumerate() {
                        let dst = &mut dx[i as usize * d..(i as usize + 1) * d];
                        let src = &g.data()[pos * d..(pos + 1) * d];
                        for (o, &c) in dst.iter_mut().zip(src) {
                            *o += c;
                        }
                    }
                    self.accum(entries, *x, Tensor::new(shape, dx));
                }
            }
            Op::Stack { xs } => {
                let chunk = self.nodes[xs[0].0].value.len();
                for (pos, &x) in xs.iter().enumerate() {
                    if self.requires(x) {
                        let dx = g.data()[pos * chunk..(pos + 1) * chunk].to_vec();
                        self.accum(entries, x, Tensor::new(self.shape(x).to_vec(), dx));
                    }
                }
            }
            Op::Transpose01 { x } => {
                if self.requires(*x) {
                    // gradient of a transpose is the transpose of the gradient
                    let out_shape = node.value.shape();
                    let (b, a, c) = (out_shape[0], out_shape[1], out_shape[2]);
                    let mut dx = vec![0.0; b * a * c];
                    transpose01(g.data(), b, a, c, &mut dx);
                    self.accum(entries, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
            }
            Op::ConcatLast { xs } => {
                let total_last = *node.value.shape().last().unwrap();
                let rows = node.value.len() / total_last;
                let mut offset = 0;
                for &x in xs {
                    let d = *self.shape(x).last().unwrap();
                    if self.requires(x) {
                        let mut dx = vec![0.0; rows * d];
                        for r in 0..rows {
                            dx[r * d..(r + 1) * d].copy_from_slice(
                                &g.data()[r * total_last + offset..r * total_last + offset + d],
                            );
                        }
                        self.accum(entries, x, Tensor::new(self.shape(x).to_vec(), dx));
                    }
                    offset += d;
                }
            }
            Op::Reshape { x } => {
                if self.requires(*x) {
                    self.accum(
                        entries,
                        *x,
                        Tensor::new(self.shape(*x).to_vec(), g.data().to_vec()),
                    );
                }
            }
            Op::Spmm { m, x } => {
                if self.requires(*x) {
                    let d = self.shape(*x)[1];
                    let mut dx = vec![0.0; m.cols * d];
                    m.spmm_transposed(g.data(), d, &mut dx);
                    self.accum(entries, *x, Tensor::new(vec![m.cols, d], dx));
                }
            }
            Op::WeightedSum { xs, w } => {
                let wv = self.nodes[w.0].value.data().to_vec();
                for (&x, &wi) in xs.iter().zip(&wv) {
                    if self.requires(x) {
                        let dx: Vec<f64> = g.data().iter().map(|&v| wi * v).collect();
                        self.accum(entries, x, Tensor::new(self.shape(x).to_vec(), dx));
                    }
                }
                if self.requires(*w) {
                    let dw: Vec<f64> = xs
                        .iter()
                        .map(|&x| {
                            self.nodes[x.0]
                                .value
                                .data()
                                .iter()
                                .zip(g.data())
                                .map(|(&xv, &gv)| xv * gv)
                                .sum()
                        })
                        .collect();
                    self.accum(entries, *w, Tensor::new(vec![xs.len()], dw));
                }
            }
            Op::SliceRows { x, start } => {
                if self.requires(*x) {
                    let shape = self.shape(*x).to_vec();
                    let d = shape[1];
                    let mut dx = vec![0.0; shape.iter().product()];
                    dx[start * d..start * d + g.data().len()].copy_from_slice(g.data());
                    self.accum(entries, *x, Tensor::new(shape, dx));
                }
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
