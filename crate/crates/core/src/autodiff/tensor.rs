//! Dense row-major f64 tensors and the handful of matrix kernels the tape
//! ops are built from. Kernels parallelize over output rows only; within a
//! row the accumulation order is fixed, keeping results independent of the
//! thread count.

use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar());
        self.data[0]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2);
        &self.data[r * self.shape[1]..(r + 1) * self.shape[1]]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Self { shape, data: self.data.clone() }
    }
}

/// out[n,m] = a[n,k] · b[k,m]
pub fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    out.par_chunks_mut(m).enumerate().for_each(|(i, out_row)| {
        out_row.fill(0.0);
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * m..(t + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

/// out[n,m] = a[n,k] · b[m,k]ᵀ
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    out.par_chunks_mut(m).enumerate().for_each(|(i, out_row)| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            *o = acc;
        }
    });
}

/// out[k,m] = a[n,k]ᵀ · b[n,m]
pub fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    out.par_chunks_mut(m).enumerate().for_each(|(t, out_row)| {
        out_row.fill(0.0);
        for i in 0..n {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

fn seq_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        out_row.fill(0.0);
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * m..(t + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn seq_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            out[i * m + j] = acc;
        }
    }
}

fn seq_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for t in 0..k {
        out[t * m..(t + 1) * m].fill(0.0);
    }
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[t * m..(t + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Batched out[b,n,m] = a[b,n,k] · b[b,k,m]; one task per batch element.
pub fn bmm_nn(a: &[f64], b: &[f64], batch: usize, n: usize, k: usize, m: usize, out: &mut [f64]) {
    out.par_chunks_mut(n * m).enumerate().for_each(|(s, o)| {
        seq_nn(&a[s * n * k..(s + 1) * n * k], &b[s * k * m..(s + 1) * k * m], n, k, m, o);
    });
    debug_assert_eq!(out.len(), batch * n * m);
}

/// Batched out[b,n,m] = a[b,n,k] · b[b,m,k]ᵀ
pub fn bmm_nt(a: &[f64], b: &[f64], batch: usize, n: usize, k: usize, m: usize, out: &mut [f64]) {
    out.par_chunks_mut(n * m).enumerate().for_each(|(s, o)| {
        seq_nt(&a[s * n * k..(s + 1) * n * k], &b[s * m * k..(s + 1) * m * k], n, k, m, o);
    });
    debug_assert_eq!(out.len(), batch * n * m);
}

/// Batched out[b,k,m] = a[b,n,k]ᵀ · b[b,n,m]
pub fn bmm_tn(a: &[f64], b: &[f64], batch: usize, n: usize, k: usize, m: usize, out: &mut [f64]) {
    out.par_chunks_mut(k * m).enumerate().for_each(|(s, o)| {
        seq_tn(&a[s * n * k..(s + 1) * n * k], &b[s * n * m..(s + 1) * n * m], n, k, m, o);
    });
    debug_assert_eq!(out.len(), batch * k * m);
}

/// [a,b,c] -> [b,a,c]
pub fn transpose01(x: &[f64], a: usize, b: usize, c: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), a * b * c);
    debug_assert_eq!(out.len(), a * b * c);
    for i in 0..a {
        for j in 0..b {
            let src = &x[(i * b + j) * c..(i * b + j + 1) * c];
            out[(j * a + i) * c..(j * a + i + 1) * c].copy_from_slice(src);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_is_identity() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let x = [2.0, -1.0, 0.5, 3.0];
        let mut out = [0.0; 4];
        matmul_nn(&eye, &x, 2, 2, 2, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [0.5, -1.0, 2.0, 0.0, 1.0, 1.5]; // 3x2
        let mut nn = [0.0; 4];
        matmul_nn(&a, &b, 2, 3, 2, &mut nn);

        // b as 2x3 transposed equals the original 3x2
        let bt = [0.5, 2.0, 1.0, -1.0, 0.0, 1.5];
        let mut nt = [0.0; 4];
        matmul_nt(&a, &bt, 2, 3, 2, &mut nt);
        assert_eq!(nn, nt);

        // a as 3x2 transposed equals the original 2x3
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut tn = [0.0; 4];
        matmul_tn(&at, &b, 3, 2, 2, &mut tn);
        assert_eq!(nn, tn);
    }

    #[test]
    fn batched_matmul_matches_per_batch_calls() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect(); // 2x2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect(); // 2x3x2
        let mut batched = vec![0.0; 8];
        bmm_nn(&a, &b, 2, 2, 3, 2, &mut batched);
        for s in 0..2 {
            let mut single = vec![0.0; 4];
            matmul_nn(&a[s * 6..(s + 1) * 6], &b[s * 6..(s + 1) * 6], 2, 3, 2, &mut single);
            assert_eq!(&batched[s * 4..(s + 1) * 4], &single[..]);
        }
    }

    #[test]
    fn bmm_nt_and_tn_are_transposed_products() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect(); // 2x2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64 * 0.4).cos()).collect();

        // nt: treat b as 2x2x3, output 2x2x2
        let mut nt = vec![0.0; 8];
        bmm_nt(&a, &b, 2, 2, 3, 2, &mut nt);
        let mut bt = vec![0.0; 12];
        for s in 0..2 {
            transpose01(&b[s * 6..(s + 1) * 6], 2, 3, 1, &mut bt[s * 6..(s + 1) * 6]);
        }
        let mut nn = vec![0.0; 8];
        bmm_nn(&a, &bt, 2, 2, 3, 2, &mut nn);
        assert_eq!(nt, nn);

        // tn: aᵀ per batch, output 2x3x(3) against b as 2x2x3
        let mut tn = vec![0.0; 18];
        bmm_tn(&a, &b, 2, 2, 3, 3, &mut tn);
        let mut at = vec![0.0; 12];
        for s in 0..2 {
            transpose01(&a[s * 6..(s + 1) * 6], 2, 3, 1, &mut at[s * 6..(s + 1) * 6]);
        }
        let mut via_nn = vec![0.0; 18];
        bmm_nn(&at, &b, 2, 3, 2, 3, &mut via_nn);
        assert_eq!(tn, via_nn);
    }

    #[test]
    fn transpose01_swaps_leading_axes() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect(); // [2,3,2]
        let mut out = vec![0.0; 12];
        transpose01(&x, 2, 3, 2, &mut out);
        // element (i,j,:) moves to (j,i,:)
        assert_eq!(&out[0..2], &[0.0, 1.0]); // (0,0)
        assert_eq!(&out[2..4], &[6.0, 7.0]); // was (1,0)
        assert_eq!(&out[4..6], &[2.0, 3.0]); // was (0,1)
    }

    #[test]
    fn kernels_are_thread_count_invariant() {
        let a: Vec<f64> = (0..60).map(|i| (i as f64 * 0.13).sin()).collect();
        let b: Vec<f64> = (0..60).map(|i| (i as f64 * 0.29).cos()).collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut out = vec![0.0; 36];
                matmul_nn(&a, &b, 6, 10, 6, &mut out);
                out
            })
        };
        assert_eq!(run(1), run(8));
    }
}
