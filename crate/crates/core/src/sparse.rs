//! CSR sparse matrices for graph propagation. Every matrix carries its
//! transpose in CSR form as well, so both A·X (forward) and Aᵀ·G (backward)
//! run as row-parallel loops with a fixed per-row accumulation order; no
//! scatter-adds, no ordering races.

use rayon::prelude::*;

use crate::data::RatingMatrix;
use crate::graph::SimilarityGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    vals: Vec<f64>,
    t_row_ptr: Vec<usize>,
    t_col_idx: Vec<u32>,
    t_vals: Vec<f64>,
}

impl SparseMatrix {
    /// Build from entries sorted by (row, col) with no duplicates.
    pub fn from_sorted_entries(
        rows: usize,
        cols: usize,
        entries: impl IntoIterator<Item = (u32, u32, f64)>,
    ) -> Self {
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        for (r, c, v) in entries {
            debug_assert!((r as usize) < rows && (c as usize) < cols);
            // sorted input: no counts recorded yet for any later row
            debug_assert!(row_ptr[r as usize + 2..].iter().all(|&p| p == 0));
            row_ptr[r as usize + 1] += 1;
            col_idx.push(c);
            vals.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }

        // counting-sort transpose, stable in row order
        let nnz = vals.len();
        let mut t_row_ptr = vec![0usize; cols + 1];
        for &c in &col_idx {
            t_row_ptr[c as usize + 1] += 1;
        }
        for c in 0..cols {
            t_row_ptr[c + 1] += t_row_ptr[c];
        }
        let mut cursor = t_row_ptr.clone();
        let mut t_col_idx = vec![0u32; nnz];
        let mut t_vals = vec![0.0f64; nnz];
        for r in 0..rows {
            for p in row_ptr[r]..row_ptr[r + 1] {
                let c = col_idx[p] as usize;
                t_col_idx[cursor[c]] = r as u32;
                t_vals[cursor[c]] = vals[p];
                cursor[c] += 1;
            }
        }

        Self { rows, cols, row_ptr, col_idx, vals, t_row_ptr, t_col_idx, t_vals }
    }

    /// Weighted adjacency of a neighbor graph: row u holds u's out-edges.
    pub fn from_graph(graph: &SimilarityGraph) -> Self {
        let n = graph.num_users();
        Self::from_sorted_entries(
            n,
            n,
            graph.neighbors.iter().enumerate().flat_map(|(u, row)| {
                let mut edges: Vec<(u32, u32, f64)> =
                    row.iter().map(|&(v, w)| (u as u32, v, w)).collect();
                edges.sort_by_key(|&(_, v, _)| v);
                edges
            }),
        )
    }

    /// Item-by-user transpose of a rating matrix, keeping raw rating values.
    pub fn rating_transpose(matrix: &RatingMatrix) -> Self {
        let mut entries: Vec<(u32, u32, f64)> = Vec::with_capacity(matrix.interaction_count());
        for u in 0..matrix.num_users {
            for &(i, r) in matrix.row(u) {
                entries.push((i, u as u32, r));
            }
        }
        entries.sort_by_key(|&(i, u, _)| (i, u));
        Self::from_sorted_entries(matrix.num_items, matrix.num_users, entries)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    /// out = self · dense, where dense is row-major cols×d. One task per
    /// output row; accumulation order inside a row follows CSR storage.
    pub fn spmm(&self, dense: &[f64], d: usize, out: &mut [f64]) {
        assert_eq!(dense.len(), self.cols * d);
        assert_eq!(out.len(), self.rows * d);
        out.par_chunks_mut(d).enumerate().for_each(|(r, out_row)| {
            out_row.fill(0.0);
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                let v = self.vals[p];
                let src = &dense[self.col_idx[p] as usize * d..][..d];
                for (o, s) in out_row.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        });
    }

    /// out = selfᵀ · dense, served by the stored transpose so it is exactly
    /// as deterministic as [`Self::spmm`].
    pub fn spmm_transposed(&self, dense: &[f64], d: usize, out: &mut [f64]) {
        assert_eq!(dense.len(), self.rows * d);
        assert_eq!(out.len(), self.cols * d);
        out.par_chunks_mut(d).enumerate().for_each(|(c, out_row)| {
            out_row.fill(0.0);
            for p in self.t_row_ptr[c]..self.t_row_ptr[c + 1] {
                let v = self.t_vals[p];
                let src = &dense[self.t_col_idx[p] as usize * d..][..d];
                for (o, s) in out_row.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mul(a: &[Vec<f64>], x: &[f64], d: usize) -> Vec<f64> {
        let mut out = vec![0.0; a.len() * d];
        for (r, row) in a.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                for t in 0..d {
                    out[r * d + t] += v * x[c * d + t];
                }
            }
        }
        out
    }

    fn sample() -> (SparseMatrix, Vec<Vec<f64>>) {
        // 3x4 with a zero row in the middle
        let dense = vec![
            vec![1.0, 0.0, 2.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0],
            vec![0.0, 3.0, 0.0, 0.5],
        ];
        let entries = [(0u32, 0u32, 1.0), (0, 2, 2.0), (2, 1, 3.0), (2, 3, 0.5)];
        (SparseMatrix::from_sorted_entries(3, 4, entries), dense)
    }

    #[test]
    fn spmm_matches_dense_product() {
        let (m, dense) = sample();
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 - 1.0).collect();
        let mut out = vec![0.0; 6];
        m.spmm(&x, 2, &mut out);
        assert_eq!(out, dense_mul(&dense, &x, 2));
    }

    #[test]
    fn transposed_spmm_matches_dense_transpose() {
        let (m, dense) = sample();
        let mut dense_t = vec![vec![0.0; 3]; 4];
        for r in 0..3 {
            for c in 0..4 {
                dense_t[c][r] = dense[r][c];
            }
        }
        let g: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        let mut out = vec![0.0; 8];
        m.spmm_transposed(&g, 2, &mut out);
        assert_eq!(out, dense_mul(&dense_t, &g, 2));
    }

    #[test]
    fn graph_rows_become_sorted_csr_rows() {
        let g = SimilarityGraph {
            kind: crate::similarity::SimilarityKind::Cosine,
            neighbors: vec![vec![(2, 0.7), (1, 0.3)], vec![], vec![(0, 1.0)]],
        };
        let m = SparseMatrix::from_graph(&g);
        assert_eq!(m.row(0).collect::<Vec<_>>(), vec![(1, 0.3), (2, 0.7)]);
        assert_eq!(m.row(1).count(), 0);
        assert_eq!(m.row(2).collect::<Vec<_>>(), vec![(0, 1.0)]);
    }

    #[test]
    fn rating_transpose_keeps_values() {
        let r = RatingMatrix::from_triplets(2, 3, [(0, 0, 5.0), (0, 2, 3.0), (1, 0, 1.0)]);
        let t = SparseMatrix::rating_transpose(&r);
        assert_eq!(t.rows, 3);
        assert_eq!(t.cols, 2);
        assert_eq!(t.row(0).collect::<Vec<_>>(), vec![(0, 5.0), (1, 1.0)]);
        assert_eq!(t.row(1).count(), 0);
        assert_eq!(t.row(2).collect::<Vec<_>>(), vec![(0, 3.0)]);
    }

    #[test]
    fn spmm_is_thread_count_invariant() {
        let (m, _) = sample();
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).cos()).collect();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut out = vec![0.0; 9];
                m.spmm(&x, 3, &mut out);
                out
            })
        };
        assert_eq!(run(1), run(4));
    }
}
