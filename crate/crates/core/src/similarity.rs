//! User-user similarity measures and their parallel pairwise computation.
//!
//! All four measures operate on sparse rating rows sorted by item index and
//! accumulate over the co-rated item set in ascending item order, so results
//! are reproducible bit for bit. Each unordered pair is computed once and
//! mirrored, making the score matrix exactly symmetric.

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;

use crate::data::RatingMatrix;

const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimilarityKind {
    Cosine,
    Jaccard,
    DiscountPcc,
    IpIj,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 4] = [
        SimilarityKind::Cosine,
        SimilarityKind::Jaccard,
        SimilarityKind::DiscountPcc,
        SimilarityKind::IpIj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::Jaccard => "jaccard",
            SimilarityKind::DiscountPcc => "dpcc",
            SimilarityKind::IpIj => "ipij",
        }
    }

    fn tag(self) -> u8 {
        match self {
            SimilarityKind::Cosine => 0,
            SimilarityKind::Jaccard => 1,
            SimilarityKind::DiscountPcc => 2,
            SimilarityKind::IpIj => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => SimilarityKind::Cosine,
            1 => SimilarityKind::Jaccard,
            2 => SimilarityKind::DiscountPcc,
            3 => SimilarityKind::IpIj,
            _ => return None,
        })
    }
}

impl std::fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Dense symmetric num_users x num_users score matrix for one measure.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityScores {
    pub kind: SimilarityKind,
    pub num_users: usize,
    values: Vec<f64>,
}

impl SimilarityScores {
    /// Wrap an externally computed dense row-major matrix.
    pub fn from_dense(kind: SimilarityKind, num_users: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), num_users * num_users);
        Self { kind, num_users, values }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.num_users + v]
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.values[u * self.num_users..(u + 1) * self.num_users]
    }

    /// Binary dump: magic, format version, kind tag, dimension, row-major
    /// little-endian values.
    pub fn write_binary(&self, path: &Path) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(17 + 8 * self.values.len());
        buf.extend_from_slice(b"DGSS");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(self.kind.tag());
        buf.extend_from_slice(&(self.num_users as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)
    }

    pub fn read_binary(path: &Path) -> std::io::Result<Self> {
        use std::io::{Error, ErrorKind::InvalidData};
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"DGSS" {
            return Err(Error::new(InvalidData, "bad magic"));
        }
        let mut word = [0u8; 4];
        f.read_exact(&mut word)?;
        if u32::from_le_bytes(word) != 1 {
            return Err(Error::new(InvalidData, "unsupported version"));
        }
        let mut tag = [0u8; 1];
        f.read_exact(&mut tag)?;
        let kind = SimilarityKind::from_tag(tag[0])
            .ok_or_else(|| Error::new(InvalidData, "unknown similarity tag"))?;
        let mut dim = [0u8; 8];
        f.read_exact(&mut dim)?;
        let n = u64::from_le_bytes(dim) as usize;
        let mut values = vec![0.0f64; n * n];
        let mut cell = [0u8; 8];
        for v in &mut values {
            f.read_exact(&mut cell)?;
            *v = f64::from_le_bytes(cell);
        }
        Ok(Self { kind, num_users: n, values })
    }
}

/// Cosine similarity restricted to the co-rated item set; 0 when it is empty.
pub fn cosine_sim(r_u: &[(u32, f64)], r_v: &[(u32, f64)]) -> f64 {
    let mut num = 0.0;
    let mut su = 0.0;
    let mut sv = 0.0;
    let (mut i, mut j) = (0, 0);
    while i < r_u.len() && j < r_v.len() {
        let (iu, x) = r_u[i];
        let (iv, y) = r_v[j];
        if iu == iv {
            num += x * y;
            su += x * x;
            sv += y * y;
            i += 1;
            j += 1;
        } else if iu < iv {
            i += 1;
        } else {
            j += 1;
        }
    }
    if num == 0.0 && su == 0.0 {
        return 0.0;
    }
    num / (su.sqrt() * sv.sqrt() + EPS)
}

/// Jaccard index over two sorted item-id sets, smoothed by the same epsilon
/// as the other measures.
pub fn jaccard_sim(items_u: &[u32], items_v: &[u32]) -> f64 {
    if items_u.is_empty() && items_v.is_empty() {
        return 0.0;
    }
    let mut inter = 0usize;
    let (mut i, mut j) = (0, 0);
    while i < items_u.len() && j < items_v.len() {
        match items_u[i].cmp(&items_v[j]) {
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    let union = items_u.len() + items_v.len() - inter;
    inter as f64 / (union as f64 + EPS)
}

fn jaccard_of_rows(r_u: &[(u32, f64)], r_v: &[(u32, f64)]) -> f64 {
    if r_u.is_empty() && r_v.is_empty() {
        return 0.0;
    }
    let mut inter = 0usize;
    let (mut i, mut j) = (0, 0);
    while i < r_u.len() && j < r_v.len() {
        match r_u[i].0.cmp(&r_v[j].0) {
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    let union = r_u.len() + r_v.len() - inter;
    inter as f64 / (union as f64 + EPS)
}

/// Pearson correlation over co-rated values, discounted by |C|/(|C|+2) and
/// clipped to non-negative. Fewer than two co-rated items, or a constant
/// value vector on either side, yields 0.
pub fn dpcc_sim(r_u: &[(u32, f64)], r_v: &[(u32, f64)]) -> f64 {
    let mut n = 0usize;
    let (mut sx, mut sy, mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut i, mut j) = (0, 0);
    while i < r_u.len() && j < r_v.len() {
        let (iu, x) = r_u[i];
        let (iv, y) = r_v[j];
        if iu == iv {
            n += 1;
            sx += x;
            sy += y;
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
            i += 1;
            j += 1;
        } else if iu < iv {
            i += 1;
        } else {
            j += 1;
        }
    }
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let den_x = nf * sxx - sx * sx;
    let den_y = nf * syy - sy * sy;
    if den_x <= 0.0 || den_y <= 0.0 {
        return 0.0;
    }
    let rho = (nf * sxy - sx * sy) / (den_x * den_y).sqrt();
    (rho * nf / (nf + 2.0)).max(0.0)
}

/// Product of discounted Pearson and Jaccard: high only when users agree in
/// taste and overlap substantially in what they rated.
pub fn ipij_sim(r_u: &[(u32, f64)], r_v: &[(u32, f64)]) -> f64 {
    let d = dpcc_sim(r_u, r_v);
    if d == 0.0 {
        return 0.0;
    }
    d * jaccard_of_rows(r_u, r_v)
}

fn pair_sim(kind: SimilarityKind, r_u: &[(u32, f64)], r_v: &[(u32, f64)]) -> f64 {
    match kind {
        SimilarityKind::Cosine => cosine_sim(r_u, r_v),
        SimilarityKind::Jaccard => jaccard_of_rows(r_u, r_v),
        SimilarityKind::DiscountPcc => dpcc_sim(r_u, r_v),
        SimilarityKind::IpIj => ipij_sim(r_u, r_v),
    }
}

/// Full pairwise score matrix for one measure. Each worker owns a disjoint
/// slice of upper-triangle rows; mirroring happens afterwards in a single
/// thread, so the result does not depend on the worker count.
pub fn pairwise_similarity(matrix: &RatingMatrix, kind: SimilarityKind) -> SimilarityScores {
    let n = matrix.num_users;
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|u| {
            let row_u = matrix.row(u);
            ((u + 1)..n).map(|v| pair_sim(kind, row_u, matrix.row(v))).collect()
        })
        .collect();
    let mut values = vec![0.0f64; n * n];
    for (u, row) in upper.iter().enumerate() {
        for (off, &s) in row.iter().enumerate() {
            let v = u + 1 + off;
            values[u * n + v] = s;
            values[v * n + u] = s;
        }
    }
    SimilarityScores { kind, num_users: n, values }
}
