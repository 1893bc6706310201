//! MovieLens ingestion: rating-matrix construction and the leave-one-out split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: rating {value} outside [1, 5]")]
    InvalidRating { line: usize, value: f64 },
}

/// One parsed interaction record. Timestamps are retained but unused downstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
    pub timestamp: i64,
}

/// Sparse user-item rating matrix, row-major with per-row item indices
/// strictly increasing. Immutable once built, so it can be shared freely
/// across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    pub num_users: usize,
    pub num_items: usize,
    rows: Vec<Vec<(u32, f64)>>,
}

impl RatingMatrix {
    pub fn new(num_users: usize, num_items: usize, rows: Vec<Vec<(u32, f64)>>) -> Self {
        assert_eq!(rows.len(), num_users);
        debug_assert!(rows.iter().all(|r| {
            r.windows(2).all(|w| w[0].0 < w[1].0)
                && r.iter().all(|&(i, v)| (i as usize) < num_items && v > 0.0)
        }));
        Self { num_users, num_items, rows }
    }

    pub fn empty() -> Self {
        Self { num_users: 0, num_items: 0, rows: Vec::new() }
    }

    /// Build from unsorted (user, item, rating) triplets; later duplicates of
    /// the same (user, item) pair replace earlier ones.
    pub fn from_triplets(
        num_users: usize,
        num_items: usize,
        triplets: impl IntoIterator<Item = (u32, u32, f64)>,
    ) -> Self {
        let mut maps: Vec<BTreeMap<u32, f64>> = vec![BTreeMap::new(); num_users];
        for (u, i, r) in triplets {
            maps[u as usize].insert(i, r);
        }
        let rows = maps
            .into_iter()
            .map(|m| m.into_iter().collect::<Vec<_>>())
            .collect();
        Self::new(num_users, num_items, rows)
    }

    pub fn row(&self, user: usize) -> &[(u32, f64)] {
        &self.rows[user]
    }

    pub fn rows(&self) -> &[Vec<(u32, f64)>] {
        &self.rows
    }

    /// Item indices of one user's row (the rated-item support).
    pub fn items_of(&self, user: usize) -> impl Iterator<Item = u32> + '_ {
        self.rows[user].iter().map(|&(i, _)| i)
    }

    pub fn rated(&self, user: usize, item: u32) -> bool {
        self.rows[user].binary_search_by_key(&item, |&(i, _)| i).is_ok()
    }

    pub fn interaction_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn sparsity(&self) -> f64 {
        let cells = self.num_users * self.num_items;
        if cells == 0 {
            return 0.0;
        }
        1.0 - self.interaction_count() as f64 / cells as f64
    }

    /// Replace every stored rating by 1.0, keeping the structure unchanged.
    pub fn to_implicit(&self) -> RatingMatrix {
        let rows = self
            .rows
            .iter()
            .map(|r| r.iter().map(|&(i, _)| (i, 1.0)).collect())
            .collect();
        RatingMatrix { num_users: self.num_users, num_items: self.num_items, rows }
    }
}

/// Dense-index remapping recorded during parsing: position k holds the
/// original 1-based id that was assigned dense index k.
#[derive(Debug, Clone, Default)]
pub struct IdMaps {
    pub users: Vec<u32>,
    pub items: Vec<u32>,
}

impl IdMaps {
    /// Two-column sidecar (original id, dense index), one section per entity.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str("# users: original_id\tdense_index\n");
        for (dense, orig) in self.users.iter().enumerate() {
            let _ = writeln!(out, "{orig}\t{dense}");
        }
        out.push_str("# items: original_id\tdense_index\n");
        for (dense, orig) in self.items.iter().enumerate() {
            let _ = writeln!(out, "{orig}\t{dense}");
        }
        out
    }
}

/// Parse a MovieLens `u.data` file (tab-separated `user item rating timestamp`
/// with 1-based ids) into a dense-indexed rating matrix.
pub fn parse_movielens(path: &Path) -> Result<RatingMatrix, DataError> {
    parse_movielens_full(path).map(|(m, _)| m)
}

/// As [`parse_movielens`], additionally returning the id remapping tables.
pub fn parse_movielens_full(path: &Path) -> Result<(RatingMatrix, IdMaps), DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut raw: Vec<Interaction> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (user, item, rating, timestamp) = match (
            fields.next().and_then(|f| f.trim().parse::<u32>().ok()),
            fields.next().and_then(|f| f.trim().parse::<u32>().ok()),
            fields.next().and_then(|f| f.trim().parse::<f64>().ok()),
            fields.next().and_then(|f| f.trim().parse::<i64>().ok()),
        ) {
            (Some(u), Some(i), Some(r), Some(t)) => (u, i, r, t),
            _ => {
                return Err(DataError::Malformed { line: line_no, text: line.clone() });
            }
        };
        if !(1.0..=5.0).contains(&rating) {
            return Err(DataError::InvalidRating { line: line_no, value: rating });
        }
        raw.push(Interaction { user, item, rating, timestamp });
    }

    let mut user_ids: Vec<u32> = raw.iter().map(|r| r.user).collect();
    user_ids.sort_unstable();
    user_ids.dedup();
    let mut item_ids: Vec<u32> = raw.iter().map(|r| r.item).collect();
    item_ids.sort_unstable();
    item_ids.dedup();

    let dense_user = |orig: u32| user_ids.binary_search(&orig).unwrap() as u32;
    let dense_item = |orig: u32| item_ids.binary_search(&orig).unwrap() as u32;

    // Last occurrence of a duplicate (user, item) pair wins.
    let matrix = RatingMatrix::from_triplets(
        user_ids.len(),
        item_ids.len(),
        raw.iter()
            .map(|r| (dense_user(r.user), dense_item(r.item), r.rating)),
    );
    Ok((matrix, IdMaps { users: user_ids, items: item_ids }))
}

/// Leave-one-out split: `test[u]` is the held-out item for user `u`, present
/// exactly when the user had at least two interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: RatingMatrix,
    pub test: Vec<Option<u32>>,
    pub split_seed: u64,
}

impl SplitDataset {
    pub fn num_test_users(&self) -> usize {
        self.test.iter().filter(|t| t.is_some()).count()
    }
}

/// Hold out one uniformly chosen interacted item per user with >= 2
/// interactions. Deterministic for a given matrix and seed.
pub fn leave_one_out_split(matrix: &RatingMatrix, seed: u64) -> SplitDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(matrix.num_users);
    let mut test = Vec::with_capacity(matrix.num_users);
    for u in 0..matrix.num_users {
        let row = matrix.row(u);
        if row.len() < 2 {
            rows.push(row.to_vec());
            test.push(None);
            continue;
        }
        let held = rng.random_range(0..row.len());
        let mut train_row = row.to_vec();
        let (held_item, _) = train_row.remove(held);
        rows.push(train_row);
        test.push(Some(held_item));
    }
    SplitDataset {
        train: RatingMatrix::new(matrix.num_users, matrix.num_items, rows),
        test,
        split_seed: seed,
    }
}
