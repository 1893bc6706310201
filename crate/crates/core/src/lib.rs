//! Recommender built on dynamically rebuilt user-similarity graphs. Users are
//! embedded, propagated through one GNN per similarity view, fused with a
//! small Transformer encoder, and refined by cross-attention over each user's
//! top-scored items; training is pairwise ranking with hard negatives. A
//! LightGCN baseline shares the data pipeline, trainer, and evaluator.
//!
//! Every random draw flows from one run seed through [`sub_seed`], and all
//! parallel code writes disjoint outputs and reduces in a fixed order, so
//! results are bit-identical across thread counts.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod graph;
pub mod lightgcn;
pub mod model;
pub mod similarity;
pub mod sparse;
pub mod train;

/// Derive a stream-specific seed from the run seed and a domain label.
///
/// FNV-1a over the label folded into the seed, then a splitmix64 finalizer so
/// labels differing in one byte give unrelated streams.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seed_separates_labels_and_seeds() {
        assert_eq!(sub_seed(1, "init"), sub_seed(1, "init"));
        assert_ne!(sub_seed(1, "init"), sub_seed(1, "split"));
        assert_ne!(sub_seed(1, "init"), sub_seed(2, "init"));
        assert_ne!(sub_seed(1, "ab"), sub_seed(1, "ba"));
    }
}
