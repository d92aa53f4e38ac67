//! Key-value token reduction: temporal stride pruning (the production
//! operator, zero similarity comparisons), stride merging with averaging
//! (the ablation alternative), and seeded random token pruning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FrameLayout;
use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::merge::{bipartite_match, merge, MatchStats, MergePlan};

/// How key-value tokens are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KvMode {
    /// Keep every `r_kv`-th frame, discard the rest. No similarity
    /// computation at all.
    #[default]
    StridePrune,
    /// Same destination frames as `StridePrune`, but each dropped token is
    /// matched to its most similar kept token and averaged in. Ablation
    /// only.
    StrideMergeWithAverage,
    /// Keep `ceil(N / r_kv)` tokens sampled uniformly at random (seeded).
    /// Ablation only.
    RandomTokenPrune,
}

impl std::fmt::Display for KvMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            KvMode::StridePrune => "stride-prune",
            KvMode::StrideMergeWithAverage => "stride-merge",
            KvMode::RandomTokenPrune => "random-prune",
        };
        f.write_str(name)
    }
}

/// KV-path reduction settings. `r_kv == 1` is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvReducer {
    pub r_kv: usize,
    pub mode: KvMode,
    /// Only used by `RandomTokenPrune`.
    pub seed: u64,
}

impl KvReducer {
    pub fn identity() -> Self {
        KvReducer { r_kv: 1, mode: KvMode::StridePrune, seed: 0 }
    }

    pub fn new(r_kv: usize, mode: KvMode, seed: u64) -> Result<Self> {
        if r_kv < 1 {
            return Err(Error::rejected("r_kv must be >= 1"));
        }
        Ok(KvReducer { r_kv, mode, seed })
    }

    /// Apply the configured reduction to a flattened `s * P` token matrix.
    pub fn reduce(&self, x: &Matrix, s: usize, layout: FrameLayout) -> Result<KvReduction> {
        match self.mode {
            KvMode::StridePrune => {
                let (tokens, kept_frames) = stride_prune(x, s, layout, self.r_kv)?;
                Ok(KvReduction { tokens, kept_frames, comparisons: 0 })
            }
            KvMode::StrideMergeWithAverage => {
                let (tokens, stats) = stride_merge_with_average(x, s, layout, self.r_kv)?;
                Ok(KvReduction {
                    tokens,
                    kept_frames: kept_frame_indices(s, self.r_kv),
                    comparisons: stats.comparisons,
                })
            }
            KvMode::RandomTokenPrune => {
                let (tokens, kept_tokens) = random_token_prune(x, s, layout, self.r_kv, self.seed)?;
                let p = layout.tokens_per_frame();
                let mut kept_frames: Vec<usize> = kept_tokens.iter().map(|&i| i / p).collect();
                kept_frames.dedup();
                Ok(KvReduction { tokens, kept_frames, comparisons: 0 })
            }
        }
    }
}

/// Result of a KV reduction: the reduced tokens, the frames that contributed
/// (for auditing), and the number of similarity comparisons performed.
#[derive(Debug, Clone)]
pub struct KvReduction {
    pub tokens: Matrix,
    pub kept_frames: Vec<usize>,
    pub comparisons: u64,
}

fn kept_frame_indices(s: usize, r_kv: usize) -> Vec<usize> {
    (0..s).step_by(r_kv).collect()
}

fn check_stride_args(x: &Matrix, s: usize, layout: FrameLayout, r_kv: usize) -> Result<usize> {
    if r_kv < 1 {
        return Err(Error::rejected("r_kv must be >= 1"));
    }
    let p = layout.tokens_per_frame();
    if x.rows() != s * p {
        return Err(Error::rejected(format!(
            "token count {} does not match {s} frames of {p} tokens",
            x.rows()
        )));
    }
    Ok(p)
}

/// Keep all `P` tokens of frames `{0, r_kv, 2*r_kv, ...}` in original order.
/// Performs no similarity computation and returns the kept frames.
pub fn stride_prune(
    x: &Matrix,
    s: usize,
    layout: FrameLayout,
    r_kv: usize,
) -> Result<(Matrix, Vec<usize>)> {
    let p = check_stride_args(x, s, layout, r_kv)?;
    let kept_frames = kept_frame_indices(s, r_kv);
    let indices: Vec<usize> = kept_frames
        .iter()
        .flat_map(|&f| f * p..(f + 1) * p)
        .collect();
    Ok((x.gather_rows(&indices)?, kept_frames))
}

/// Same destinations as `stride_prune`, but every dropped token is
/// bipartite-matched to its most similar kept token (a single global group)
/// and averaged in.
pub fn stride_merge_with_average(
    x: &Matrix,
    s: usize,
    layout: FrameLayout,
    r_kv: usize,
) -> Result<(Matrix, MatchStats)> {
    let p = check_stride_args(x, s, layout, r_kv)?;
    let dst: Vec<usize> = kept_frame_indices(s, r_kv)
        .into_iter()
        .flat_map(|f| f * p..(f + 1) * p)
        .collect();
    let plan = MergePlan::from_destinations(s * p, layout, dst);
    let (map, stats) = bipartite_match(x, &plan)?;
    Ok((merge(x, &map)?, stats))
}

/// Keep `ceil(N / r_kv)` tokens drawn without replacement from a seeded
/// generator, in original order.
pub fn random_token_prune(
    x: &Matrix,
    s: usize,
    layout: FrameLayout,
    r_kv: usize,
    seed: u64,
) -> Result<(Matrix, Vec<usize>)> {
    check_stride_args(x, s, layout, r_kv)?;
    let n = x.rows();
    let keep = n.div_ceil(r_kv);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<usize> = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    kept.sort_unstable();
    Ok((x.gather_rows(&kept)?, kept))
}

/// Length-adaptive key-value reduction factor.
pub fn length_adaptive_rkv(s: usize) -> usize {
    if s <= 100 {
        1
    } else {
        s.div_ceil(40)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{gen_synthetic_sequence, SequenceMode};

    const LAYOUT: FrameLayout = FrameLayout { p_patch: 16 };

    #[test]
    fn stride_keeps_all_frames_at_r_one() {
        let x = gen_synthetic_sequence(5, 16, 4, SequenceMode::Iid, 1).to_matrix();
        let (pruned, kept) = stride_prune(&x, 5, LAYOUT, 1).unwrap();
        assert_eq!(pruned, x);
        assert_eq!(kept, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn stride_starts_at_frame_zero() {
        let x = gen_synthetic_sequence(6, 16, 4, SequenceMode::Iid, 2).to_matrix();
        let (_, kept) = stride_prune(&x, 6, LAYOUT, 2).unwrap();
        assert_eq!(kept, vec![0, 2, 4]);
    }

    #[test]
    fn stride_keeps_ceil_s_over_r_frames() {
        let x = gen_synthetic_sequence(1000, 2, 2, SequenceMode::Iid, 3).to_matrix();
        let layout = FrameLayout { p_patch: 2 };
        let (pruned, kept) = stride_prune(&x, 1000, layout, 25).unwrap();
        assert_eq!(kept.len(), 40);
        assert_eq!(pruned.rows(), 40 * layout.tokens_per_frame());
    }

    #[test]
    fn stride_rejects_r_zero() {
        let x = gen_synthetic_sequence(2, 16, 2, SequenceMode::Iid, 4).to_matrix();
        assert!(stride_prune(&x, 2, LAYOUT, 0).is_err());
    }

    #[test]
    fn merge_equals_prune_on_duplicated_frames() {
        // sigma=0: every frame is bit-identical, so averaging duplicates is
        // the identity and both operators agree exactly.
        let x = gen_synthetic_sequence(8, 16, 8, SequenceMode::SmoothWalk { sigma: 0.0 }, 5)
            .to_matrix();
        let (pruned, _) = stride_prune(&x, 8, LAYOUT, 3).unwrap();
        let (merged, _) = stride_merge_with_average(&x, 8, LAYOUT, 3).unwrap();
        assert_eq!(pruned, merged);
    }

    #[test]
    fn merge_constant_clusters_yield_cluster_means() {
        // One source cluster per destination, constant within the cluster.
        let p = LAYOUT.tokens_per_frame();
        let base = gen_synthetic_sequence(1, 16, 4, SequenceMode::Iid, 6).to_matrix();
        let mut rows = Vec::new();
        for _ in 0..3 {
            for i in 0..p {
                rows.push(base.row(i).to_vec());
            }
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let (merged, _) = stride_merge_with_average(&x, 3, LAYOUT, 3).unwrap();
        for i in 0..p {
            assert_eq!(merged.row(i), base.row(i));
        }
    }

    #[test]
    fn merge_comparison_count_is_src_times_dst() {
        let s = 9;
        let x = gen_synthetic_sequence(s, 16, 4, SequenceMode::Iid, 7).to_matrix();
        let p = LAYOUT.tokens_per_frame();
        let (_, stats) = stride_merge_with_average(&x, s, LAYOUT, 3).unwrap();
        let dst = 3 * p as u64;
        let src = (s as u64 - 3) * p as u64;
        assert_eq!(stats.comparisons, src * dst);
    }

    #[test]
    fn random_prune_is_seeded_and_sized() {
        let x = gen_synthetic_sequence(10, 16, 4, SequenceMode::Iid, 8).to_matrix();
        let (a, kept_a) = random_token_prune(&x, 10, LAYOUT, 4, 99).unwrap();
        let (b, kept_b) = random_token_prune(&x, 10, LAYOUT, 4, 99).unwrap();
        assert_eq!(kept_a, kept_b);
        assert_eq!(a, b);
        assert_eq!(kept_a.len(), (10 * LAYOUT.tokens_per_frame()).div_ceil(4));
        let (_, kept_c) = random_token_prune(&x, 10, LAYOUT, 4, 100).unwrap();
        assert_ne!(kept_a, kept_c);
    }

    #[test]
    fn length_adaptive_rkv_boundaries() {
        assert_eq!(length_adaptive_rkv(100), 1);
        assert_eq!(length_adaptive_rkv(256), 7);
        assert_eq!(length_adaptive_rkv(1000), 25);
    }

    #[test]
    fn reducer_stride_prune_reports_zero_comparisons() {
        let x = gen_synthetic_sequence(12, 16, 4, SequenceMode::Iid, 9).to_matrix();
        for r in [1, 2, 5, 12, 30] {
            let red = KvReducer::new(r, KvMode::StridePrune, 0).unwrap();
            let out = red.reduce(&x, 12, LAYOUT).unwrap();
            assert_eq!(out.comparisons, 0, "r_kv={r}");
        }
    }
}
