//! Scaled dot-product attention and the two layer kinds of the alternating
//! backbone: frame attention (within each frame's tokens) and global
//! attention (over the concatenated sequence), with the query- and KV-path
//! reducers hooked into the global form.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenTensor;
use crate::error::{Error, Result};
use crate::kernels::{dot, matmul, softmax_row_inplace, Matrix};
use crate::kvpath::KvReducer;
use crate::merge::{unmerge, MatchStats};
use crate::qpath::{reduce_queries, QueryReducer};

/// The two self-attention forms the backbone alternates between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    /// Attention restricted to each frame's own tokens; linear in the frame
    /// count.
    Frame,
    /// Attention over all frames' tokens concatenated; quadratic in the
    /// sequence length when unreduced.
    Global,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LayerKind::Frame => "frame",
            LayerKind::Global => "global",
        })
    }
}

/// Projection weights of one attention layer; all four are `d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub d: usize,
}

impl AttentionLayerParams {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix) -> Result<Self> {
        let d = w_q.rows();
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if w.rows() != d || w.cols() != d {
                return Err(Error::rejected(format!(
                    "{name} must be {d}x{d}, got {}x{}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(AttentionLayerParams { w_q, w_k, w_v, w_o, d })
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if self.d != d {
            return Err(Error::rejected(format!(
                "layer has feature dim {}, input has {d}",
                self.d
            )));
        }
        Ok(())
    }
}

// ── SDPA ───────────────────────────────────────────────────────────────────

/// Scaled dot-product attention `softmax(q kᵀ / sqrt(d)) v`.
///
/// Rows are processed independently (and in parallel) with a streamed score
/// buffer, so no `Nq x Nkv` matrix is ever materialized; the result is
/// identical regardless of thread schedule. The output has exactly one row
/// per query token.
pub fn sdpa(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d {
        return Err(Error::rejected(format!(
            "sdpa feature dims differ: q {d}, k {}, v {}",
            k.cols(),
            v.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::rejected(format!(
            "sdpa k has {} rows but v has {}",
            k.rows(),
            v.rows()
        )));
    }
    let nkv = k.rows();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    out.data_mut()
        .par_chunks_mut(d)
        .zip(q.data().par_chunks(d))
        .for_each_init(
            || vec![0.0f64; nkv],
            |scores, (out_row, q_row)| {
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(q_row, k.row(j)) * scale;
                }
                softmax_row_inplace(scores);
                for (j, &w) in scores.iter().enumerate() {
                    let v_row = v.row(j);
                    for t in 0..d {
                        out_row[t] += w * v_row[t];
                    }
                }
            },
        );
    Ok(out)
}

// ── Layer forms ────────────────────────────────────────────────────────────

fn attend_block(block: &Matrix, params: &AttentionLayerParams) -> Result<Matrix> {
    let q = matmul(block, &params.w_q)?;
    let k = matmul(block, &params.w_k)?;
    let v = matmul(block, &params.w_v)?;
    let o = matmul(&sdpa(&q, &k, &v)?, &params.w_o)?;
    block.add(&o)
}

/// Frame attention: SDPA independently inside each frame's tokens, followed
/// by the output projection and a residual add. Frames run in parallel with
/// results independent of the execution order.
pub fn frame_attention(x: &TokenTensor, params: &AttentionLayerParams) -> Result<TokenTensor> {
    params.check_dim(x.d())?;
    let p = x.p();
    let d = x.d();
    let mut out = TokenTensor::zeros(x.s(), x.layout(), d);
    out.data_mut()
        .par_chunks_mut(p * d)
        .zip(x.data().par_chunks(p * d))
        .try_for_each(|(out_frame, in_frame)| -> Result<()> {
            let block = Matrix::from_vec(p, d, in_frame.to_vec())?;
            let res = attend_block(&block, params)?;
            out_frame.copy_from_slice(res.data());
            Ok(())
        })?;
    Ok(out)
}

/// What one reduced global-attention layer did, beyond its output tokens.
#[derive(Debug, Clone)]
pub struct GlobalAttentionOutput {
    pub tokens: TokenTensor,
    /// Reduced query row count fed to SDPA.
    pub nq: usize,
    /// Reduced key/value row count fed to SDPA.
    pub nkv: usize,
    pub q_stats: MatchStats,
    pub kv_comparisons: u64,
}

/// Global attention with asymmetric reduction: the flattened sequence is
/// merged on the query path and pruned on the KV path before the
/// projections, SDPA runs on the reduced shapes, and unmerging restores the
/// original length before the residual add.
pub fn global_attention(
    x: &TokenTensor,
    params: &AttentionLayerParams,
    qpath: &QueryReducer,
    kvpath: &KvReducer,
) -> Result<GlobalAttentionOutput> {
    params.check_dim(x.d())?;
    let flat = x.to_matrix();
    let (q_tokens, map, q_stats) = reduce_queries(&flat, x.s(), x.layout(), qpath)?;
    let kv = kvpath.reduce(&flat, x.s(), x.layout())?;

    let q = matmul(&q_tokens, &params.w_q)?;
    let k = matmul(&kv.tokens, &params.w_k)?;
    let v = matmul(&kv.tokens, &params.w_v)?;
    let o = matmul(&sdpa(&q, &k, &v)?, &params.w_o)?;
    let restored = unmerge(&o, &map)?;
    let out = flat.add(&restored)?;
    Ok(GlobalAttentionOutput {
        tokens: TokenTensor::from_matrix(x.s(), x.layout(), &out)?,
        nq: q_tokens.rows(),
        nkv: kv.tokens.rows(),
        q_stats,
        kv_comparisons: kv.comparisons,
    })
}

/// Reference unreduced global attention: projections and SDPA over the full
/// flattened sequence, no reducer machinery at all.
pub fn global_attention_unreduced(
    x: &TokenTensor,
    params: &AttentionLayerParams,
) -> Result<TokenTensor> {
    params.check_dim(x.d())?;
    let flat = x.to_matrix();
    let out = attend_block(&flat, params)?;
    TokenTensor::from_matrix(x.s(), x.layout(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{gen_synthetic_sequence, FrameLayout, SequenceMode};
    use rand::{Rng, SeedableRng};

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn seeded_params(d: usize, seed: u64) -> AttentionLayerParams {
        AttentionLayerParams::new(
            seeded_matrix(d, d, seed),
            seeded_matrix(d, d, seed + 1),
            seeded_matrix(d, d, seed + 2),
            seeded_matrix(d, d, seed + 3),
        )
        .unwrap()
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
        for (x, y) in a.data().iter().zip(b.data()) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
        }
    }

    /// Naive per-row oracle: explicit exponent/normalize loop.
    fn sdpa_oracle(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
        let d = q.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Matrix::zeros(q.rows(), d);
        for i in 0..q.rows() {
            let mut scores: Vec<f64> = (0..k.rows())
                .map(|j| {
                    let mut s = 0.0;
                    for t in 0..d {
                        s += q.get(i, t) * k.get(j, t);
                    }
                    s * scale
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let w = s / z;
                for t in 0..d {
                    out.row_mut(i)[t] += w * v.get(j, t);
                }
            }
        }
        out
    }

    #[test]
    fn sdpa_single_kv_returns_v() {
        let q = seeded_matrix(1, 4, 1);
        let k = seeded_matrix(1, 4, 2);
        let v = seeded_matrix(1, 4, 3);
        let out = sdpa(&q, &k, &v).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn sdpa_identical_value_rows_collapse() {
        let q = seeded_matrix(3, 4, 4);
        let k = seeded_matrix(2, 4, 5);
        let v_row: Vec<f64> = seeded_matrix(1, 4, 6).row(0).to_vec();
        let v = Matrix::from_rows(&[v_row.clone(), v_row.clone()]).unwrap();
        let out = sdpa(&q, &k, &v).unwrap();
        for i in 0..3 {
            for (t, want) in v_row.iter().enumerate() {
                assert!((out.get(i, t) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sdpa_matches_naive_oracle() {
        let q = seeded_matrix(6, 4, 7);
        let k = seeded_matrix(9, 4, 8);
        let v = seeded_matrix(9, 4, 9);
        assert_close(&sdpa(&q, &k, &v).unwrap(), &sdpa_oracle(&q, &k, &v), 1e-10);
    }

    #[test]
    fn sdpa_output_rows_equal_query_rows() {
        let q = seeded_matrix(5, 4, 10);
        let k = seeded_matrix(11, 4, 11);
        let v = seeded_matrix(11, 4, 12);
        assert_eq!(sdpa(&q, &k, &v).unwrap().rows(), 5);
    }

    #[test]
    fn sdpa_rejects_mismatched_shapes() {
        let q = seeded_matrix(2, 4, 13);
        let k = seeded_matrix(3, 5, 14);
        let v = seeded_matrix(3, 5, 15);
        assert!(sdpa(&q, &k, &v).is_err());
        let k2 = seeded_matrix(3, 4, 16);
        let v2 = seeded_matrix(2, 4, 17);
        assert!(sdpa(&q, &k2, &v2).is_err());
    }

    #[test]
    fn frame_attention_single_frame_equals_global() {
        let x = gen_synthetic_sequence(1, 8, 6, SequenceMode::Iid, 20);
        let params = seeded_params(6, 21);
        let per_frame = frame_attention(&x, &params).unwrap();
        let global = global_attention_unreduced(&x, &params).unwrap();
        assert_eq!(per_frame.data(), global.data());
    }

    #[test]
    fn frame_attention_zero_weights_is_identity() {
        let x = gen_synthetic_sequence(3, 8, 6, SequenceMode::Iid, 22);
        let z = Matrix::zeros(6, 6);
        let params =
            AttentionLayerParams::new(z.clone(), z.clone(), z.clone(), z).unwrap();
        let out = frame_attention(&x, &params).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn frame_attention_matches_per_frame_loop() {
        let x = gen_synthetic_sequence(3, 8, 6, SequenceMode::Iid, 23);
        let params = seeded_params(6, 24);
        let out = frame_attention(&x, &params).unwrap();
        let p = x.p();
        for f in 0..3 {
            let block = Matrix::from_vec(p, 6, x.frame(f).to_vec()).unwrap();
            let q = matmul(&block, &params.w_q).unwrap();
            let k = matmul(&block, &params.w_k).unwrap();
            let v = matmul(&block, &params.w_v).unwrap();
            let o = matmul(&sdpa_oracle(&q, &k, &v), &params.w_o).unwrap();
            let want = block.add(&o).unwrap();
            let got = Matrix::from_vec(p, 6, out.frame(f).to_vec()).unwrap();
            assert_close(&got, &want, 1e-10);
        }
    }

    #[test]
    fn identity_reducers_match_unreduced_bitwise() {
        let x = gen_synthetic_sequence(4, 8, 6, SequenceMode::Iid, 25);
        let params = seeded_params(6, 26);
        let reduced = global_attention(
            &x,
            &params,
            &QueryReducer::identity(),
            &KvReducer::identity(),
        )
        .unwrap();
        let plain = global_attention_unreduced(&x, &params).unwrap();
        assert_eq!(reduced.tokens.data(), plain.data());
        assert_eq!(reduced.nq, x.n_tokens());
        assert_eq!(reduced.nkv, x.n_tokens());
    }

    #[test]
    fn pruning_duplicate_frames_matches_unreduced() {
        // All frames identical and r_kv = S: the pruned KV set contains the
        // same distinct rows, so attention matches the unreduced output.
        let s = 5;
        let x = gen_synthetic_sequence(s, 8, 6, SequenceMode::SmoothWalk { sigma: 0.0 }, 27);
        let params = seeded_params(6, 28);
        let reduced = global_attention(
            &x,
            &params,
            &QueryReducer::identity(),
            &KvReducer::new(s, crate::kvpath::KvMode::StridePrune, 0).unwrap(),
        )
        .unwrap();
        let plain = global_attention_unreduced(&x, &params).unwrap();
        let got = reduced.tokens.to_matrix();
        let want = plain.to_matrix();
        assert_close(&got, &want, 1e-8);
        assert_eq!(reduced.nkv, x.p());
    }

    #[test]
    fn grouped_matching_equals_global_at_group_size_s() {
        let s = 6;
        let layout = FrameLayout { p_patch: 8 };
        let x = gen_synthetic_sequence(s, layout.p_patch, 6, SequenceMode::SmoothWalk { sigma: 0.05 }, 29);
        let params = seeded_params(6, 30);
        let grouped = global_attention(
            &x,
            &params,
            &QueryReducer::new(2, s).unwrap(),
            &KvReducer::identity(),
        )
        .unwrap();
        // Oracle: run the same pipeline with an explicitly global (single
        // group) matching pass.
        let flat = x.to_matrix();
        let plan = crate::merge::MergePlan::cyclic(s, layout, &[(0, s)], 2).unwrap();
        let (map, _) = crate::merge::bipartite_match(&flat, &plan).unwrap();
        let q_tokens = crate::merge::merge(&flat, &map).unwrap();
        let q = matmul(&q_tokens, &params.w_q).unwrap();
        let k = matmul(&flat, &params.w_k).unwrap();
        let v = matmul(&flat, &params.w_v).unwrap();
        let o = matmul(&sdpa(&q, &k, &v).unwrap(), &params.w_o).unwrap();
        let want = flat.add(&unmerge(&o, &map).unwrap()).unwrap();
        assert_close(&grouped.tokens.to_matrix(), &want, 1e-10);
    }
}
