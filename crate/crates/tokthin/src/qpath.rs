//! Intra-group query merging: frames are partitioned into groups of `G`
//! consecutive frames and token merging runs independently within each
//! group, which makes the matching cost linear in the frame count instead
//! of quadratic.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::FrameLayout;
use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::merge::{bipartite_match, merge, MatchStats, MergeMap, MergePlan};

/// Default group size for intra-group matching.
pub const DEFAULT_GROUP_SIZE: usize = 20;

/// Query-path reduction settings. `r_q == 1` is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryReducer {
    pub r_q: usize,
    pub group_size: usize,
}

impl QueryReducer {
    pub fn identity() -> Self {
        QueryReducer { r_q: 1, group_size: DEFAULT_GROUP_SIZE }
    }

    pub fn new(r_q: usize, group_size: usize) -> Result<Self> {
        if r_q < 1 {
            return Err(Error::rejected("r_q must be >= 1"));
        }
        if group_size < 1 {
            return Err(Error::rejected("group size must be >= 1"));
        }
        Ok(QueryReducer { r_q, group_size })
    }
}

/// Partition `s` frames into `ceil(s / g)` contiguous ranges; all but
/// possibly the last have exactly `g` frames.
pub fn group_frames(s: usize, g: usize) -> Vec<(usize, usize)> {
    assert!(g >= 1, "group size must be >= 1");
    let mut out = Vec::with_capacity(s.div_ceil(g));
    let mut start = 0;
    while start < s {
        let end = (start + g).min(s);
        out.push((start, end));
        start = end;
    }
    out
}

/// Length-adaptive query reduction factor.
pub fn length_adaptive_rq(s: usize) -> usize {
    match s {
        0..=100 => 1,
        101..=300 => 2,
        301..=500 => 3,
        _ => 4,
    }
}

/// Number of rows left after query merging of `s` frames at factor `r_q`.
/// Depends only on the destination rule, not on the grouping.
pub fn reduced_row_count(s: usize, layout: FrameLayout, r_q: usize) -> Result<usize> {
    let p = layout.tokens_per_frame();
    Ok(crate::merge::select_destinations(0..s * p, layout, r_q)?.len())
}

/// Run destination selection, matching, and merging per group and
/// concatenate the results in group order. The returned map covers all
/// `s * P` indices.
pub fn reduce_queries(
    x: &Matrix,
    s: usize,
    layout: FrameLayout,
    reducer: &QueryReducer,
) -> Result<(Matrix, MergeMap, MatchStats)> {
    let p = layout.tokens_per_frame();
    if x.rows() != s * p {
        return Err(Error::rejected(format!(
            "token count {} does not match {s} frames of {p} tokens",
            x.rows()
        )));
    }
    let groups = group_frames(s, reducer.group_size);
    let plan = MergePlan::cyclic(s, layout, &groups, reducer.r_q)?;
    let (map, stats) = bipartite_match(x, &plan)?;
    let reduced = merge(x, &map)?;
    Ok((reduced, map, stats))
}

// ── Matching-cost probe ────────────────────────────────────────────────────

/// One row of the matching-cost table: exact comparison counts and measured
/// wall-clock time for intra-group (fixed `G`) versus global (`G = S`)
/// matching.
#[derive(Debug, Clone)]
pub struct MatchingCostRow {
    pub s: usize,
    pub grouped_comparisons: u64,
    pub grouped_time_s: f64,
    pub global_comparisons: u64,
    pub global_time_s: f64,
}

/// Measure matching cost at each `S` for a fixed group size and for global
/// matching. Tokens are seeded i.i.d. Gaussians; matching runs at `r = 2`.
pub fn matching_cost_probe(
    s_values: &[usize],
    g: usize,
    layout: FrameLayout,
    d: usize,
    seed: u64,
) -> Result<Vec<MatchingCostRow>> {
    const PROBE_R: usize = 2;
    let p = layout.tokens_per_frame();
    let mut rows = Vec::with_capacity(s_values.len());
    for &s in s_values {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ s as u64);
        let data: Vec<f64> = (0..s * p * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tokens = Matrix::from_vec(s * p, d, data)?;

        let run = |group_size: usize| -> Result<(u64, f64)> {
            let reducer = QueryReducer::new(PROBE_R, group_size)?;
            let t0 = Instant::now();
            let (_, _, stats) = reduce_queries(&tokens, s, layout, &reducer)?;
            Ok((stats.comparisons, t0.elapsed().as_secs_f64()))
        };
        let (grouped_comparisons, grouped_time_s) = run(g)?;
        let (global_comparisons, global_time_s) = run(s)?;
        rows.push(MatchingCostRow {
            s,
            grouped_comparisons,
            grouped_time_s,
            global_comparisons,
            global_time_s,
        });
    }
    Ok(rows)
}
