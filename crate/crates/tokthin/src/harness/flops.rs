//! Closed-form FLOP accounting for the attention score, value, and
//! projection products, per layer and in total.

use crate::backbone::BackboneSpec;
use crate::config::{LayerKvAssignment, ReductionConfig};
use crate::error::Result;
use crate::kvpath::KvMode;
use crate::qpath::reduced_row_count;
use crate::LayerKind;

/// Exact FLOP counts of one layer. `score = value = 2 * nq * nkv * d`,
/// projections are `2 * rows * d^2` each (Q and O on the query path, K and V
/// on the KV path). Frame layers count `S` independent `P`-token blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerFlops {
    pub layer: usize,
    pub kind: LayerKind,
    /// Query rows fed to SDPA (per frame for frame layers).
    pub nq: usize,
    /// KV rows fed to SDPA (per frame for frame layers).
    pub nkv: usize,
    pub score_flops: u64,
    pub value_flops: u64,
    pub projection_flops: u64,
}

impl LayerFlops {
    pub fn score_value(&self) -> u64 {
        self.score_flops + self.value_flops
    }

    pub fn total(&self) -> u64 {
        self.score_flops + self.value_flops + self.projection_flops
    }
}

/// FLOP totals for one forward pass under a resolved reduction, with the
/// unreduced totals as the speedup baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub unreduced_layers: Vec<LayerFlops>,
}

impl FlopReport {
    pub fn total_score(&self) -> u64 {
        self.layers.iter().map(|l| l.score_flops).sum()
    }

    pub fn total_value(&self) -> u64 {
        self.layers.iter().map(|l| l.value_flops).sum()
    }

    pub fn total_projection(&self) -> u64 {
        self.layers.iter().map(|l| l.projection_flops).sum()
    }

    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.total()).sum()
    }

    pub fn total_unreduced(&self) -> u64 {
        self.unreduced_layers.iter().map(|l| l.total()).sum()
    }

    /// Ratio of unreduced to reduced total FLOPs.
    pub fn speedup_vs_unreduced(&self) -> f64 {
        self.total_unreduced() as f64 / self.total() as f64
    }
}

fn frame_layer_flops(layer: usize, s: usize, p: usize, d: usize) -> LayerFlops {
    let (s, p, d) = (s as u64, p as u64, d as u64);
    LayerFlops {
        layer,
        kind: LayerKind::Frame,
        nq: p as usize,
        nkv: p as usize,
        score_flops: s * 2 * p * p * d,
        value_flops: s * 2 * p * p * d,
        projection_flops: 4 * 2 * (s * p) * d * d,
    }
}

fn global_layer_flops(layer: usize, nq: usize, nkv: usize, d: usize) -> LayerFlops {
    let (nq64, nkv64, d64) = (nq as u64, nkv as u64, d as u64);
    LayerFlops {
        layer,
        kind: LayerKind::Global,
        nq,
        nkv,
        score_flops: 2 * nq64 * nkv64 * d64,
        value_flops: 2 * nq64 * nkv64 * d64,
        // Q and O projections act on the reduced query rows, K and V on the
        // reduced KV rows.
        projection_flops: 2 * (2 * nq64 + 2 * nkv64) * d64 * d64,
    }
}

/// Rows kept by the KV path for `s` frames of `p` tokens.
pub fn kv_row_count(s: usize, p: usize, assign: &LayerKvAssignment) -> usize {
    match assign.mode {
        KvMode::StridePrune | KvMode::StrideMergeWithAverage => s.div_ceil(assign.r_kv) * p,
        KvMode::RandomTokenPrune => (s * p).div_ceil(assign.r_kv),
    }
}

/// Closed-form FLOP counts for a forward pass of `spec` on `s` frames under
/// `cfg`, with the unreduced counts alongside.
pub fn count_flops(spec: &BackboneSpec, s: usize, cfg: &ReductionConfig) -> Result<FlopReport> {
    spec.validate()?;
    let resolved = cfg.resolve(&spec.layer_kinds, &spec.excluded_global_layers, s)?;
    let layout = spec.layout();
    let p = layout.tokens_per_frame();
    let n = s * p;
    let nq_reduced = reduced_row_count(s, layout, resolved.r_q)?;

    let mut layers = Vec::with_capacity(spec.n_layers);
    let mut unreduced_layers = Vec::with_capacity(spec.n_layers);
    for (i, kind) in spec.layer_kinds.iter().enumerate() {
        match kind {
            LayerKind::Frame => {
                layers.push(frame_layer_flops(i, s, p, spec.d));
                unreduced_layers.push(frame_layer_flops(i, s, p, spec.d));
            }
            LayerKind::Global => {
                let assign = resolved.per_layer_kv[&i];
                let nkv = kv_row_count(s, p, &assign);
                layers.push(global_layer_flops(i, nq_reduced, nkv, spec.d));
                unreduced_layers.push(global_layer_flops(i, n, n, spec.d));
            }
        }
    }
    Ok(FlopReport { layers, unreduced_layers })
}
