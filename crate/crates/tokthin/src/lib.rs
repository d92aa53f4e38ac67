//! Asymmetric query/key-value token reduction for alternating-attention
//! transformer backbones, with a deterministic benchmark harness.
//!
//! Global attention over `S` frames of `P` tokens costs `O((S*P)^2)`. This
//! crate cuts that cost by compressing the two token streams differently:
//!
//! * **Query path**: intra-group token merging. Frames are split into
//!   groups of `G`, each non-destination token is matched to its most
//!   similar destination within the group by cosine similarity, matched
//!   clusters are averaged, and the original length is restored by
//!   unmerging after attention. Matching cost is linear in `S` for fixed
//!   `G`.
//! * **KV path**: temporal stride pruning. Keep every `r_kv`-th frame,
//!   drop the rest, no similarity computation at all.
//!
//! Both reduction factors scale with the input length, and an offline
//! sensitivity probe assigns each global layer to one of two KV tiers so
//! insensitive layers absorb `l` times more pruning.
//!
//! The [`backbone`] module provides a synthetic, seedable stand-in model
//! (alternating frame/global attention layers) that the harness benchmarks
//! end to end; see the crate examples for runnable entry points:
//!
//! * `reduced_forward`: one reduced forward pass with a FLOP report
//! * `sensitivity_probe`: per-layer probing and schedule construction
//! * `scaling_bench`: time/FLOP scaling across frame counts
//! * `ablation_sweep`: per-axis ablations
//! * `matching_cost`: intra-group vs. global matching cost
//! * `merge_histograms`: merge-pair distance/similarity histograms

pub mod attention;
pub mod backbone;
pub mod config;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod kvpath;
pub mod merge;
pub mod qpath;
pub mod schedule;

pub use attention::{frame_attention, global_attention, sdpa, AttentionLayerParams, LayerKind};
pub use backbone::{
    gen_synthetic_sequence, init_backbone, patch_divergence, Backbone, BackboneSpec, FrameLayout,
    SequenceMode, TokenTensor, SPECIAL_TOKENS_PER_FRAME,
};
pub use config::{ReductionConfig, ResolvedReduction};
pub use error::{Error, Result};
pub use kernels::Matrix;
pub use kvpath::{length_adaptive_rkv, KvMode, KvReducer};
pub use merge::{bipartite_match, merge, select_destinations, unmerge, MatchStats, MergeMap, MergePlan};
pub use qpath::{group_frames, length_adaptive_rq, reduce_queries, QueryReducer};
pub use schedule::{build_schedule, probe_sensitivity, LayerTierSchedule, SensitivityReport};
