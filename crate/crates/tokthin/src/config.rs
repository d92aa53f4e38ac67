//! Reduction configuration and its resolution into per-layer reduction
//! factors.
//!
//! Precedence: explicit overrides beat the length-adaptive schedules, which
//! beat the defaults (factor 1). The per-layer KV factor is the resolved
//! base for high-sensitivity and excluded layers and `l * base` for
//! low-sensitivity layers; without a tier schedule every non-excluded layer
//! is treated as low-sensitivity, so `l` acts as a uniform multiplier.

use std::collections::{BTreeMap, BTreeSet};

use crate::attention::LayerKind;
use crate::error::{Error, Result};
use crate::kvpath::{length_adaptive_rkv, KvMode};
use crate::qpath::{length_adaptive_rq, DEFAULT_GROUP_SIZE};
use crate::schedule::{LayerTierSchedule, DEFAULT_MULTIPLIER_L};

/// Runtime reduction settings for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionConfig {
    /// Fixed query reduction factor; beats the length-adaptive rule.
    pub r_q_override: Option<usize>,
    /// Fixed base KV reduction factor; beats the length-adaptive rule.
    pub r_kv_override: Option<usize>,
    pub group_size: usize,
    /// Multiplier applied to the base KV factor on low-sensitivity layers.
    pub multiplier_l: usize,
    /// When no override is given, derive factors from the frame count.
    pub use_length_adaptive: bool,
    /// Tier assignment from an offline probing pass; `None` treats every
    /// non-excluded global layer as low-sensitivity.
    pub schedule: Option<LayerTierSchedule>,
    pub kv_mode: KvMode,
    /// Seed for the random KV pruning mode.
    pub seed: u64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        ReductionConfig {
            r_q_override: None,
            r_kv_override: None,
            group_size: DEFAULT_GROUP_SIZE,
            multiplier_l: DEFAULT_MULTIPLIER_L,
            use_length_adaptive: true,
            schedule: None,
            kv_mode: KvMode::StridePrune,
            seed: 0,
        }
    }
}

impl ReductionConfig {
    /// No reduction anywhere: both factors pinned to 1 and `l = 1`.
    pub fn identity() -> Self {
        ReductionConfig {
            r_q_override: Some(1),
            r_kv_override: Some(1),
            multiplier_l: 1,
            use_length_adaptive: false,
            ..ReductionConfig::default()
        }
    }

    /// Resolve the query factor for `s` frames.
    pub fn resolved_r_q(&self, s: usize) -> usize {
        self.r_q_override
            .unwrap_or_else(|| if self.use_length_adaptive { length_adaptive_rq(s) } else { 1 })
    }

    /// Resolve the base KV factor for `s` frames (before the layer tier
    /// multiplier).
    pub fn resolved_base_r_kv(&self, s: usize) -> usize {
        self.r_kv_override
            .unwrap_or_else(|| if self.use_length_adaptive { length_adaptive_rkv(s) } else { 1 })
    }

    /// Resolve per-layer reductions for a model with the given layer kinds
    /// and excluded global layers.
    pub fn resolve(
        &self,
        layer_kinds: &[LayerKind],
        excluded: &BTreeSet<usize>,
        s: usize,
    ) -> Result<ResolvedReduction> {
        if self.group_size < 1 {
            return Err(Error::config("group size must be >= 1".to_string()));
        }
        if self.multiplier_l < 1 {
            return Err(Error::config("multiplier l must be >= 1".to_string()));
        }
        if self.r_q_override.is_some_and(|r| r < 1) || self.r_kv_override.is_some_and(|r| r < 1) {
            return Err(Error::config("reduction overrides must be >= 1".to_string()));
        }
        let globals: BTreeSet<usize> = layer_kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == LayerKind::Global)
            .map(|(i, _)| i)
            .collect();
        for &i in excluded {
            if !globals.contains(&i) {
                return Err(Error::config(format!(
                    "excluded layer {i} is not a global attention layer"
                )));
            }
        }

        let r_q = self.resolved_r_q(s);
        let base_r_kv = self.resolved_base_r_kv(s);

        let mut low_sensitivity: BTreeMap<usize, bool> = BTreeMap::new();
        if let Some(sched) = &self.schedule {
            for layer in &sched.layers {
                if !globals.contains(&layer.index) {
                    return Err(Error::config(format!(
                        "schedule references layer {} which is not a global attention layer",
                        layer.index
                    )));
                }
                let low = !layer.excluded
                    && layer.ratio.is_none_or(|ratio| ratio <= sched.threshold);
                low_sensitivity.insert(layer.index, low);
            }
            for &g in &globals {
                if !low_sensitivity.contains_key(&g) {
                    return Err(Error::config(format!(
                        "schedule is missing global attention layer {g}"
                    )));
                }
            }
        }

        let per_layer_kv = globals
            .iter()
            .map(|&i| {
                let low = if excluded.contains(&i) {
                    false
                } else {
                    low_sensitivity.get(&i).copied().unwrap_or(true)
                };
                let r_kv = if low { base_r_kv * self.multiplier_l } else { base_r_kv };
                (i, LayerKvAssignment { r_kv, mode: self.kv_mode })
            })
            .collect();

        Ok(ResolvedReduction {
            s_frames: s,
            r_q,
            base_r_kv,
            group_size: self.group_size,
            per_layer_kv,
            seed: self.seed,
        })
    }
}

/// Final KV reduction for one global layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerKvAssignment {
    pub r_kv: usize,
    pub mode: KvMode,
}

/// A reduction config resolved against a concrete model and frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedReduction {
    pub s_frames: usize,
    pub r_q: usize,
    pub base_r_kv: usize,
    pub group_size: usize,
    /// Global layer index → its KV reduction.
    pub per_layer_kv: BTreeMap<usize, LayerKvAssignment>,
    pub seed: u64,
}
