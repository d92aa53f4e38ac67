//! Offline per-layer sensitivity probing and the two-tier layer-adaptive KV
//! schedule.
//!
//! Probing raises one global layer's KV reduction factor from `base_r` to
//! `probe_r` at a time and reports the resulting degradation ratio against
//! the all-at-`base_r` run. Layers whose ratio exceeds the threshold keep
//! the base factor; the rest absorb `l` times more pruning.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::backbone::{patch_divergence, Backbone, TokenTensor};
use crate::config::ReductionConfig;
use crate::error::{Error, Result};
use crate::kvpath::KvMode;

pub const DEFAULT_PROBE_BASE_R: usize = 32;
pub const DEFAULT_PROBE_R: usize = 256;
pub const DEFAULT_TIER_THRESHOLD: f64 = 1.05;
pub const DEFAULT_MULTIPLIER_L: usize = 3;

// ── JSON helpers ───────────────────────────────────────────────────────────

pub(crate) fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| Error::Parse { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub(crate) fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| Error::Parse { path: path.to_path_buf(), source })
}

// ── Sensitivity report ─────────────────────────────────────────────────────

/// Degradation ratio of one probed global attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityEntry {
    pub layer: usize,
    pub ratio: f64,
}

/// Result of one offline probing pass: one entry per non-excluded global
/// attention layer. Excluded layers carry no ratio at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityReport {
    pub base_r: usize,
    pub probe_r: usize,
    pub entries: Vec<SensitivityEntry>,
    #[serde(default)]
    pub excluded_layers: BTreeSet<usize>,
}

impl SensitivityReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }

    /// CSV with columns `layer,ratio`; excluded layers are absent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,ratio\n");
        for e in &self.entries {
            out.push_str(&format!("{},{}\n", e.layer, e.ratio));
        }
        out
    }
}

/// Probe each non-excluded global layer: run the model with every global
/// layer at `base_r`, then re-run with the target layer raised to `probe_r`,
/// and report the ratio of the two divergences from the fully-unreduced
/// forward. The probe holds the query path at identity and prunes by
/// temporal stride.
///
/// Layers in `extra_excluded` are skipped in addition to the spec's own
/// excluded set. Probes reuse the cached per-layer activations of the base
/// run, so each probe only re-runs layers from its target onward.
pub fn probe_sensitivity(
    model: &Backbone,
    eval_input: &TokenTensor,
    base_r: usize,
    probe_r: usize,
    extra_excluded: &BTreeSet<usize>,
) -> Result<SensitivityReport> {
    if base_r < 1 || probe_r < base_r {
        return Err(Error::rejected(format!(
            "probe factors must satisfy 1 <= base_r <= probe_r, got base {base_r}, probe {probe_r}"
        )));
    }
    if eval_input.s() < probe_r {
        return Err(Error::rejected(format!(
            "eval input has {} frames; probing at r_kv {probe_r} needs at least {probe_r}",
            eval_input.s()
        )));
    }
    let mut excluded = model.spec().excluded_global_layers.clone();
    excluded.extend(extra_excluded.iter().copied());

    let base_cfg = ReductionConfig {
        r_q_override: Some(1),
        r_kv_override: Some(base_r),
        multiplier_l: 1,
        use_length_adaptive: false,
        kv_mode: KvMode::StridePrune,
        ..ReductionConfig::default()
    };
    let resolved =
        base_cfg.resolve(&model.spec().layer_kinds, &model.spec().excluded_global_layers, eval_input.s())?;

    let reference = model.reference_forward(eval_input)?;
    let (base_out, layer_inputs, _) = model.forward_traced(eval_input, &resolved)?;
    let e_base = patch_divergence(&base_out, &reference);

    let mut entries = Vec::new();
    for layer in model.spec().global_layers() {
        if excluded.contains(&layer) {
            continue;
        }
        let mut probed = resolved.clone();
        probed
            .per_layer_kv
            .get_mut(&layer)
            .expect("global layer present in resolved reduction")
            .r_kv = probe_r;
        let (out, _) = model.forward_span(layer, layer_inputs[layer].clone(), &probed, None)?;
        let e_probe = patch_divergence(&out, &reference);
        let ratio = if e_base == 0.0 {
            if e_probe == 0.0 {
                // Reduction cannot change a no-op layer stack; no degradation.
                1.0
            } else {
                return Err(Error::DegenerateProbe { layer, probe_error: e_probe });
            }
        } else {
            e_probe / e_base
        };
        entries.push(SensitivityEntry { layer, ratio });
    }
    Ok(SensitivityReport { base_r, probe_r, entries, excluded_layers: excluded })
}

// ── Tier schedule ──────────────────────────────────────────────────────────

/// Per-layer line of a tier schedule. `ratio` is absent for excluded layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerAssignment {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    pub assigned_r_kv: usize,
    pub excluded: bool,
}

/// Two-tier layer-adaptive KV schedule: high-sensitivity layers (ratio above
/// the threshold) and excluded layers keep the base factor, every other
/// layer gets `l * base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerTierSchedule {
    pub base_r_kv: usize,
    pub threshold: f64,
    pub multiplier_l: usize,
    pub layers: Vec<LayerAssignment>,
}

impl LayerTierSchedule {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }

    /// Layers that keep the base factor because their ratio exceeded the
    /// threshold (excluded layers not included).
    pub fn high_sensitivity_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| !l.excluded && l.ratio.is_some_and(|r| r > self.threshold))
            .map(|l| l.index)
            .collect()
    }
}

/// Assign per-layer KV factors from a sensitivity report: `base_r_kv` when
/// the ratio exceeds `threshold`, `l * base_r_kv` otherwise. Excluded layers
/// get the base factor and are flagged.
pub fn build_schedule(
    report: &SensitivityReport,
    base_r_kv: usize,
    threshold: f64,
    l: usize,
) -> LayerTierSchedule {
    let mut layers: Vec<LayerAssignment> = report
        .entries
        .iter()
        .map(|e| LayerAssignment {
            index: e.layer,
            ratio: Some(e.ratio),
            assigned_r_kv: if e.ratio > threshold { base_r_kv } else { l * base_r_kv },
            excluded: false,
        })
        .chain(report.excluded_layers.iter().map(|&index| LayerAssignment {
            index,
            ratio: None,
            assigned_r_kv: base_r_kv,
            excluded: true,
        }))
        .collect();
    layers.sort_by_key(|l| l.index);
    LayerTierSchedule { base_r_kv, threshold, multiplier_l: l, layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionLayerParams, LayerKind};
    use crate::backbone::{gen_synthetic_sequence, init_backbone, BackboneSpec, SequenceMode};
    use crate::kernels::Matrix;

    fn small_spec(seed: u64) -> BackboneSpec {
        BackboneSpec {
            n_layers: 4,
            layer_kinds: vec![
                LayerKind::Frame,
                LayerKind::Global,
                LayerKind::Frame,
                LayerKind::Global,
            ],
            d: 8,
            p_patch: 4,
            seed,
            excluded_global_layers: Default::default(),
        }
    }

    fn fixture_report() -> SensitivityReport {
        SensitivityReport {
            base_r: 32,
            probe_r: 256,
            entries: vec![
                SensitivityEntry { layer: 0, ratio: 1.0 },
                SensitivityEntry { layer: 1, ratio: 1.2 },
                SensitivityEntry { layer: 2, ratio: 1.04 },
            ],
            excluded_layers: BTreeSet::new(),
        }
    }

    #[test]
    fn zero_projection_globals_probe_to_ratio_one() {
        let spec = small_spec(3);
        let mut model = init_backbone(&spec).unwrap();
        let z = Matrix::zeros(spec.d, spec.d);
        for layer in spec.global_layers() {
            model.set_layer(
                layer,
                AttentionLayerParams::new(z.clone(), z.clone(), z.clone(), z.clone()).unwrap(),
            );
        }
        let x = gen_synthetic_sequence(8, spec.p_patch, spec.d, SequenceMode::Iid, 1);
        let report = probe_sensitivity(&model, &x, 2, 4, &BTreeSet::new()).unwrap();
        assert_eq!(report.entries.len(), 2);
        assert!(report.entries.iter().all(|e| e.ratio == 1.0));
    }

    #[test]
    fn probe_rejects_too_short_input() {
        let spec = small_spec(4);
        let model = init_backbone(&spec).unwrap();
        let x = gen_synthetic_sequence(3, spec.p_patch, spec.d, SequenceMode::Iid, 1);
        assert!(matches!(
            probe_sensitivity(&model, &x, 2, 4, &BTreeSet::new()),
            Err(Error::RejectedInput(_))
        ));
    }

    #[test]
    fn probe_is_deterministic() {
        let spec = small_spec(5);
        let x = gen_synthetic_sequence(8, spec.p_patch, spec.d, SequenceMode::SmoothWalk { sigma: 0.05 }, 2);
        let a = probe_sensitivity(&init_backbone(&spec).unwrap(), &x, 2, 4, &BTreeSet::new()).unwrap();
        let b = probe_sensitivity(&init_backbone(&spec).unwrap(), &x, 2, 4, &BTreeSet::new()).unwrap();
        assert_eq!(a, b);
        for (ea, eb) in a.entries.iter().zip(&b.entries) {
            assert_eq!(ea.ratio.to_bits(), eb.ratio.to_bits());
        }
    }

    #[test]
    fn probe_honors_exclusions() {
        let spec = small_spec(6);
        let model = init_backbone(&spec).unwrap();
        let x = gen_synthetic_sequence(8, spec.p_patch, spec.d, SequenceMode::Iid, 3);
        let excluded: BTreeSet<usize> = [1].into();
        let report = probe_sensitivity(&model, &x, 2, 4, &excluded).unwrap();
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.entries[0].layer, 3);
        assert!(!report.to_csv().contains("\n1,"));
    }

    #[test]
    fn build_schedule_applies_tier_rule() {
        let sched = build_schedule(&fixture_report(), 8, 1.05, 3);
        let assigned: Vec<usize> = sched.layers.iter().map(|l| l.assigned_r_kv).collect();
        assert_eq!(assigned, vec![24, 8, 24]);
    }

    #[test]
    fn multiplier_one_is_uniform() {
        let sched = build_schedule(&fixture_report(), 8, 1.05, 1);
        assert!(sched.layers.iter().all(|l| l.assigned_r_kv == 8));
    }

    #[test]
    fn all_low_sensitivity_layers_elevated() {
        let report = SensitivityReport {
            base_r: 32,
            probe_r: 256,
            entries: (0..3).map(|layer| SensitivityEntry { layer, ratio: 1.0 }).collect(),
            excluded_layers: BTreeSet::new(),
        };
        let sched = build_schedule(&report, 8, 1.05, 3);
        assert!(sched.layers.iter().all(|l| l.assigned_r_kv == 24));
    }

    #[test]
    fn excluded_layers_flagged_and_never_low_tier() {
        let mut report = fixture_report();
        report.excluded_layers.insert(5);
        let sched = build_schedule(&report, 8, 1.05, 3);
        let entry = sched.layers.iter().find(|l| l.index == 5).unwrap();
        assert!(entry.excluded);
        assert_eq!(entry.assigned_r_kv, 8);
        assert_eq!(entry.ratio, None);
        assert!(!sched.high_sensitivity_layers().contains(&5));
    }

    #[test]
    fn threshold_monotonicity() {
        // Raising the threshold never moves a layer from low to high tier.
        let report = fixture_report();
        let mut prev_high = usize::MAX;
        for threshold in [1.0, 1.05, 1.1, 1.3] {
            let high = build_schedule(&report, 8, threshold, 3).high_sensitivity_layers().len();
            assert!(high <= prev_high);
            prev_high = high;
        }
    }

    #[test]
    fn schedule_roundtrip_is_byte_stable() {
        let sched = build_schedule(&fixture_report(), 8, 1.05, 3);
        let dir = std::env::temp_dir().join("tokthin_schedule_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("schedule.json");
        sched.save(&path).unwrap();
        let bytes_a = std::fs::read(&path).unwrap();
        let loaded = LayerTierSchedule::load(&path).unwrap();
        assert_eq!(loaded, sched);
        loaded.save(&path).unwrap();
        let bytes_b = std::fs::read(&path).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn unknown_field_is_named_in_parse_error() {
        let dir = std::env::temp_dir().join("tokthin_schedule_unknown");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(
            &path,
            r#"{"base_r_kv":8,"threshold":1.05,"multiplier_l":3,"layers":[],"surprise":1}"#,
        )
        .unwrap();
        let err = LayerTierSchedule::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("surprise"), "error does not name the field: {msg}");
    }

    #[test]
    fn hand_written_schedule_loads() {
        let dir = std::env::temp_dir().join("tokthin_schedule_fixture");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("fixture.json");
        std::fs::write(
            &path,
            r#"{
  "base_r_kv": 4,
  "threshold": 1.05,
  "multiplier_l": 2,
  "layers": [
    { "index": 1, "ratio": 1.5, "assigned_r_kv": 4, "excluded": false },
    { "index": 3, "ratio": 1.0, "assigned_r_kv": 8, "excluded": false },
    { "index": 5, "assigned_r_kv": 4, "excluded": true }
  ]
}"#,
        )
        .unwrap();
        let sched = LayerTierSchedule::load(&path).unwrap();
        assert_eq!(sched.high_sensitivity_layers(), vec![1]);
        let assigned: Vec<usize> = sched.layers.iter().map(|l| l.assigned_r_kv).collect();
        assert_eq!(assigned, vec![4, 8, 4]);
    }
}
