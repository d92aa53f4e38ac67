//! Benchmark orchestration: single runs with reports, scaling sweeps across
//! frame counts, and the per-axis ablation sweeps, all emitting fixed-schema
//! CSV. Timing uses medians of repeated runs; everything except the timing
//! columns is deterministic given seed and config.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    gen_synthetic_sequence, init_backbone, patch_divergence, Backbone, BackboneSpec, RunStats,
    SequenceMode, TokenTensor,
};
use crate::config::ReductionConfig;
use crate::error::{Error, Result};
use crate::harness::flops::{count_flops, FlopReport};
use crate::kvpath::{length_adaptive_rkv, KvMode};
use crate::qpath::{length_adaptive_rq, MatchingCostRow};
use crate::schedule::load_json;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    xs[xs.len() / 2]
}

/// Run `model.forward` `reps` times; returns the median wall-clock seconds
/// plus the (identical) output and stats of the last run.
pub fn time_forward(
    model: &Backbone,
    x: &TokenTensor,
    cfg: &ReductionConfig,
    reps: usize,
) -> Result<(f64, TokenTensor, RunStats)> {
    assert!(reps >= 1);
    let mut times = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let t0 = Instant::now();
        let out = model.forward(x, cfg)?;
        times.push(t0.elapsed().as_secs_f64());
        last = Some(out);
    }
    let (out, stats) = last.expect("at least one rep");
    Ok((median(times), out, stats))
}

// ── Single run ─────────────────────────────────────────────────────────────

/// Everything `run` needs: the model, the input, and the reduction.
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub spec: BackboneSpec,
    pub frames: usize,
    pub sequence: SequenceMode,
    pub data_seed: u64,
    pub cfg: ReductionConfig,
    /// Compute divergence against the unreduced forward (costs one
    /// unreduced pass).
    pub with_divergence: bool,
    pub timing_reps: usize,
}

impl RunRequest {
    pub fn new(spec: BackboneSpec, frames: usize) -> Self {
        RunRequest {
            spec,
            frames,
            sequence: SequenceMode::SmoothWalk { sigma: 0.05 },
            data_seed: 0,
            cfg: ReductionConfig::default(),
            with_divergence: true,
            timing_reps: 1,
        }
    }
}

/// Outcome of one benchmarked forward pass.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub resolved_r_q: usize,
    pub resolved_base_r_kv: usize,
    pub flops: FlopReport,
    pub stats: RunStats,
    pub wall_s: f64,
    pub divergence: Option<f64>,
}

pub fn run_report(req: &RunRequest) -> Result<RunOutcome> {
    let model = init_backbone(&req.spec)?;
    let x = gen_synthetic_sequence(
        req.frames,
        req.spec.p_patch,
        req.spec.d,
        req.sequence,
        req.data_seed,
    );
    let (wall_s, out, stats) = time_forward(&model, &x, &req.cfg, req.timing_reps)?;
    let flops = count_flops(&req.spec, req.frames, &req.cfg)?;
    let divergence = if req.with_divergence {
        let (reference, _) = model.forward(&x, &ReductionConfig::identity())?;
        Some(patch_divergence(&out, &reference))
    } else {
        None
    };
    Ok(RunOutcome {
        resolved_r_q: req.cfg.resolved_r_q(req.frames),
        resolved_base_r_kv: req.cfg.resolved_base_r_kv(req.frames),
        flops,
        stats,
        wall_s,
        divergence,
    })
}

/// CSV for one run: per-layer FLOP rows plus a summary row. Columns:
/// `record,layer,kind,r_q,r_kv,nq,nkv,score_flops,value_flops,projection_flops,time_s,divergence,speedup`.
pub fn run_csv(outcome: &RunOutcome) -> String {
    let mut out = String::from(
        "record,layer,kind,r_q,r_kv,nq,nkv,score_flops,value_flops,projection_flops,time_s,divergence,speedup\n",
    );
    for (fl, st) in outcome.flops.layers.iter().zip(&outcome.stats.layers) {
        let _ = writeln!(
            out,
            "layer,{},{},{},{},{},{},{},{},{},,,",
            fl.layer,
            fl.kind,
            st.r_q,
            st.r_kv,
            fl.nq,
            fl.nkv,
            fl.score_flops,
            fl.value_flops,
            fl.projection_flops,
        );
    }
    let divergence = outcome
        .divergence
        .map(|d| format!("{d:e}"))
        .unwrap_or_default();
    let _ = writeln!(
        out,
        "summary,,,{},{},,,{},{},{},{:.6},{},{:.3}",
        outcome.resolved_r_q,
        outcome.resolved_base_r_kv,
        outcome.flops.total_score(),
        outcome.flops.total_value(),
        outcome.flops.total_projection(),
        outcome.wall_s,
        divergence,
        outcome.flops.speedup_vs_unreduced(),
    );
    out
}

// ── Scaling sweep ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub s: usize,
    pub config: String,
    pub time_s: f64,
    pub flops: u64,
    pub divergence: f64,
}

/// Named reduction configs for scaling sweeps.
pub fn named_config(name: &str) -> Result<ReductionConfig> {
    match name {
        "unreduced" => Ok(ReductionConfig::identity()),
        "adaptive" => Ok(ReductionConfig::default()),
        "adaptive-uniform" => Ok(ReductionConfig { multiplier_l: 1, ..ReductionConfig::default() }),
        other => Err(Error::config(format!(
            "unknown config name `{other}` (expected unreduced, adaptive, or adaptive-uniform)"
        ))),
    }
}

/// For each frame count and named config: median forward time, total FLOPs,
/// and divergence from the unreduced forward at the same frame count.
/// Configurations run sequentially for timing fidelity; see
/// [`bench_scaling_parallel`] for untimed concurrent runs.
pub fn bench_scaling(
    spec: &BackboneSpec,
    s_values: &[usize],
    config_names: &[String],
    sequence: SequenceMode,
    data_seed: u64,
    reps: usize,
) -> Result<Vec<ScalingRow>> {
    let model = init_backbone(spec)?;
    let mut rows = Vec::new();
    for &s in s_values {
        rows.extend(scaling_rows_for_s(&model, spec, s, config_names, sequence, data_seed, reps, true)?);
    }
    Ok(rows)
}

/// Parallel variant: frame counts run concurrently, so wall-clock numbers
/// would be meaningless and the `time_s` column is emitted as NaN. FLOPs
/// and divergence are unaffected (rows stay deterministic and ordered).
pub fn bench_scaling_parallel(
    spec: &BackboneSpec,
    s_values: &[usize],
    config_names: &[String],
    sequence: SequenceMode,
    data_seed: u64,
) -> Result<Vec<ScalingRow>> {
    use rayon::prelude::*;
    let model = init_backbone(spec)?;
    let nested: Vec<Vec<ScalingRow>> = s_values
        .par_iter()
        .map(|&s| scaling_rows_for_s(&model, spec, s, config_names, sequence, data_seed, 1, false))
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

#[allow(clippy::too_many_arguments)]
fn scaling_rows_for_s(
    model: &Backbone,
    spec: &BackboneSpec,
    s: usize,
    config_names: &[String],
    sequence: SequenceMode,
    data_seed: u64,
    reps: usize,
    timed: bool,
) -> Result<Vec<ScalingRow>> {
    let x = gen_synthetic_sequence(s, spec.p_patch, spec.d, sequence, data_seed);
    let mut baseline: Option<TokenTensor> = None;
    let mut pending: Vec<(String, f64, u64, TokenTensor, bool)> = Vec::new();
    for name in config_names {
        let cfg = named_config(name)?;
        let (time_s, out, _) = time_forward(model, &x, &cfg, reps)?;
        let flops = count_flops(spec, s, &cfg)?.total();
        let is_identity = name == "unreduced";
        if is_identity {
            baseline = Some(out.clone());
        }
        pending.push((name.clone(), if timed { time_s } else { f64::NAN }, flops, out, is_identity));
    }
    let baseline = match baseline {
        Some(b) => b,
        None => model.forward(&x, &ReductionConfig::identity())?.0,
    };
    Ok(pending
        .into_iter()
        .map(|(config, time_s, flops, out, is_identity)| {
            let divergence = if is_identity { 0.0 } else { patch_divergence(&out, &baseline) };
            ScalingRow { s, config, time_s, flops, divergence }
        })
        .collect())
}

/// CSV columns: `S,config,time_s,flops,divergence`.
pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from("S,config,time_s,flops,divergence\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{:e}",
            r.s, r.config, r.time_s, r.flops, r.divergence
        );
    }
    out
}

/// CSV columns: `S,grouped_comparisons,grouped_time_s,global_comparisons,global_time_s`.
pub fn matching_cost_csv(rows: &[MatchingCostRow]) -> String {
    let mut out =
        String::from("S,grouped_comparisons,grouped_time_s,global_comparisons,global_time_s\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{:.6}",
            r.s, r.grouped_comparisons, r.grouped_time_s, r.global_comparisons, r.global_time_s
        );
    }
    out
}

pub use crate::qpath::matching_cost_probe as matching_cost;

// ── Ablations ──────────────────────────────────────────────────────────────

/// One swept axis with its values. Each axis pins the other knobs the way
/// the corresponding ablation isolates it: reduction sweeps hold the other
/// path at factor 1 with a uniform layer schedule, the multiplier sweep
/// holds `r_q = 1, r_kv = 8`, the group-size sweep holds the length-adaptive
/// `r_q` with the KV path off, and the mode sweep holds the length-adaptive
/// `r_kv` with the query path off.
#[derive(Debug, Clone)]
pub enum AxisSweep {
    RQ(Vec<usize>),
    RKv(Vec<usize>),
    Multiplier(Vec<usize>),
    GroupSize(Vec<usize>),
    KvMode(Vec<KvMode>),
}

impl AxisSweep {
    pub fn axis_name(&self) -> &'static str {
        match self {
            AxisSweep::RQ(_) => "rq",
            AxisSweep::RKv(_) => "rkv",
            AxisSweep::Multiplier(_) => "l",
            AxisSweep::GroupSize(_) => "G",
            AxisSweep::KvMode(_) => "kv_mode",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub axis: &'static str,
    pub value: String,
    pub time_s: f64,
    pub flops: u64,
    pub divergence: f64,
}

/// Sweep one axis, emitting median time and divergence per value.
pub fn ablate(
    spec: &BackboneSpec,
    frames: usize,
    sequence: SequenceMode,
    data_seed: u64,
    sweep: &AxisSweep,
    reps: usize,
) -> Result<Vec<AblationRow>> {
    let model = init_backbone(spec)?;
    let x = gen_synthetic_sequence(frames, spec.p_patch, spec.d, sequence, data_seed);
    let (baseline, _) = model.forward(&x, &ReductionConfig::identity())?;

    let uniform = ReductionConfig {
        r_q_override: Some(1),
        r_kv_override: Some(1),
        multiplier_l: 1,
        use_length_adaptive: false,
        ..ReductionConfig::default()
    };
    let cases: Vec<(String, ReductionConfig)> = match sweep {
        AxisSweep::RQ(values) => values
            .iter()
            .map(|&v| (v.to_string(), ReductionConfig { r_q_override: Some(v), ..uniform.clone() }))
            .collect(),
        AxisSweep::RKv(values) => values
            .iter()
            .map(|&v| (v.to_string(), ReductionConfig { r_kv_override: Some(v), ..uniform.clone() }))
            .collect(),
        AxisSweep::Multiplier(values) => values
            .iter()
            .map(|&v| {
                (
                    v.to_string(),
                    ReductionConfig {
                        r_kv_override: Some(8),
                        multiplier_l: v,
                        ..uniform.clone()
                    },
                )
            })
            .collect(),
        AxisSweep::GroupSize(values) => values
            .iter()
            .map(|&v| {
                (
                    v.to_string(),
                    ReductionConfig {
                        r_q_override: Some(length_adaptive_rq(frames)),
                        group_size: v,
                        ..uniform.clone()
                    },
                )
            })
            .collect(),
        AxisSweep::KvMode(values) => values
            .iter()
            .map(|&m| {
                (
                    m.to_string(),
                    ReductionConfig {
                        r_kv_override: Some(length_adaptive_rkv(frames)),
                        kv_mode: m,
                        ..uniform.clone()
                    },
                )
            })
            .collect(),
    };

    let mut rows = Vec::with_capacity(cases.len());
    for (value, cfg) in cases {
        let (time_s, out, _) = time_forward(&model, &x, &cfg, reps)?;
        let flops = count_flops(spec, frames, &cfg)?.total();
        rows.push(AblationRow {
            axis: sweep.axis_name(),
            value,
            time_s,
            flops,
            divergence: patch_divergence(&out, &baseline),
        });
    }
    Ok(rows)
}

/// CSV columns: `axis,value,time_s,flops,divergence`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("axis,value,time_s,flops,divergence\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{:e}",
            r.axis, r.value, r.time_s, r.flops, r.divergence
        );
    }
    out
}

// ── Run config file ────────────────────────────────────────────────────────

/// Structured-document config for the `run` subcommand; command-line flags
/// override any field. Unknown fields are rejected with the field named.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunFileConfig {
    pub frames: Option<usize>,
    pub n_layers: Option<usize>,
    pub d: Option<usize>,
    pub p_patch: Option<usize>,
    pub model_seed: Option<u64>,
    pub data_seed: Option<u64>,
    /// `iid` or `smooth`.
    pub sequence: Option<String>,
    pub sigma: Option<f64>,
    pub r_q: Option<usize>,
    pub r_kv: Option<usize>,
    pub group_size: Option<usize>,
    pub multiplier_l: Option<usize>,
    pub use_length_adaptive: Option<bool>,
    pub kv_mode: Option<KvMode>,
    pub schedule_path: Option<PathBuf>,
}

impl RunFileConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        load_json(path)
    }
}
