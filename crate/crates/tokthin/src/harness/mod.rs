//! Benchmark harness: FLOP accounting, run/scaling/ablation orchestration,
//! and fixed-schema CSV emission.

pub mod bench;
pub mod flops;

pub use bench::{
    ablate, ablation_csv, bench_scaling, bench_scaling_parallel, matching_cost_csv, named_config,
    run_csv, run_report, scaling_csv, time_forward, AblationRow, AxisSweep, RunFileConfig,
    RunOutcome, RunRequest, ScalingRow,
};
pub use flops::{count_flops, kv_row_count, FlopReport, LayerFlops};

pub use crate::config::ReductionConfig;
