//! Thin CLI over the library: one subcommand per harness entry point.
//! Everything here is argument plumbing; the work happens in `tokthin`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tokthin::harness::{
    ablate, ablation_csv, bench_scaling, bench_scaling_parallel, matching_cost_csv, run_csv,
    run_report, scaling_csv, AxisSweep, ReductionConfig, RunFileConfig, RunRequest,
};
use tokthin::qpath::matching_cost_probe;
use tokthin::schedule::{
    build_schedule, probe_sensitivity, LayerTierSchedule, DEFAULT_PROBE_BASE_R, DEFAULT_PROBE_R,
    DEFAULT_TIER_THRESHOLD,
};
use tokthin::{
    gen_synthetic_sequence, init_backbone, BackboneSpec, Error, KvMode, LayerKind, Result,
    SequenceMode,
};

/// Seed precedence: `--seed` flag, then the `TOKTHIN_SEED` environment
/// variable, then 0.
fn default_seed() -> u64 {
    std::env::var("TOKTHIN_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

#[derive(Parser)]
#[command(
    name = "tokthin",
    version,
    about = "Asymmetric query/KV token reduction on a synthetic alternating-attention backbone"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one forward pass and report FLOPs, divergence, and wall-clock.
    Run(RunArgs),
    /// Probe per-layer KV sensitivity; optionally emit a tier schedule.
    Probe(ProbeArgs),
    /// Time forward passes across frame counts and named configs.
    BenchScaling(BenchScalingArgs),
    /// Sweep one axis, holding the others at its ablation defaults.
    Ablate(AblateArgs),
    /// Pretty-print a schedule file.
    ScheduleShow(ScheduleShowArgs),
    /// Compare intra-group vs. global matching cost across frame counts.
    MatchingCost(MatchingCostArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Backbone spec file (JSON); overrides the dimension flags.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Layer count of the default alternating backbone.
    #[arg(long)]
    layers: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Patch tokens per frame (5 special tokens are always added).
    #[arg(long)]
    p_patch: Option<usize>,
    /// Model weight seed.
    #[arg(long)]
    model_seed: Option<u64>,
}

impl ModelArgs {
    fn build(&self) -> Result<BackboneSpec> {
        if let Some(path) = &self.spec {
            return BackboneSpec::load(path);
        }
        let mut spec = BackboneSpec::default_alternating(self.model_seed.unwrap_or(0));
        if let Some(n) = self.layers {
            spec.n_layers = n;
            spec.layer_kinds = (0..n)
                .map(|i| if i % 2 == 0 { LayerKind::Frame } else { LayerKind::Global })
                .collect();
        }
        if let Some(d) = self.dim {
            spec.d = d;
        }
        if let Some(p) = self.p_patch {
            spec.p_patch = p;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args, Clone)]
struct SequenceArgs {
    /// Synthetic sequence kind: `smooth` (random walk, default) or `iid`.
    #[arg(long)]
    sequence: Option<String>,
    /// Step noise of the smooth walk (default 0.05).
    #[arg(long)]
    sigma: Option<f64>,
    /// Data seed (default: TOKTHIN_SEED env var, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

impl SequenceArgs {
    /// Flag beats `file`, which beats the defaults.
    fn mode_with(&self, file_kind: Option<&str>, file_sigma: Option<f64>) -> Result<SequenceMode> {
        let kind = self.sequence.as_deref().or(file_kind).unwrap_or("smooth");
        let sigma = self.sigma.or(file_sigma).unwrap_or(0.05);
        match kind {
            "iid" => Ok(SequenceMode::Iid),
            "smooth" => Ok(SequenceMode::SmoothWalk { sigma }),
            other => Err(Error::Config(format!(
                "unknown sequence kind `{other}` (expected smooth or iid)"
            ))),
        }
    }

    fn mode(&self) -> Result<SequenceMode> {
        self.mode_with(None, None)
    }

    fn seed_with(&self, file: Option<u64>) -> u64 {
        self.seed.or(file).unwrap_or_else(default_seed)
    }

    fn seed(&self) -> u64 {
        self.seed_with(None)
    }
}

fn parse_kv_mode(s: &str) -> Result<KvMode> {
    match s {
        "stride-prune" => Ok(KvMode::StridePrune),
        "stride-merge" => Ok(KvMode::StrideMergeWithAverage),
        "random-prune" => Ok(KvMode::RandomTokenPrune),
        other => Err(Error::Config(format!(
            "unknown kv mode `{other}` (expected stride-prune, stride-merge, or random-prune)"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| Error::Config(format!("bad {what} value `{v}`"))))
        .collect()
}

fn write_output(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(path) => std::fs::write(path, contents)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source }),
        None => Ok(()),
    }
}

// ── run ────────────────────────────────────────────────────────────────────

#[derive(Args)]
struct RunArgs {
    /// Config file (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sequence: SequenceArgs,
    /// Fixed query reduction factor (overrides the length-adaptive rule).
    #[arg(long)]
    rq: Option<usize>,
    /// Fixed base KV reduction factor (overrides the length-adaptive rule).
    #[arg(long)]
    rkv: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    /// Low-sensitivity KV multiplier.
    #[arg(long)]
    multiplier: Option<usize>,
    /// Disable the length-adaptive factor rules.
    #[arg(long)]
    no_adaptive: bool,
    /// stride-prune, stride-merge, or random-prune.
    #[arg(long)]
    kv_mode: Option<String>,
    /// Layer tier schedule file from `probe`.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Skip the unreduced baseline (no divergence column).
    #[arg(long)]
    no_divergence: bool,
    /// Timing repetitions (median reported).
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Write the per-layer report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => RunFileConfig::load(path)?,
        None => RunFileConfig::default(),
    };

    let mut model_args = args.model.clone();
    model_args.layers = model_args.layers.or(file.n_layers);
    model_args.dim = model_args.dim.or(file.d);
    model_args.p_patch = model_args.p_patch.or(file.p_patch);
    model_args.model_seed = model_args.model_seed.or(file.model_seed);
    let spec = model_args.build()?;

    let frames = args.frames.or(file.frames).unwrap_or(64);
    let mode = args.sequence.mode_with(file.sequence.as_deref(), file.sigma)?;
    let data_seed = args.sequence.seed_with(file.data_seed);

    let schedule_path = args.schedule.clone().or(file.schedule_path.clone());
    let schedule = schedule_path.map(|p| LayerTierSchedule::load(&p)).transpose()?;

    let kv_mode = match args.kv_mode.as_deref() {
        Some(s) => parse_kv_mode(s)?,
        None => file.kv_mode.unwrap_or_default(),
    };
    let defaults = ReductionConfig::default();
    let cfg = ReductionConfig {
        r_q_override: args.rq.or(file.r_q),
        r_kv_override: args.rkv.or(file.r_kv),
        group_size: args.group_size.or(file.group_size).unwrap_or(defaults.group_size),
        multiplier_l: args.multiplier.or(file.multiplier_l).unwrap_or(defaults.multiplier_l),
        use_length_adaptive: if args.no_adaptive {
            false
        } else {
            file.use_length_adaptive.unwrap_or(true)
        },
        schedule,
        kv_mode,
        seed: data_seed,
    };

    let req = RunRequest {
        spec,
        frames,
        sequence: mode,
        data_seed,
        cfg,
        with_divergence: !args.no_divergence,
        timing_reps: args.reps,
    };
    let outcome = run_report(&req)?;

    println!(
        "frames={frames}  resolved r_Q={}, r_KV={}",
        outcome.resolved_r_q, outcome.resolved_base_r_kv
    );
    println!("layer  kind    r_q  r_kv  nq      nkv     score_flops     value_flops     proj_flops");
    for (fl, st) in outcome.flops.layers.iter().zip(&outcome.stats.layers) {
        println!(
            "{:<6} {:<7} {:<4} {:<5} {:<7} {:<7} {:<15} {:<15} {:<15}",
            fl.layer, fl.kind, st.r_q, st.r_kv, fl.nq, fl.nkv, fl.score_flops, fl.value_flops,
            fl.projection_flops
        );
    }
    println!(
        "total flops: {} (unreduced {}, flop speedup {:.2}x)",
        outcome.flops.total(),
        outcome.flops.total_unreduced(),
        outcome.flops.speedup_vs_unreduced()
    );
    println!(
        "similarity comparisons: q-path {}, kv-path {}",
        outcome.stats.total_q_comparisons(),
        outcome.stats.total_kv_comparisons()
    );
    match outcome.divergence {
        Some(d) => println!("wall: {:.6} s   divergence vs unreduced: {d:e}", outcome.wall_s),
        None => println!("wall: {:.6} s", outcome.wall_s),
    }
    write_output(args.csv.as_deref(), &run_csv(&outcome))
}

// ── probe ──────────────────────────────────────────────────────────────────

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, default_value_t = 256)]
    frames: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sequence: SequenceArgs,
    #[arg(long, default_value_t = DEFAULT_PROBE_BASE_R)]
    base_r: usize,
    #[arg(long, default_value_t = DEFAULT_PROBE_R)]
    probe_r: usize,
    /// Extra excluded global layers, comma separated.
    #[arg(long)]
    exclude: Option<String>,
    /// Write the sensitivity report (JSON).
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Write the report as CSV (`layer,ratio`).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also build a tier schedule and write it here (JSON).
    #[arg(long)]
    schedule_out: Option<PathBuf>,
    /// Base r_KV recorded in the built schedule.
    #[arg(long, default_value_t = 8)]
    base_kv: usize,
    #[arg(long, default_value_t = DEFAULT_TIER_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 3)]
    multiplier: usize,
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let spec = args.model.build()?;
    let model = init_backbone(&spec)?;
    let x = gen_synthetic_sequence(
        args.frames,
        spec.p_patch,
        spec.d,
        args.sequence.mode()?,
        args.sequence.seed(),
    );
    let excluded: BTreeSet<usize> = match &args.exclude {
        Some(list) => parse_list::<usize>(list, "exclude")?.into_iter().collect(),
        None => BTreeSet::new(),
    };
    let report = probe_sensitivity(&model, &x, args.base_r, args.probe_r, &excluded)?;
    print!("{}", report.to_csv());
    if let Some(path) = &args.report_out {
        report.save(path)?;
    }
    write_output(args.csv.as_deref(), &report.to_csv())?;
    if let Some(path) = &args.schedule_out {
        let sched = build_schedule(&report, args.base_kv, args.threshold, args.multiplier);
        sched.save(path)?;
        println!(
            "schedule written to {} (high-sensitivity layers: {:?})",
            path.display(),
            sched.high_sensitivity_layers()
        );
    }
    Ok(())
}

// ── bench-scaling ──────────────────────────────────────────────────────────

#[derive(Args)]
struct BenchScalingArgs {
    /// Frame counts, comma separated.
    #[arg(long, default_value = "100,200,400")]
    frames: String,
    /// Named configs: unreduced, adaptive, adaptive-uniform.
    #[arg(long, default_value = "unreduced,adaptive")]
    configs: String,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sequence: SequenceArgs,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Run frame counts concurrently; time_s is emitted as NaN.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_bench_scaling(args: BenchScalingArgs) -> Result<()> {
    let spec = args.model.build()?;
    let s_values = parse_list::<usize>(&args.frames, "frames")?;
    let configs: Vec<String> = args.configs.split(',').map(|s| s.trim().to_string()).collect();
    let mode = args.sequence.mode()?;
    let seed = args.sequence.seed();
    let rows = if args.parallel {
        bench_scaling_parallel(&spec, &s_values, &configs, mode, seed)?
    } else {
        bench_scaling(&spec, &s_values, &configs, mode, seed, args.reps)?
    };
    let csv = scaling_csv(&rows);
    print!("{csv}");
    write_output(args.csv.as_deref(), &csv)
}

// ── ablate ─────────────────────────────────────────────────────────────────

#[derive(Args)]
struct AblateArgs {
    /// rq, rkv, l, g, or kv-mode.
    #[arg(long)]
    axis: String,
    /// Swept values, comma separated; per-axis defaults otherwise.
    #[arg(long)]
    values: Option<String>,
    #[arg(long, default_value_t = 256)]
    frames: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sequence: SequenceArgs,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let spec = args.model.build()?;
    let sweep = match args.axis.as_str() {
        "rq" => AxisSweep::RQ(match &args.values {
            Some(v) => parse_list(v, "rq")?,
            None => vec![1, 2, 3, 4, 8, 12, 16],
        }),
        "rkv" => AxisSweep::RKv(match &args.values {
            Some(v) => parse_list(v, "rkv")?,
            None => vec![1, 2, 3, 4, 8, 16, 32],
        }),
        "l" => AxisSweep::Multiplier(match &args.values {
            Some(v) => parse_list(v, "l")?,
            None => vec![1, 2, 3, 4, 6, 8],
        }),
        "g" => AxisSweep::GroupSize(match &args.values {
            Some(v) => parse_list(v, "G")?,
            None => vec![1, 4, 8, 20, 64, args.frames],
        }),
        "kv-mode" => AxisSweep::KvMode(match &args.values {
            Some(v) => v
                .split(',')
                .map(|m| parse_kv_mode(m.trim()))
                .collect::<Result<Vec<_>>>()?,
            None => vec![
                KvMode::StridePrune,
                KvMode::StrideMergeWithAverage,
                KvMode::RandomTokenPrune,
            ],
        }),
        other => {
            return Err(Error::Config(format!(
                "unknown axis `{other}` (expected rq, rkv, l, g, or kv-mode)"
            )))
        }
    };
    let rows = ablate(
        &spec,
        args.frames,
        args.sequence.mode()?,
        args.sequence.seed(),
        &sweep,
        args.reps,
    )?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    write_output(args.csv.as_deref(), &csv)
}

// ── schedule-show ──────────────────────────────────────────────────────────

#[derive(Args)]
struct ScheduleShowArgs {
    /// Schedule file written by `probe --schedule-out`.
    #[arg(long)]
    schedule: PathBuf,
}

fn cmd_schedule_show(args: ScheduleShowArgs) -> Result<()> {
    let sched = LayerTierSchedule::load(&args.schedule)?;
    println!(
        "base_r_kv={}  threshold={}  multiplier_l={}",
        sched.base_r_kv, sched.threshold, sched.multiplier_l
    );
    println!("layer  ratio      tier   assigned_r_kv  excluded");
    for layer in &sched.layers {
        let ratio = layer.ratio.map(|r| format!("{r:.4}")).unwrap_or_else(|| "-".to_string());
        let tier = if layer.excluded {
            "-"
        } else if layer.ratio.is_some_and(|r| r > sched.threshold) {
            "high"
        } else {
            "low"
        };
        println!(
            "{:<6} {:<10} {:<6} {:<14} {}",
            layer.index, ratio, tier, layer.assigned_r_kv, layer.excluded
        );
    }
    Ok(())
}

// ── matching-cost ──────────────────────────────────────────────────────────

#[derive(Args)]
struct MatchingCostArgs {
    /// Frame counts, comma separated.
    #[arg(long, default_value = "64,128,256,512")]
    frames: String,
    #[arg(long, default_value_t = 20)]
    group_size: usize,
    #[arg(long, default_value_t = 16)]
    p_patch: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_matching_cost(args: MatchingCostArgs) -> Result<()> {
    let s_values = parse_list::<usize>(&args.frames, "frames")?;
    let rows = matching_cost_probe(
        &s_values,
        args.group_size,
        tokthin::FrameLayout { p_patch: args.p_patch },
        args.dim,
        args.seed.unwrap_or_else(default_seed),
    )?;
    let csv = matching_cost_csv(&rows);
    print!("{csv}");
    write_output(args.csv.as_deref(), &csv)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Probe(args) => cmd_probe(args),
        Command::BenchScaling(args) => cmd_bench_scaling(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::ScheduleShow(args) => cmd_schedule_show(args),
        Command::MatchingCost(args) => cmd_matching_cost(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
