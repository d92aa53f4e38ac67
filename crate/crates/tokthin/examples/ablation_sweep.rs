//! Sweep the KV reduction factor with the query path off, mirroring the
//! reduction-factor ablations: time falls monotonically while divergence
//! stays flat through moderate factors.
//!
//! ```bash
//! cargo run --release -p tokthin --example ablation_sweep
//! ```

use tokthin::harness::{ablate, ablation_csv, AxisSweep};
use tokthin::{BackboneSpec, Result, SequenceMode};

fn main() -> Result<()> {
    let spec = BackboneSpec::default_alternating(1);
    let rows = ablate(
        &spec,
        128,
        SequenceMode::SmoothWalk { sigma: 0.05 },
        0,
        &AxisSweep::RKv(vec![1, 2, 3, 4, 8, 16, 32]),
        3,
    )?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
