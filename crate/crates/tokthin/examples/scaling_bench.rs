//! Forward time and FLOP scaling across frame counts: unreduced (quadratic
//! in S) against the full length-adaptive reduction (near linear).
//!
//! ```bash
//! cargo run --release -p tokthin --example scaling_bench
//! ```

use tokthin::harness::{bench_scaling, scaling_csv};
use tokthin::{BackboneSpec, Result, SequenceMode};

fn main() -> Result<()> {
    let spec = BackboneSpec::default_alternating(1);
    let rows = bench_scaling(
        &spec,
        &[50, 100, 200, 400],
        &["unreduced".into(), "adaptive".into()],
        SequenceMode::SmoothWalk { sigma: 0.05 },
        0,
        1,
    )?;
    print!("{}", scaling_csv(&rows));

    for pair in rows.chunks(2) {
        if let [unreduced, adaptive] = pair {
            println!(
                "# S={:<4} wall speedup {:>6.2}x   flop ratio {:>7.2}x   divergence {:.4}",
                unreduced.s,
                unreduced.time_s / adaptive.time_s,
                unreduced.flops as f64 / adaptive.flops as f64,
                adaptive.divergence
            );
        }
    }
    Ok(())
}
