//! Matching cost, intra-group vs. global: similarity-comparison counts are
//! exact (linear in S at fixed G, quadratic at G = S), wall-clock times are
//! measured.
//!
//! ```bash
//! cargo run --release -p tokthin --example matching_cost
//! ```

use tokthin::harness::matching_cost_csv;
use tokthin::qpath::matching_cost_probe;
use tokthin::{FrameLayout, Result};

fn main() -> Result<()> {
    let rows = matching_cost_probe(
        &[64, 128, 256, 512],
        20,
        FrameLayout { p_patch: 16 },
        32,
        0,
    )?;
    print!("{}", matching_cost_csv(&rows));
    for r in &rows {
        println!(
            "# S={:<4} global/grouped comparisons {:>6.1}x   wall {:>6.1}x",
            r.s,
            r.global_comparisons as f64 / r.grouped_comparisons as f64,
            r.global_time_s / r.grouped_time_s
        );
    }
    Ok(())
}
