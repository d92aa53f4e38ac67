//! One reduced forward pass on the default backbone: length-adaptive
//! factors, intra-group query merging, stride KV pruning, and the uniform
//! low-sensitivity multiplier, with a FLOP report and the divergence from
//! the unreduced forward.
//!
//! ```bash
//! cargo run --release -p tokthin --example reduced_forward
//! ```

use tokthin::harness::{run_report, RunRequest};
use tokthin::{BackboneSpec, Result};

fn main() -> Result<()> {
    let spec = BackboneSpec::default_alternating(7);
    let mut req = RunRequest::new(spec, 120);
    req.data_seed = 11;
    let outcome = run_report(&req)?;

    println!(
        "frames=120  resolved r_Q={}  base r_KV={}  (multiplier l={})",
        outcome.resolved_r_q, outcome.resolved_base_r_kv, req.cfg.multiplier_l
    );
    println!("layer  kind    r_kv  nq    nkv   score+value flops");
    for (fl, st) in outcome.flops.layers.iter().zip(&outcome.stats.layers) {
        println!(
            "{:<6} {:<7} {:<5} {:<5} {:<5} {}",
            fl.layer,
            fl.kind,
            st.r_kv,
            fl.nq,
            fl.nkv,
            fl.score_value()
        );
    }
    println!(
        "total flops {} vs unreduced {}  ({:.1}x fewer)",
        outcome.flops.total(),
        outcome.flops.total_unreduced(),
        outcome.flops.speedup_vs_unreduced()
    );
    println!(
        "wall {:.3} s   divergence vs unreduced {:.4}",
        outcome.wall_s,
        outcome.divergence.unwrap_or(f64::NAN)
    );
    Ok(())
}
