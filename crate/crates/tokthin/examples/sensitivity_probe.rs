//! Offline per-layer sensitivity probing: raise one global layer's KV
//! reduction at a time, report degradation ratios, and build the two-tier
//! schedule. Desk-scale factors keep the example fast; the defaults
//! (base 32, probe 256) need at least 256 input frames.
//!
//! ```bash
//! cargo run --release -p tokthin --example sensitivity_probe
//! ```

use std::collections::BTreeSet;

use tokthin::schedule::{build_schedule, probe_sensitivity};
use tokthin::{gen_synthetic_sequence, init_backbone, BackboneSpec, Result, SequenceMode};

fn main() -> Result<()> {
    let mut spec = BackboneSpec::default_alternating(3);
    spec.d = 16;
    spec.p_patch = 8;
    // Model the register-attention analogue: exclude global layer 3 from
    // probing.
    spec.excluded_global_layers.insert(3);

    let model = init_backbone(&spec)?;
    let eval = gen_synthetic_sequence(32, spec.p_patch, spec.d, SequenceMode::SmoothWalk { sigma: 0.05 }, 5);

    let report = probe_sensitivity(&model, &eval, 4, 16, &BTreeSet::new())?;
    println!("probed {} layers (base_r=4, probe_r=16):", report.entries.len());
    print!("{}", report.to_csv());

    let schedule = build_schedule(&report, 8, 1.05, 3);
    println!("\ntier schedule (base 8, threshold 1.05, l=3):");
    for layer in &schedule.layers {
        println!(
            "layer {:>2}: assigned r_kv {:>2}  excluded={}  ratio={:?}",
            layer.index, layer.assigned_r_kv, layer.excluded, layer.ratio
        );
    }

    let path = std::env::temp_dir().join("tokthin_example_schedule.json");
    schedule.save(&path)?;
    println!("\nschedule written to {}", path.display());
    println!("inspect it with: tokthin schedule-show --schedule {}", path.display());
    Ok(())
}
