//! Histograms over matched merge pairs on a smooth synthetic sequence:
//! inter-frame distances peak at 1 (merges are overwhelmingly local) and
//! matched-pair cosine similarities crowd the top bucket. Emits the two
//! MatchStats CSV schemas.
//!
//! ```bash
//! cargo run --release -p tokthin --example merge_histograms
//! ```

use tokthin::qpath::{reduce_queries, QueryReducer};
use tokthin::{gen_synthetic_sequence, FrameLayout, Result, SequenceMode};

fn main() -> Result<()> {
    let s = 40;
    let layout = FrameLayout { p_patch: 16 };
    let x = gen_synthetic_sequence(s, layout.p_patch, 32, SequenceMode::SmoothWalk { sigma: 0.05 }, 9)
        .to_matrix();

    // Global matching (G = S) to expose the full distance distribution.
    let reducer = QueryReducer::new(2, s)?;
    let (_, _, stats) = reduce_queries(&x, s, layout, &reducer)?;

    println!("# matched pairs: {}, comparisons: {}", stats.pair_count, stats.comparisons);
    println!(
        "# fraction of pairs within 5 frames: {:.3}",
        stats.fraction_within_distance(5)
    );
    println!("\n# inter-frame distance histogram");
    print!("{}", stats.distance_csv());
    println!("\n# cosine similarity histogram (bucket lower edges)");
    print!("{}", stats.similarity_csv());
    Ok(())
}
