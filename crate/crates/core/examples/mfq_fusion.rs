//! Fuses the three modalities of a segment and extracts an author's query
//! summary, then differentiates a scalar of the result with the tape.
//!
//! cargo run --example mfq_fusion

use mmbee::mfq::{bind, forward, fuse, query_attend, MfqParams, QueryBank};
use mmbee::tensor::{Matrix, Tape};

fn main() -> mmbee::Result<()> {
    let d_m = 6;
    let params: MfqParams<f64> = MfqParams::random(d_m, 1);
    let mut bank: QueryBank<f64> = QueryBank::new(4, d_m, 2);
    let wave = |rows: usize, phase: f64| Matrix::from_fn(rows, d_m, |r, c| ((r * d_m + c) as f64 * 0.37 + phase).sin());
    let (visual, speech, text) = (wave(3, 0.0), wave(2, 1.0), wave(2, 2.0));

    let h_m = forward(&params, &bank, "a1", [&visual, &speech, &text], false)?;
    println!("h_m for a1: {} queries x {}", h_m.rows(), h_m.cols());
    println!("  segment A, row 0: {:+.4?}", h_m.row(0));
    let other = forward(&params, &bank, "a1", [&wave(3, 0.5), &speech, &text], false)?;
    println!("  segment B, row 0: {:+.4?}", other.row(0));
    let normalized = forward(&params, &bank, "a1", [&visual, &speech, &text], true)?;
    println!("  A, normalized dissimilarity: {:+.4?}", normalized.row(0));

    // Single-token speech and text: their dissimilarity terms vanish.
    let single = forward(&params, &bank, "a1", [&visual, &wave(1, 1.0), &wave(1, 2.0)], false)?;
    println!("single-token modalities, first row: {:+.3?}", single.row(0));

    // Gradient of sum(h_m) with respect to the author's queries.
    let mut tape = Tape::new();
    let vars = bind(&mut tape, &params, true);
    let [v, s, t] = [&visual, &speech, &text].map(|m| tape.constant(m.clone()));
    let h_f = fuse(&mut tape, v, s, t, &vars, false)?;
    let q = tape.param(bank.get_or_init("a1").clone());
    let out = query_attend(&mut tape, q, h_f, &vars)?;
    let total = tape.sum(out);
    tape.backward(total)?;
    let g = tape.grad(q).expect("queries are trainable");
    println!("d sum(h_m) / d queries, row 0: {:+.4?}", g.row(0));
    Ok(())
}
