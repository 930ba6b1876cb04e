//! Finite-difference check of every gradient of the tiny reference model,
//! then the same check with one backward rule sabotaged.
//!
//! cargo run --release --example gradient_check

use std::time::Instant;

use crossing_intent::gradcheck::{run, GradcheckConfig};
use crossing_intent::graph::OpKind;

fn main() -> crossing_intent::Result<()> {
    let cfg = GradcheckConfig::default();
    let start = Instant::now();
    let report = run(&cfg, None)?;
    println!("{}", report.render());
    println!("({:.1} s)\n", start.elapsed().as_secs_f64());

    // Flip the sign of the softmax backward rule: the full-model check
    // fails and the per-op checks point at the culprit.
    let broken = run(&cfg, Some(OpKind::Softmax))?;
    let ops: Vec<&str> = broken.failing_ops().iter().map(|o| o.op.as_str()).collect();
    println!(
        "with a broken softmax rule: passed = {}, {} tensors over tolerance, flagged ops {:?}",
        broken.passed,
        broken.failing_params().len(),
        ops
    );
    Ok(())
}
