//! The evaluation metrics on small hand-made inputs.
//!
//! cargo run --release --example evaluation_metrics

use crossing_intent::metrics::{auc_roc, confusion, ece, mcc, EceVariant, EvalReport};
use crossing_intent::uncertainty::error_detection_eval;

fn main() -> crossing_intent::Result<()> {
    let probs = [0.1, 0.4, 0.35, 0.8];
    let labels = [0, 0, 1, 1];
    println!("AUROC {:.3}", auc_roc(&probs, &labels)?);

    let c = confusion(0.5, &probs, &labels);
    println!("confusion at 0.5: {c:?}, MCC {:.3}", mcc(&c));

    let probs = [0.2, 0.3, 0.7, 0.9, 0.6, 0.1];
    let labels = [0, 1, 1, 1, 0, 0];
    println!("ECE (class-1)    {:.4}", ece(&probs, &labels, 5, EceVariant::Class1)?);
    println!("ECE (confidence) {:.4}", ece(&probs, &labels, 5, EceVariant::Confidence)?);

    let report = EvalReport::compute(&probs, &labels, 0.5, 5)?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    // A constant risk score carries no information: its AUPRC for finding
    // errors equals the error rate.
    let correct = [true, false, true, true, false, true, true, true];
    let ed = error_detection_eval(&correct, &[0.5; 8])?;
    println!("constant-score error detection: AUROC {:.3}, AUPRC {:.3}, error rate {:.3}", ed.auroc, ed.auprc, ed.error_rate);
    Ok(())
}
