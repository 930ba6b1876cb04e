//! Trains the default model on the default synthetic dataset and compares
//! test accuracy with the Bayes-optimal accuracy of the generator.
//!
//! cargo run --release --example train_synthetic [epochs]

use std::time::Instant;

use crossing_intent::data::{bayes_accuracy, generate_synthetic, Split, StreamConfig, SyntheticSpec, DEFAULT_IQR_FLOOR};
use crossing_intent::pipeline::{run_seed, Dataset, RunConfig};

fn main() -> crossing_intent::Result<()> {
    let streams = StreamConfig::default();
    let data = generate_synthetic(&SyntheticSpec::default(), &streams)?;
    let bayes = bayes_accuracy(&data.oracle_for(Split::Test));
    let ds = Dataset::from_records(&data.records, &streams, DEFAULT_IQR_FLOOR)?;

    let mut cfg = RunConfig::default();
    if let Some(epochs) = std::env::args().nth(1) {
        cfg.train.epochs = epochs.parse().expect("epochs");
        cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(cfg.train.epochs - 1);
    }
    let start = Instant::now();
    let run = run_seed(&ds, &cfg, 0, &|_, row| {
        if row.epoch % 10 == 0 {
            println!(
                "epoch {:>3}  lr {:.2e}  loss {:.4}  val acc {:.3}  val f1 {:.3}",
                row.epoch, row.lr, row.total, row.val_acc, row.val_f1
            );
        }
    })?;
    let r = &run.report;
    println!("trained in {:.1} s (best epoch {:?})", start.elapsed().as_secs_f64(), r.best_epoch);
    println!("test accuracy {:.4}  (Bayes {:.4})", r.raw.accuracy, bayes);
    println!("test AUC-ROC  {:.4}", r.raw.auc_roc.unwrap_or(f64::NAN));
    println!("τ learned {:.3}  τ* {:?}", r.tau_learned, r.tau_star);
    println!("ECE raw {:.4}  scaled {:.4}", r.raw.ece, r.scaled.ece);
    Ok(())
}
