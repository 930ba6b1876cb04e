//! Drops each stream in turn and compares test metrics with the full
//! four-token model.
//!
//! cargo run --release --example stream_ablation [epochs]

use crossing_intent::data::{generate_synthetic, StreamConfig, StreamId, SyntheticSpec, DEFAULT_IQR_FLOOR};
use crossing_intent::model::ablate_stream;
use crossing_intent::pipeline::{run_seed, Dataset, RunConfig};

fn main() -> crossing_intent::Result<()> {
    let epochs = std::env::args().nth(1).map_or(40, |s| s.parse().expect("epochs"));
    let streams = StreamConfig::default();
    let data = generate_synthetic(&SyntheticSpec::default(), &streams)?;
    let ds = Dataset::from_records(&data.records, &streams, DEFAULT_IQR_FLOOR)?;

    let mut base = RunConfig::default();
    base.train.epochs = epochs;
    base.train.warmup_epochs = (epochs / 10).max(1);

    println!("{:<20} {:>7} {:>7} {:>7} {:>7}", "variant", "tokens", "acc", "f1", "auc");
    let mut variants = vec![("full".to_string(), base.clone())];
    for s in StreamId::ALL {
        let mut cfg = base.clone();
        cfg.model = ablate_stream(&base.model, s)?;
        variants.push((format!("w/o {}", s.label()), cfg));
    }
    for (name, cfg) in variants {
        let run = run_seed(&ds, &cfg, 0, &|_, _| {})?;
        let r = &run.report.raw;
        println!(
            "{:<20} {:>7} {:>7.4} {:>7.4} {:>7.4}",
            name,
            run.checkpoint.model.tokens().len(),
            r.accuracy,
            r.f1,
            r.auc_roc.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
