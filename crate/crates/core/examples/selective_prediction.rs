//! Abstaining on the riskiest predictions. A model is trained on the
//! synthetic data, then evaluated on the test split plus an ambiguous tail
//! (shifted features whose labels are coin flips). Each risk score ranks
//! samples; keeping the lowest-risk fraction raises accuracy.
//!
//! cargo run --release --example selective_prediction

use crossing_intent::data::{generate_synthetic, StreamConfig, SyntheticSpec, DEFAULT_IQR_FLOOR};
use crossing_intent::pipeline::{run_seed, score_split, selective_table, Dataset, RiskSource, RunConfig};

fn main() -> crossing_intent::Result<()> {
    let streams = StreamConfig::default();
    let spec = SyntheticSpec {
        n_tail: 150,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, &streams)?;
    let ds = Dataset::from_records(&data.records, &streams, DEFAULT_IQR_FLOOR)?;

    let cfg = RunConfig::default();
    println!("training ({} epochs)...", cfg.train.epochs);
    let run = run_seed(&ds, &cfg, 0, &|_, _| {})?;

    // Tail records carry the test tag, so they join the test split.
    let mut records = data.records.clone();
    records.extend(data.tail.iter().cloned());
    let with_tail = Dataset::with_scaler(&records, &streams, ds.scaler.clone())?;
    let scored = score_split(&run.checkpoint, &with_tail.test, cfg.train.eval_batch)?;

    let coverages = [1.0, 0.9, 0.8, 0.7];
    print!("{:<16}", "risk source");
    for c in coverages {
        print!("{:>8.0}%", 100.0 * c);
    }
    println!();
    for src in [RiskSource::Oracle, RiskSource::Kl, RiskSource::Mahalanobis, RiskSource::MahalanobisCc] {
        print!("{:<16}", src.name());
        for row in selective_table(&scored, src, &coverages)? {
            print!("{:>9.4}", row.accuracy);
        }
        println!();
    }
    Ok(())
}
