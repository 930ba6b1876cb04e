//! Trains a small model and writes the cross-stream attention of a few test
//! samples as SVG heat-maps (rows are queries, columns keys).
//!
//! cargo run --release --example attention_heatmaps [out_dir]

use std::path::PathBuf;

use crossing_intent::data::{generate_synthetic, StreamConfig, SyntheticSpec, DEFAULT_IQR_FLOOR};
use crossing_intent::export::{attention_csv, attention_svg, write_text};
use crossing_intent::pipeline::{run_seed, Dataset, RunConfig};
use crossing_intent::uncertainty::kl_score;

fn main() -> crossing_intent::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map_or_else(|| "attention_maps".into(), PathBuf::from);
    let streams = StreamConfig::default();
    let data = generate_synthetic(&SyntheticSpec::default(), &streams)?;
    let ds = Dataset::from_records(&data.records, &streams, DEFAULT_IQR_FLOOR)?;

    let mut cfg = RunConfig::default();
    cfg.train.epochs = 30;
    cfg.train.warmup_epochs = 3;
    let run = run_seed(&ds, &cfg, 0, &|_, _| {})?;
    let scored = &run.scored;
    let tokens = run.checkpoint.model.tokens();

    for i in 0..4 {
        let m = scored.attention_of(i);
        let id = &scored.ids[i];
        let caption = format!(
            "label {}  p {:.3}  kl_score {:.4}  mahalanobis {:.2}",
            scored.labels[i],
            scored.prob[i],
            kl_score(scored.kl[i]),
            scored.mahalanobis[i]
        );
        write_text(&out.join(format!("{id}.svg")), &attention_svg(id, &caption, &tokens, m))?;
        println!("{id}  ({caption})");
        print!("{}", attention_csv(&tokens, m));
    }
    println!("heat-maps written to {}", out.display());
    Ok(())
}
