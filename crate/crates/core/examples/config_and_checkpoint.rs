//! Builds a run from a TOML config plus `section.key=value` overrides,
//! trains it, saves the checkpoint and shows that the reloaded model scores
//! the test split identically.
//!
//! cargo run --release --example config_and_checkpoint

use crossing_intent::checkpoint::Checkpoint;
use crossing_intent::config::Config;
use crossing_intent::data::generate_synthetic;
use crossing_intent::pipeline::{run_seed, score_split, Dataset};

const CONFIG: &str = r#"
[run]
name = "demo"

[model]
d = 16
layers = 1
heads = 2
d_z = 8

[train]
epochs = 15
warmup_epochs = 2
"#;

fn main() -> crossing_intent::Result<()> {
    let cfg = Config::from_toml_str(CONFIG, &["train.batch_size=32".into(), "synthetic.n_train=800".into()])?;
    println!("resolved configuration:\n{}", cfg.to_toml()?);

    let streams = cfg.streams()?;
    let data = generate_synthetic(&cfg.synthetic, &streams)?;
    let ds = Dataset::from_records(&data.records, &streams, cfg.data.iqr_floor)?;
    let run_cfg = cfg.run_config();
    let run = run_seed(&ds, &run_cfg, 0, &|_, _| {})?;

    let dir = std::env::temp_dir().join("crossing_intent_demo_checkpoint");
    run.checkpoint.save(&dir)?;
    let back = Checkpoint::load(&dir)?;
    let again = score_split(&back, &ds.test, run_cfg.train.eval_batch)?;
    assert_eq!(again.logits, run.scored.logits);
    println!(
        "checkpoint at {} reloads bit-for-bit; test accuracy {:.4}, τ* {:?}",
        dir.display(),
        run.report.raw.accuracy,
        back.tau_star
    );
    Ok(())
}
