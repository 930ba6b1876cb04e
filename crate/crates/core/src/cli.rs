//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 when a check or tolerance fails (or training
//! breaks down), 2 for usage and input errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{sha256_hex, Checkpoint, FORMAT_VERSION};
use crate::config::Config;
use crate::data::{load_records, write_records, DataFormat, FeatureRecord, Split, StreamConfig, StreamId};
use crate::error::{Error, Result};
use crate::export::{attention_csv, attention_svg, curve_csv, write_json, write_text};
use crate::gradcheck::{self, GradcheckConfig};
use crate::graph::OpKind;
use crate::metrics::{ece, nll, EceVariant};
use crate::objective::fit_posthoc_temperature;
use crate::pipeline::{aggregate, coverage_curve, report, run_seeds, score_split, selective_table, write_curves, Dataset, RiskSource};
use crate::uncertainty::kl_score;

#[derive(Debug, Parser)]
#[command(name = "crossing-intent", version, about = "Multi-stream pedestrian crossing-intent model")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed: the synthetic seed for gen-data, the single training seed for train.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config value, `section.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its oracle probabilities.
    GenData(GenDataArgs),
    /// Train every configured seed and write the run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Fit the post-hoc temperature on validation logits.
    Calibrate(CalibrateArgs),
    /// Accuracy of the retained samples as the riskiest are withheld.
    RiskCoverage(RiskCoverageArgs),
    /// Export per-sample attention heat-maps.
    AttentionExport(AttentionArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FileFormat {
    Csv,
    Jsonl,
}

impl From<FileFormat> for DataFormat {
    fn from(f: FileFormat) -> Self {
        match f {
            FileFormat::Csv => DataFormat::Csv,
            FileFormat::Jsonl => DataFormat::Jsonl,
        }
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "csv")]
    format: FileFormat,
    /// Also write the out-of-distribution set (`ood.<ext>`).
    #[arg(long)]
    ood: bool,
    /// Also write this many ambiguous-tail records (`tail.<ext>`).
    #[arg(long, value_name = "N")]
    tail: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Drop a stream (a, p, s or i). Repeatable.
    #[arg(long, value_name = "STREAM")]
    ablate: Vec<String>,
    /// Seeds trained in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    /// Print a progress line every N epochs (0 = silent).
    #[arg(long, default_value_t = 10)]
    progress: usize,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Checkpoint directory (holding manifest.json and params.bin).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Record files; defaults to the configured data files.
    #[arg(long = "data", value_name = "FILE")]
    data: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Rewrite the checkpoint instead of writing a calibrated copy.
    #[arg(long)]
    in_place: bool,
}

#[derive(Debug, Args)]
struct RiskCoverageArgs {
    #[command(flatten)]
    data: DataArgs,
    /// kl | mahalanobis | mahalanobis_cc | oracle (the ideal abstention).
    #[arg(long, default_value = "mahalanobis_cc")]
    risk: String,
    /// Coverages for the summary table; defaults to `eval.coverages`.
    #[arg(long, value_delimiter = ',')]
    coverages: Vec<f64>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HeatmapFormat {
    Csv,
    Svg,
}

#[derive(Debug, Args)]
struct AttentionArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Sample ids, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    ids: Vec<String>,
    #[arg(long, value_enum, default_value = "svg")]
    format: HeatmapFormat,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Negate one op's backward rule to exercise the checker.
    #[arg(long, value_name = "OP", hide = true)]
    inject_fault: Option<String>,
}

/// Raised when a check runs to completion but fails.
struct CheckFailed(String);

enum Failure {
    Check(CheckFailed),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Check(CheckFailed(msg))) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Calibrate(a) => calibrate(cli, a),
        Command::RiskCoverage(a) => risk_coverage(cli, a),
        Command::AttentionExport(a) => attention_export(cli, a),
        Command::Gradcheck(a) => gradcheck_cmd(cli, a),
    }
}

fn load_config(cli: &Cli, extra: &[String]) -> Result<Config> {
    let mut overrides = cli.set.clone();
    overrides.extend_from_slice(extra);
    Config::load(cli.config.as_deref(), &overrides)
}

fn out_dir(cli: &Cli, default: impl FnOnce() -> PathBuf) -> PathBuf {
    cli.out.clone().unwrap_or_else(default)
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> CmdResult {
    let mut extra = Vec::new();
    if let Some(s) = cli.seed {
        extra.push(format!("synthetic.seed={s}"));
    }
    if let Some(n) = a.tail {
        extra.push(format!("synthetic.n_tail={n}"));
    }
    let cfg = load_config(cli, &extra)?;
    let streams = cfg.streams()?;
    let data = crate::data::generate_synthetic(&cfg.synthetic, &streams)?;
    let dir = out_dir(cli, || cfg.data.dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let format = DataFormat::from(a.format);
    let ext = format.extension();

    let mut oracle = String::from("id,p_true\n");
    let mut write_set = |name: &str, records: &[FeatureRecord], probs: &[f64]| -> Result<()> {
        write_records(&dir.join(format!("{name}.{ext}")), records, format, &streams)?;
        for (r, p) in records.iter().zip(probs) {
            oracle.push_str(&format!("{},{p}\n", r.id));
        }
        let pos = records.iter().filter(|r| r.label == 1).count();
        println!(
            "{name:<6} {:>6} records, {:>6} positive ({:.1}%)",
            records.len(),
            pos,
            100.0 * pos as f64 / records.len().max(1) as f64
        );
        Ok(())
    };
    for split in [Split::Train, Split::Val, Split::Test] {
        let (recs, probs): (Vec<FeatureRecord>, Vec<f64>) = data
            .records
            .iter()
            .zip(&data.oracle)
            .filter(|(r, _)| r.split == split)
            .map(|(r, p)| (r.clone(), *p))
            .unzip();
        write_set(split.as_str(), &recs, &probs)?;
    }
    if a.ood {
        write_set("ood", &data.ood, &data.ood_oracle)?;
    }
    if a.tail.is_some_and(|n| n > 0) {
        write_set("tail", &data.tail, &data.tail_oracle)?;
    }
    write_text(&dir.join("oracle.csv"), &oracle)?;
    let test = data.oracle_for(Split::Test);
    println!("bayes accuracy (test) {:.4}", crate::data::bayes_accuracy(&test));
    println!("wrote {}", dir.display());
    Ok(())
}

/// Records from the given files, or from the configured data files.
fn read_records(cfg: &Config, files: &[PathBuf], streams: &StreamConfig) -> Result<(Vec<FeatureRecord>, Vec<PathBuf>)> {
    let paths = if files.is_empty() { cfg.data.paths() } else { files.to_vec() };
    let mut records = Vec::new();
    for p in &paths {
        if !p.exists() {
            return Err(Error::Data(format!("dataset file {} does not exist", p.display())));
        }
        records.extend(load_records(p, cfg.data.format_for(p)?, streams)?);
    }
    Ok((records, paths))
}

fn fingerprint(paths: &[PathBuf]) -> Result<String> {
    let mut all = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        all.extend_from_slice(sha256_hex(&bytes).as_bytes());
    }
    Ok(sha256_hex(&all))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Serialize)]
struct RunManifest {
    config: toml::Table,
    crate_version: &'static str,
    checkpoint_format: u32,
    dataset_files: Vec<String>,
    dataset_sha256: String,
    seeds: Vec<u64>,
    started_unix: u64,
    finished_unix: u64,
}

fn train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let mut extra = Vec::new();
    if let Some(s) = cli.seed {
        extra.push(format!("train.seeds=[{s}]"));
    }
    if let Some(j) = a.jobs {
        extra.push(format!("train.jobs={j}"));
    }
    if !a.ablate.is_empty() {
        let list: Vec<String> = a.ablate.iter().map(|s| format!("\"{s}\"")).collect();
        extra.push(format!("model.ablate=[{}]", list.join(",")));
    }
    let cfg = load_config(cli, &extra)?;
    let streams = cfg.streams()?;
    let (records, paths) = read_records(&cfg, &[], &streams)?;
    let data = Dataset::from_records(&records, &streams, cfg.data.iqr_floor)?;
    let run_cfg = cfg.run_config();
    let dir = out_dir(cli, || cfg.run_dir());
    let started = unix_now();
    println!(
        "training {} seed(s) on {} train / {} val / {} test records",
        run_cfg.train.seeds.len(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let every = a.progress;
    let runs = run_seeds(&data, &run_cfg, &|seed, row| {
        if every > 0 && (row.epoch + 1) % every == 0 {
            println!(
                "seed {seed} epoch {:>4}  loss {:.4}  ce {:.4}  val acc {:.3}  val f1 {:.3}",
                row.epoch + 1,
                row.total,
                row.ce,
                row.val_acc,
                row.val_f1
            );
        }
    })?;
    for r in &runs {
        r.write(&dir.join(format!("seed_{}", r.seed)))?;
        println!(
            "seed {}: test acc {:.4}  f1 {:.4}  auc {:.4}  best epoch {:?}",
            r.seed,
            r.report.raw.accuracy,
            r.report.raw.f1,
            r.report.raw.auc_roc.unwrap_or(f64::NAN),
            r.report.best_epoch
        );
    }
    let seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    let agg = aggregate(&seeds, &reports)?;
    write_json(&dir.join("aggregate.json"), &agg)?;
    for key in ["raw.accuracy", "raw.f1", "raw.auc_roc", "raw.mcc"] {
        if let Some(e) = agg.metrics.get(key) {
            println!("{key:<14} {}", e.formatted);
        }
    }
    let config: toml::Table = toml::from_str(&cfg.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
    let manifest = RunManifest {
        config,
        crate_version: env!("CARGO_PKG_VERSION"),
        checkpoint_format: FORMAT_VERSION,
        dataset_files: paths.iter().map(|p| p.display().to_string()).collect(),
        dataset_sha256: fingerprint(&paths)?,
        seeds,
        started_unix: started,
        finished_unix: unix_now(),
    };
    write_json(&dir.join("run_manifest.json"), &manifest)?;
    println!("wrote {}", dir.display());
    Ok(())
}

/// Checkpoint plus the requested records, scaled with the checkpoint's scaler.
fn open(cli: &Cli, a: &DataArgs) -> Result<(Config, Checkpoint, Dataset)> {
    let cfg = load_config(cli, &[])?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (records, _) = read_records(&cfg, &a.data, &ckpt.model.streams)?;
    let data = Dataset::with_scaler(&records, &ckpt.model.streams, ckpt.scaler.clone())?;
    Ok((cfg, ckpt, data))
}

fn sibling(checkpoint: &Path, name: &str) -> PathBuf {
    let base = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    base.join(name)
}

fn nonempty(data: &Dataset, split: Split) -> Result<&crate::data::PreparedSplit> {
    let s = data.split(split);
    if s.is_empty() {
        return Err(Error::Data(format!("no {split} records in the dataset")));
    }
    Ok(s)
}

fn eval(cli: &Cli, a: &EvalArgs) -> CmdResult {
    let (cfg, ckpt, data) = open(cli, &a.data)?;
    let split = nonempty(&data, a.split.into())?;
    let scored = score_split(&ckpt, split, cfg.train.eval_batch)?;
    let rep = report(&ckpt, &scored, &cfg.eval)?;
    let dir = out_dir(cli, || sibling(&a.data.checkpoint, "eval"));
    write_json(&dir.join("report.json"), &rep)?;
    write_curves(&dir, &scored)?;
    println!(
        "{} records: acc {:.4}  f1 {:.4}  auc {:.4}  mcc {:.4}  ece raw {:.4} scaled {:.4}",
        rep.n,
        rep.raw.accuracy,
        rep.raw.f1,
        rep.raw.auc_roc.unwrap_or(f64::NAN),
        rep.raw.mcc,
        rep.raw.ece,
        rep.scaled.ece
    );
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct CalibrationSummary {
    tau_learned: f64,
    tau_star: f64,
    split: BTreeMap<String, CalibrationStats>,
}

#[derive(Serialize)]
struct CalibrationStats {
    n: usize,
    nll_raw: f64,
    nll_scaled: f64,
    ece_raw: f64,
    ece_scaled: f64,
}

fn calibrate(cli: &Cli, a: &CalibrateArgs) -> CmdResult {
    let (cfg, mut ckpt, data) = open(cli, &a.data)?;
    let chunk = cfg.train.eval_batch;
    let val = nonempty(&data, Split::Val)?;
    let val_logits = ckpt.model.predict_split(val, chunk)?.logits;
    let fit = fit_posthoc_temperature(&val_logits, &val.labels)?;
    let tau_l = ckpt.temperature();
    let mut split = BTreeMap::new();
    for which in [Split::Val, Split::Test] {
        let s = data.split(which);
        if s.is_empty() {
            continue;
        }
        let logits = ckpt.model.predict_split(s, chunk)?.logits;
        let probs = |tau: f64| -> Vec<f64> { logits.iter().map(|l| crate::graph::sigmoid(l / tau)).collect() };
        let (raw, scaled) = (probs(tau_l), probs(fit.tau));
        let stats = CalibrationStats {
            n: s.len(),
            nll_raw: nll(&raw, &s.labels, 1e-12),
            nll_scaled: nll(&scaled, &s.labels, 1e-12),
            ece_raw: ece(&raw, &s.labels, cfg.eval.ece_bins, EceVariant::Class1)?,
            ece_scaled: ece(&scaled, &s.labels, cfg.eval.ece_bins, EceVariant::Class1)?,
        };
        println!(
            "{which:<4} nll {:.4} -> {:.4}   ece {:.4} -> {:.4}",
            stats.nll_raw, stats.nll_scaled, stats.ece_raw, stats.ece_scaled
        );
        split.insert(which.to_string(), stats);
    }
    println!("tau learned {tau_l:.4}, tau* {:.4}", fit.tau);
    ckpt.tau_star = Some(fit.tau);
    let dir = out_dir(cli, || sibling(&a.data.checkpoint, "calibration"));
    let target = if a.in_place { a.data.checkpoint.clone() } else { dir.join("checkpoint") };
    ckpt.save(&target)?;
    write_json(
        &dir.join("calibration.json"),
        &CalibrationSummary {
            tau_learned: tau_l,
            tau_star: fit.tau,
            split,
        },
    )?;
    println!("wrote {} and {}", dir.join("calibration.json").display(), target.display());
    Ok(())
}

fn risk_coverage(cli: &Cli, a: &RiskCoverageArgs) -> CmdResult {
    let source: RiskSource = a.risk.parse()?;
    let (cfg, ckpt, data) = open(cli, &a.data)?;
    let split = nonempty(&data, a.split.into())?;
    let scored = score_split(&ckpt, split, cfg.train.eval_batch)?;
    let coverages = if a.coverages.is_empty() { cfg.eval.coverages.clone() } else { a.coverages.clone() };
    if let Some(c) = coverages.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
        return Err(Error::Config(format!("coverage {c} is not in (0, 1]")).into());
    }
    let table = selective_table(&scored, source, &coverages)?;
    let curve = coverage_curve(&scored, source, cfg.eval.grid_steps)?;
    let dir = out_dir(cli, || sibling(&a.data.checkpoint, "risk_coverage"));
    write_json(&dir.join(format!("risk_coverage_{source}.json")), &table)?;
    write_text(&dir.join(format!("risk_coverage_{source}.csv")), &curve_csv(&curve))?;
    println!("risk source {source}");
    for row in &table {
        println!("  coverage {:>5.1}%  kept {:>5}  accuracy {:.4}", 100.0 * row.coverage, row.kept, row.accuracy);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn attention_export(cli: &Cli, a: &AttentionArgs) -> CmdResult {
    let (cfg, ckpt, data) = open(cli, &a.data)?;
    let dir = out_dir(cli, || sibling(&a.data.checkpoint, "attention"));
    let tokens: Vec<StreamId> = ckpt.model.tokens();
    let mut written = 0;
    for split in [Split::Train, Split::Val, Split::Test] {
        let s = data.split(split);
        let wanted: Vec<usize> = (0..s.len()).filter(|&i| a.ids.contains(&s.ids[i])).collect();
        if wanted.is_empty() {
            continue;
        }
        let scored = score_split(&ckpt, &s.subset(&wanted), cfg.train.eval_batch)?;
        for (k, id) in scored.ids.iter().enumerate() {
            let m = scored.attention_of(k);
            let file = dir.join(format!("attention_{}.{}", sanitize(id), match a.format {
                HeatmapFormat::Csv => "csv",
                HeatmapFormat::Svg => "svg",
            }));
            let text = match a.format {
                HeatmapFormat::Csv => attention_csv(&tokens, m),
                HeatmapFormat::Svg => {
                    let caption = format!(
                        "label {}  p {:.3}  kl_score {:.4}  mahalanobis {:.3}",
                        scored.labels[k],
                        scored.prob[k],
                        kl_score(scored.kl[k]),
                        scored.mahalanobis[k]
                    );
                    attention_svg(&format!("cross-stream attention: {id}"), &caption, &tokens, m)
                }
            };
            write_text(&file, &text)?;
            written += 1;
            println!("{id}: {}", file.display());
        }
    }
    let known: Vec<&String> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .flat_map(|&s| data.split(s).ids.iter())
        .collect();
    for id in &a.ids {
        if !known.contains(&id) {
            eprintln!("warning: no sample with id `{id}`, skipped");
        }
    }
    println!("{written} heat-map(s) written");
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn gradcheck_cmd(cli: &Cli, a: &GradcheckArgs) -> CmdResult {
    let fault = match &a.inject_fault {
        Some(name) => Some(
            OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown op `{name}`")))?,
        ),
        None => None,
    };
    let cfg = GradcheckConfig {
        tol: a.tol,
        step: a.step,
        seed: cli.seed.unwrap_or(0),
        ..GradcheckConfig::default()
    };
    let rep = gradcheck::run(&cfg, fault)?;
    println!("{}", rep.render());
    if let Some(dir) = &cli.out {
        write_json(&dir.join("gradcheck.json"), &rep)?;
    }
    if rep.passed {
        Ok(())
    } else {
        let ops: Vec<&str> = rep.failing_ops().iter().map(|o| o.op.as_str()).collect();
        let mut msg = format!("gradient check failed: {} parameter tensor(s) over tolerance", rep.failing_params().len());
        if !ops.is_empty() {
            msg.push_str(&format!("; broken backward rule(s): {}", ops.join(", ")));
        }
        Err(Failure::Check(CheckFailed(msg)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["crossing-intent", "no-such-command"]), 2);
        assert_eq!(run(["crossing-intent", "train", "--set", "nodot=1"]), 2);
    }

    #[test]
    fn sanitize_ids() {
        assert_eq!(sanitize("vid_0001/trk 3"), "vid_0001_trk_3");
    }
}
