//! Post-training fitting and evaluation, and the multi-seed driver.
//!
//! Per seed: train → threshold on validation → post-hoc `τ*` on validation →
//! Mahalanobis detectors on training embeddings → test evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{FeatureRecord, PreparedSplit, RobustScaler, Split, StreamConfig};
use crate::error::{Error, Result};
use crate::export::{curve_csv, risk_csv, write_json, write_text, RiskRow};
use crate::graph::sigmoid;
use crate::metrics::{auc_roc, pr_curve, roc_curve, select_threshold, EvalReport, MeanStd};
use crate::model::{Model, ModelConfig};
use crate::objective::{fit_posthoc_temperature, LossWeights};
use crate::tensor::Tensor;
use crate::trainer::{history_csv, init_model, HistoryRow, TrainConfig, Trainer};
use crate::uncertainty::{
    error_detection_eval, kl_score, risk_coverage_curve, selective_predict, DetectorMode, EmbeddingSource,
    ErrorDetection, MahalanobisDetector,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ece_bins: usize,
    /// Ridge added to every detector covariance.
    pub ridge: f64,
    /// Coverages reported in the selective-prediction table.
    pub coverages: Vec<f64>,
    /// Points on the exported risk-coverage curve.
    pub grid_steps: usize,
    /// Fit a post-hoc temperature on validation after training.
    pub calibrate: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ece_bins: crate::metrics::DEFAULT_ECE_BINS,
            ridge: crate::uncertainty::DEFAULT_RIDGE,
            coverages: vec![1.0, 0.9, 0.8],
            grid_steps: 100,
            calibrate: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ece_bins == 0 {
            return Err(Error::Config("eval: ece_bins must be at least 1".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config("eval: ridge must be non-negative".into()));
        }
        if let Some(c) = self.coverages.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
            return Err(Error::Config(format!("eval: coverage {c} outside (0, 1]")));
        }
        if self.grid_steps == 0 {
            return Err(Error::Config("eval: grid_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scaled train/val/test splits sharing one scaler fitted on train.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub streams: StreamConfig,
    pub scaler: RobustScaler,
    pub train: PreparedSplit,
    pub val: PreparedSplit,
    pub test: PreparedSplit,
}

impl Dataset {
    pub fn from_records(records: &[FeatureRecord], streams: &StreamConfig, iqr_floor: f64) -> Result<Self> {
        let scaler = RobustScaler::fit(records, streams, iqr_floor)?;
        Self::with_scaler(records, streams, scaler)
    }

    pub fn with_scaler(records: &[FeatureRecord], streams: &StreamConfig, scaler: RobustScaler) -> Result<Self> {
        let split = |s: Split| PreparedSplit::prepare(records.iter().filter(|r| r.split == s), &scaler, streams);
        let ds = Self {
            train: split(Split::Train)?,
            val: split(Split::Val)?,
            test: split(Split::Test)?,
            streams: streams.clone(),
            scaler,
        };
        if ds.val.is_empty() {
            return Err(Error::Data("no validation records".into()));
        }
        Ok(ds)
    }

    pub fn split(&self, which: Split) -> &PreparedSplit {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Which score ranks samples for abstention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskSource {
    Kl,
    Mahalanobis,
    MahalanobisCc,
    /// `1` for wrong predictions, `0` for right ones: the ideal ranking.
    Oracle,
}

impl RiskSource {
    pub const LEARNED: [RiskSource; 3] = [RiskSource::Kl, RiskSource::Mahalanobis, RiskSource::MahalanobisCc];

    pub fn name(self) -> &'static str {
        match self {
            RiskSource::Kl => "kl",
            RiskSource::Mahalanobis => "mahalanobis",
            RiskSource::MahalanobisCc => "mahalanobis_cc",
            RiskSource::Oracle => "oracle",
        }
    }
}

impl fmt::Display for RiskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RiskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [RiskSource::Kl, RiskSource::Mahalanobis, RiskSource::MahalanobisCc, RiskSource::Oracle]
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown risk source `{s}` (expected kl, mahalanobis, mahalanobis_cc or oracle)"
                ))
            })
    }
}

/// Maps a threshold on `σ(ℓ/τ_from)` to the equivalent one on `σ(ℓ/τ_to)`.
pub fn map_threshold(t: f64, tau_from: f64, tau_to: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return t;
    }
    sigmoid((t / (1.0 - t)).ln() * tau_from / tau_to)
}

/// Per-sample outputs of a checkpoint on one split.
#[derive(Clone, Debug)]
pub struct Scored {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub logits: Vec<f64>,
    /// `σ(ℓ/τ_learned)`.
    pub prob_raw: Vec<f64>,
    /// `σ(ℓ/τ)` with the inference temperature.
    pub prob: Vec<f64>,
    pub pred: Vec<u8>,
    pub kl: Vec<f64>,
    pub mahalanobis: Vec<f64>,
    pub mahalanobis_cc: Vec<f64>,
    /// `[N × T × T]` head-averaged global attention.
    pub attention: Tensor,
    pub threshold_raw: f64,
    pub threshold: f64,
}

impl Scored {
    pub fn correct(&self) -> Vec<bool> {
        self.pred.iter().zip(&self.labels).map(|(p, y)| p == y).collect()
    }

    pub fn risk(&self, source: RiskSource) -> Vec<f64> {
        match source {
            RiskSource::Kl => self.kl.iter().map(|&k| kl_score(k)).collect(),
            RiskSource::Mahalanobis => self.mahalanobis.clone(),
            RiskSource::MahalanobisCc => self.mahalanobis_cc.clone(),
            RiskSource::Oracle => self.correct().iter().map(|&c| if c { 0.0 } else { 1.0 }).collect(),
        }
    }

    pub fn rows(&self) -> Vec<RiskRow> {
        (0..self.ids.len())
            .map(|i| RiskRow {
                id: self.ids[i].clone(),
                label: self.labels[i],
                pred: self.pred[i],
                prob: self.prob[i],
                kl_score: kl_score(self.kl[i]),
                mahalanobis: self.mahalanobis[i],
                kl_raw: self.kl[i],
                mahalanobis_cc: self.mahalanobis_cc[i],
            })
            .collect()
    }

    /// `T × T` attention of sample `i`, row-major.
    pub fn attention_of(&self, i: usize) -> &[f64] {
        let t = self.attention.shape()[1];
        &self.attention.data()[i * t * t..(i + 1) * t * t]
    }
}

fn detector_scores(ckpt: &Checkpoint, mode: DetectorMode, mu: &Tensor, z_cls: &Tensor) -> Result<Vec<f64>> {
    let det = ckpt
        .detector(mode)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no {mode:?} detector")))?;
    let emb = match det.source {
        EmbeddingSource::AnomalyMean => mu,
        EmbeddingSource::ClassifierFeature => z_cls,
    };
    det.score_rows(emb)
}

pub fn score_split(ckpt: &Checkpoint, split: &PreparedSplit, chunk: usize) -> Result<Scored> {
    if split.is_empty() {
        return Err(Error::Data("cannot score an empty split".into()));
    }
    let out = ckpt.model.predict_split(split, chunk)?;
    let tau_l = ckpt.temperature();
    let tau = ckpt.inference_temperature();
    let threshold_raw = ckpt.threshold.unwrap_or(0.5);
    let prob_raw: Vec<f64> = out.logits.iter().map(|l| sigmoid(l / tau_l)).collect();
    let prob: Vec<f64> = out.logits.iter().map(|l| sigmoid(l / tau)).collect();
    let pred = prob_raw.iter().map(|&p| u8::from(p >= threshold_raw)).collect();
    Ok(Scored {
        ids: split.ids.clone(),
        labels: split.labels.clone(),
        mahalanobis: detector_scores(ckpt, DetectorMode::Global, &out.mu, &out.z_cls)?,
        mahalanobis_cc: detector_scores(ckpt, DetectorMode::ClassConditional, &out.mu, &out.z_cls)?,
        logits: out.logits,
        prob_raw,
        prob,
        pred,
        kl: out.kl,
        attention: out.attention,
        threshold: map_threshold(threshold_raw, tau_l, tau),
        threshold_raw,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub coverage: f64,
    pub kept: usize,
    pub accuracy: f64,
}

/// Test-time report: raw and temperature-scaled metrics plus uncertainty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n: usize,
    pub seed: Option<u64>,
    pub best_epoch: Option<usize>,
    pub tau_learned: f64,
    pub tau_star: Option<f64>,
    pub raw: EvalReport,
    pub scaled: EvalReport,
    /// `None` where the split has no errors (or only errors).
    pub error_detection: BTreeMap<RiskSource, Option<ErrorDetection>>,
    pub selective: BTreeMap<RiskSource, Vec<CoverageRow>>,
}

pub fn selective_table(scored: &Scored, source: RiskSource, coverages: &[f64]) -> Result<Vec<CoverageRow>> {
    let correct = scored.correct();
    let risk = scored.risk(source);
    coverages
        .iter()
        .map(|&c| {
            let s = selective_predict(&correct, &risk, c)?;
            Ok(CoverageRow {
                coverage: c,
                kept: s.kept.len(),
                accuracy: s.accuracy,
            })
        })
        .collect()
}

pub fn report(ckpt: &Checkpoint, scored: &Scored, eval: &EvalConfig) -> Result<Report> {
    let raw = EvalReport::compute(&scored.prob_raw, &scored.labels, scored.threshold_raw, eval.ece_bins)?;
    let scaled = EvalReport::compute(&scored.prob, &scored.labels, scored.threshold, eval.ece_bins)?;
    let correct = scored.correct();
    let mut error_detection = BTreeMap::new();
    let mut selective = BTreeMap::new();
    for src in RiskSource::LEARNED {
        error_detection.insert(src, error_detection_eval(&correct, &scored.risk(src)).ok());
        selective.insert(src, selective_table(scored, src, &eval.coverages)?);
    }
    Ok(Report {
        n: scored.ids.len(),
        seed: ckpt.seed,
        best_epoch: ckpt.best_epoch,
        tau_learned: ckpt.temperature(),
        tau_star: ckpt.tau_star,
        raw,
        scaled,
        error_detection,
        selective,
    })
}

/// AUROC of each learned score at separating `ood` (positive) from `inlier`.
pub fn ood_auroc(inlier: &Scored, ood: &Scored) -> Result<BTreeMap<RiskSource, f64>> {
    let mut labels = vec![0u8; inlier.ids.len()];
    labels.extend(std::iter::repeat_n(1u8, ood.ids.len()));
    RiskSource::LEARNED
        .into_iter()
        .map(|src| {
            let mut s = inlier.risk(src);
            s.extend(ood.risk(src));
            Ok((src, auc_roc(&s, &labels)?))
        })
        .collect()
}

/// Fits the decision threshold, optional `τ*` and both detectors for a
/// trained model.
pub fn fit_post_training(
    model: Model,
    data: &Dataset,
    eval: &EvalConfig,
    chunk: usize,
    seed: Option<u64>,
    best_epoch: Option<usize>,
) -> Result<Checkpoint> {
    let val = model.predict_split(&data.val, chunk)?;
    let tau_l = model.temperature();
    let raw: Vec<f64> = val.logits.iter().map(|l| sigmoid(l / tau_l)).collect();
    let threshold = select_threshold(&raw, &data.val.labels)?;
    let tau_star = if eval.calibrate {
        Some(fit_posthoc_temperature(&val.logits, &data.val.labels)?.tau)
    } else {
        None
    };
    let train = model.predict_split(&data.train, chunk)?;
    let detectors = vec![
        MahalanobisDetector::fit(
            &train.mu,
            &data.train.labels,
            DetectorMode::Global,
            EmbeddingSource::AnomalyMean,
            eval.ridge,
        )?,
        MahalanobisDetector::fit(
            &train.z_cls,
            &data.train.labels,
            DetectorMode::ClassConditional,
            EmbeddingSource::ClassifierFeature,
            eval.ridge,
        )?,
    ];
    Ok(Checkpoint {
        model,
        scaler: data.scaler.clone(),
        tau_star,
        threshold: Some(threshold),
        detectors,
        seed,
        best_epoch,
    })
}

/// Every knob of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.eval.validate()
    }
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
    pub report: Report,
    pub scored: Scored,
}

impl SeedRun {
    /// Writes `checkpoint/`, `history.csv`, `report.json`,
    /// `risk_scores.csv`, `roc.csv` and `pr.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.checkpoint.save(&dir.join("checkpoint"))?;
        write_text(&dir.join("history.csv"), &history_csv(&self.history))?;
        write_json(&dir.join("report.json"), &self.report)?;
        write_curves(dir, &self.scored)
    }
}

pub fn write_curves(dir: &Path, scored: &Scored) -> Result<()> {
    write_text(&dir.join("risk_scores.csv"), &risk_csv(&scored.rows())?)?;
    if let Ok(roc) = roc_curve(&scored.prob, &scored.labels) {
        write_text(&dir.join("roc.csv"), &curve_csv(&roc))?;
    }
    if let Ok(pr) = pr_curve(&scored.prob, &scored.labels) {
        write_text(&dir.join("pr.csv"), &curve_csv(&pr))?;
    }
    Ok(())
}

/// Risk-coverage curve on an evenly spaced grid.
pub fn coverage_curve(scored: &Scored, source: RiskSource, steps: usize) -> Result<Vec<(f64, f64)>> {
    risk_coverage_curve(&scored.correct(), &scored.risk(source), &crate::uncertainty::coverage_grid(steps))
}

/// Trains and evaluates one seed.
pub fn run_seed(
    data: &Dataset,
    cfg: &RunConfig,
    seed: u64,
    on_epoch: &(dyn Fn(u64, &HistoryRow) + Sync),
) -> Result<SeedRun> {
    cfg.validate()?;
    if data.test.is_empty() {
        return Err(Error::Data("no test records".into()));
    }
    let model = init_model(cfg.model.clone(), data.streams.clone(), seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss.clone(), &data.train, &data.val, seed)?;
    trainer.run(|row| on_epoch(seed, row))?;
    let outcome = trainer.finish()?;
    let chunk = cfg.train.eval_batch;
    let best = if cfg.train.keep_best { outcome.best_epoch } else { None };
    let checkpoint = fit_post_training(outcome.model, data, &cfg.eval, chunk, Some(seed), best)?;
    let scored = score_split(&checkpoint, &data.test, chunk)?;
    let report = report(&checkpoint, &scored, &cfg.eval)?;
    Ok(SeedRun {
        seed,
        checkpoint,
        history: outcome.history,
        report,
        scored,
    })
}

/// Runs every seed in `cfg.train.seeds`, `cfg.train.jobs` at a time. Results
/// are in seed-list order and independent of `jobs`.
pub fn run_seeds(
    data: &Dataset,
    cfg: &RunConfig,
    on_epoch: &(dyn Fn(u64, &HistoryRow) + Sync),
) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let seeds = &cfg.train.seeds;
    let jobs = cfg.train.jobs.min(seeds.len()).max(1);
    if jobs == 1 {
        return seeds.iter().map(|&s| run_seed(data, cfg, s, on_epoch)).collect();
    }
    let mut slots: Vec<Option<Result<SeedRun>>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                scope.spawn(move || {
                    (j..seeds.len())
                        .step_by(jobs)
                        .map(|k| (k, run_seed(data, cfg, seeds[k], on_epoch)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("seed worker panicked") {
                slots[k] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every seed ran")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub mean: f64,
    /// `None` with a single seed.
    pub std: Option<f64>,
    pub formatted: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_seeds: usize,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, AggregateEntry>,
}

fn report_scalars(r: &Report) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for (k, v) in r.raw.scalars() {
        m.insert(format!("raw.{k}"), v);
    }
    for (k, v) in r.scaled.scalars() {
        m.insert(format!("scaled.{k}"), v);
    }
    m.insert("tau_learned".into(), r.tau_learned);
    if let Some(t) = r.tau_star {
        m.insert("tau_star".into(), t);
    }
    for (src, rows) in &r.selective {
        for row in rows {
            m.insert(format!("selective.{src}@{:.2}", row.coverage), row.accuracy);
        }
    }
    for (src, ed) in &r.error_detection {
        if let Some(ed) = ed {
            m.insert(format!("error_detection.{src}.auroc"), ed.auroc);
            m.insert(format!("error_detection.{src}.auprc"), ed.auprc);
        }
    }
    m
}

/// Mean ± N−1 standard deviation of every scalar present in all reports.
/// With one report the standard deviation is reported as undefined.
pub fn aggregate(seeds: &[u64], reports: &[Report]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::Estimation("no reports to aggregate".into()));
    }
    let scalars: Vec<_> = reports.iter().map(report_scalars).collect();
    let mut metrics = BTreeMap::new();
    for key in scalars[0].keys() {
        let Some(vals) = scalars.iter().map(|s| s.get(key).copied()).collect::<Option<Vec<f64>>>() else {
            continue;
        };
        let entry = if vals.len() == 1 {
            AggregateEntry {
                mean: vals[0],
                std: None,
                formatted: format!("{:.3} ± undefined", vals[0]),
            }
        } else {
            let ms = MeanStd::of(&vals)?;
            AggregateEntry {
                mean: ms.mean,
                std: Some(ms.std),
                formatted: ms.formatted,
            }
        };
        metrics.insert(key.clone(), entry);
    }
    Ok(Aggregate {
        n_seeds: reports.len(),
        seeds: seeds.to_vec(),
        metrics,
    })
}
