//! Acceptance criteria 1–11. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stdout (bypassing the test harness capture) and then
//! asserts.
//!
//! The tests hold a global lock so that the wall-clock limits are measured
//! without other tests competing for the CPU.

use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use crossing_intent::data::{
    bayes_accuracy, generate_synthetic, Split, StreamBatch, StreamConfig, StreamId, SyntheticData, SyntheticSpec,
    DEFAULT_IQR_FLOOR,
};
use crossing_intent::gradcheck::{self, GradcheckConfig};
use crossing_intent::graph::{sigmoid, Graph, OpKind};
use crossing_intent::metrics::{auc_roc, confusion, ece, mcc, EceVariant};
use crossing_intent::model::{
    ablate_stream, head_average, kl_divergence, multi_head_attention, AttentionVars, ModelConfig,
};
use crossing_intent::objective::{
    diversity_penalty, fit_posthoc_temperature, scaled_nll, smooth_targets, LossBreakdown, Lambdas,
};
use crossing_intent::pipeline::{
    aggregate, run_seed, run_seeds, score_split, selective_table, Dataset, RiskSource, RunConfig, SeedRun,
};
use crossing_intent::rng::RngStream;
use crossing_intent::tensor::Tensor;
use crossing_intent::trainer::{init_model, quick_eval, Trainer};
use crossing_intent::uncertainty::{error_detection_eval, ledoit_wolf_cov, DetectorMode, EmbeddingSource, MahalanobisDetector};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {}  {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "criterion {n} failed: {detail}");
}

fn random_tensor(rng: &mut RngStream, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// The default run on the default synthetic dataset, shared by criteria 4,
/// 6 and 8.
struct Trained {
    data: SyntheticData,
    dataset: Dataset,
    run: SeedRun,
    seconds: f64,
}

const TAIL: usize = 150;

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let streams = StreamConfig::default();
        // The tail is drawn after every other record, so adding it leaves
        // the default train/val/test/OOD sets untouched.
        let spec = SyntheticSpec {
            n_tail: TAIL,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec, &streams).unwrap();
        let plain = generate_synthetic(&SyntheticSpec::default(), &streams).unwrap();
        assert_eq!(plain.records, data.records);
        let dataset = Dataset::from_records(&data.records, &streams, DEFAULT_IQR_FLOOR).unwrap();
        let start = Instant::now();
        let run = run_seed(&dataset, &RunConfig::default(), 0, &|_, _| {}).unwrap();
        Trained {
            seconds: start.elapsed().as_secs_f64(),
            data,
            dataset,
            run,
        }
    })
}

#[test]
fn criterion_01_gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let rep = gradcheck::run(&GradcheckConfig::default(), None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let groups = rep.groups.len();
    // The harness must also catch a broken rule and name it.
    let broken = gradcheck::run(&GradcheckConfig::default(), Some(OpKind::LayerNorm)).unwrap();
    let named: Vec<&str> = broken.failing_ops().iter().map(|o| o.op.as_str()).collect();
    let ok = rep.passed && rep.max_rel_err < 1e-4 && secs < 60.0 && !broken.passed && named == ["layer_norm"];
    verdict(
        1,
        ok,
        &format!(
            "max rel err {:.2e} over {groups} groups in {secs:.1}s; injected layer_norm fault flagged {named:?}",
            rep.max_rel_err
        ),
    );
}

#[test]
fn criterion_02_closed_form_loss_oracles() {
    let _g = serial();
    let mut checks = Vec::new();
    let kl = |mu: f64, eta: f64| {
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![1, 1], vec![mu]).unwrap());
        let e = g.constant(Tensor::new(vec![1, 1], vec![eta]).unwrap());
        let k = kl_divergence(&mut g, m, e).unwrap();
        g.value(k).data()[0]
    };
    checks.push(("kl(μ=1, η=0) = 0.5", (kl(1.0, 0.0) - 0.5).abs() < 1e-12));
    checks.push(("kl(μ=0, η=ln 4) = 0.8069", (kl(0.0, 4f64.ln()) - 0.8069).abs() < 1e-4));

    let t = smooth_targets(&[1.0, 0.0, 0.7], 0.1);
    let bounds = (t[0] - 0.95).abs() < 1e-12 && (t[1] - 0.05).abs() < 1e-12 && (t[2] - 0.68).abs() < 1e-12;
    let mut rng = RngStream::new(2);
    let mixed: Vec<f64> = (0..1000).map(|_| rng.uniform()).collect();
    let within = smooth_targets(&mixed, 0.1).iter().all(|&v| (0.05..=0.95).contains(&v));
    checks.push(("smoothing 0.95 / 0.05 / 0.68 and bounds", bounds && within));

    let mut g = Graph::new();
    let l = g.constant(Tensor::vector(vec![0.0]).unwrap());
    let bce = g.bce_with_logits(l, &[0.5]).unwrap();
    checks.push(("BCE(ℓ=0, t=0.5) = ln 2", (g.value(bce).item() - 2f64.ln()).abs() < 1e-12));

    let mut g = Graph::new();
    let f = g.constant(Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap());
    let div = diversity_penalty(&mut g, f).unwrap().unwrap();
    checks.push(("diversity of column [0, 2] = −1", (g.value(div).item() + 1.0).abs() < 1e-12));

    let bd = LossBreakdown::assemble(
        0.7,
        0.5,
        -0.2,
        1.2,
        Lambdas {
            kl: 0.01,
            div: 0.1,
            tau: 0.05,
        },
    );
    checks.push(("composite total = 0.695", (bd.total - 0.695).abs() < 1e-12));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(2, failed.is_empty(), &format!("{} checks, failed {failed:?}", checks.len()));
}

#[test]
fn criterion_03_attention_normalization() {
    let _g = serial();
    let streams = StreamConfig::default();
    let model = init_model(ModelConfig::default(), streams.clone(), 0).unwrap();
    let mut rng = RngStream::new(9);
    let n = 1000;
    let batch = StreamBatch {
        a: random_tensor(&mut rng, &[n, streams.d_a], 1.0),
        p: random_tensor(&mut rng, &[n, streams.d_p], 1.0),
        s: random_tensor(&mut rng, &[n, streams.width_s()], 1.0),
        i: random_tensor(&mut rng, &[n, streams.d_i()], 1.0),
    };
    let out = model.predict(&batch).unwrap();
    let att = out.attention.data();
    let worst_row = att
        .chunks_exact(4)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let nonneg = att.iter().all(|&w| w >= 0.0);

    // Identical tokens: every query sees four identical keys.
    let (b, t, d, h) = (3, 4, 16, 4);
    let mut g = Graph::new();
    let mut p = |shape: &[usize]| {
        let v = random_tensor(&mut rng, shape, 0.5);
        g.constant(v)
    };
    let vars = AttentionVars {
        wq: p(&[d, d]),
        bq: p(&[d]),
        wk: p(&[d, d]),
        bk: p(&[d]),
        wv: p(&[d, d]),
        bv: p(&[d]),
        wo: p(&[d, d]),
        bo: p(&[d]),
    };
    let mut rows = Vec::new();
    for _ in 0..b {
        let r: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..t {
            rows.extend_from_slice(&r);
        }
    }
    let x = g.constant(Tensor::new(vec![b * t, d], rows).unwrap());
    let (_, w) = multi_head_attention(&mut g, &vars, x, b, t, h).unwrap();
    let avg = head_average(g.value(w), b, h);
    let uniform = avg.data().iter().map(|v| (v - 0.25).abs()).fold(0.0, f64::max);

    let ok = worst_row < 1e-6 && nonneg && uniform < 1e-6 && out.attention.shape() == [n, 4, 4];
    verdict(
        3,
        ok,
        &format!("{n} inputs: worst |row sum − 1| {worst_row:.1e}; identical tokens: max |w − 0.25| {uniform:.1e}"),
    );
}

#[test]
fn criterion_04_mahalanobis_statistics() {
    let _g = serial();
    let (n, d, ridge) = (2000, 8, 1e-3);
    let mut rng = RngStream::new(4);
    let train = random_tensor(&mut rng, &[n, d], 1.0);
    let labels = vec![0u8; n];
    let det = MahalanobisDetector::fit(&train, &labels, DetectorMode::Global, EmbeddingSource::AnomalyMean, ridge).unwrap();
    let fresh = random_tensor(&mut rng, &[n, d], 1.0);
    let d2 = det.score_rows(&fresh).unwrap();
    let mean_d2 = d2.iter().sum::<f64>() / n as f64;
    let at_centroid = det.score(&det.groups[0].centroid).unwrap();

    let cov = ledoit_wolf_cov(&train, ridge).unwrap();
    let c = nalgebra::DMatrix::from_row_slice(d, d, &cov.cov);
    let cov_min = c.symmetric_eigen().eigenvalues.min();
    let prec = nalgebra::DMatrix::from_row_slice(d, d, &det.groups[0].precision);
    let symmetric = (&prec - prec.transpose()).amax() < 1e-12;
    let prec_min = prec.symmetric_eigen().eigenvalues.min();

    // Model level: the synthetic OOD set (every feature shifted by 3σ)
    // against the in-distribution test split, scored by the global detector.
    let tr = trained();
    let ood = Dataset::with_scaler(
        &[tr.data.records.clone(), tr.data.ood.clone()].concat(),
        &tr.dataset.streams,
        tr.dataset.scaler.clone(),
    )
    .unwrap();
    let in_ids: std::collections::HashSet<&String> = tr.dataset.test.ids.iter().collect();
    let scored = score_split(&tr.run.checkpoint, &ood.test, 512).unwrap();
    let labels_ood: Vec<u8> = scored.ids.iter().map(|id| u8::from(!in_ids.contains(id))).collect();
    let auroc = auc_roc(&scored.mahalanobis, &labels_ood).unwrap();

    let ok = (7.2..=8.8).contains(&mean_d2)
        && at_centroid.abs() < 1e-12
        && symmetric
        && prec_min > 0.0
        && cov_min >= ridge - 1e-12
        && auroc >= 0.95;
    verdict(
        4,
        ok,
        &format!(
            "mean D² {mean_d2:.3}; D² at centroid {at_centroid:.1e}; min eig cov {cov_min:.4} (ridge {ridge}), precision {prec_min:.4}; OOD AUROC {auroc:.4}"
        ),
    );
}

#[test]
fn criterion_05_calibration_behaviour() {
    let _g = serial();
    let n = 2000;
    let mut rng = RngStream::new(5);
    let true_logits: Vec<f64> = (0..n).map(|_| 2.0 * rng.normal()).collect();
    let labels: Vec<u8> = true_logits.iter().map(|&z| u8::from(rng.bernoulli(sigmoid(z)))).collect();
    let over: Vec<f64> = true_logits.iter().map(|z| 3.0 * z).collect();

    let fit = fit_posthoc_temperature(&over, &labels).unwrap();
    let nll_drop = scaled_nll(&over, &labels, fit.tau) < scaled_nll(&over, &labels, 1.0);
    let calibrated = fit_posthoc_temperature(&true_logits, &labels).unwrap();
    let probs = |tau: f64| -> Vec<f64> { over.iter().map(|l| sigmoid(l / tau)).collect() };
    let auc_gap = (auc_roc(&probs(1.0), &labels).unwrap() - auc_roc(&probs(fit.tau), &labels).unwrap()).abs();
    let ece_before = ece(&probs(1.0), &labels, 15, EceVariant::Class1).unwrap();
    let ece_after = ece(&probs(fit.tau), &labels, 15, EceVariant::Class1).unwrap();

    let ok = (2.7..=3.3).contains(&fit.tau)
        && nll_drop
        && (0.95..=1.05).contains(&calibrated.tau)
        && auc_gap <= 1e-12;
    verdict(
        5,
        ok,
        &format!(
            "τ* {:.3} on 3× logits (ECE {ece_before:.3} → {ece_after:.3}); τ* {:.3} on calibrated logits; AUC gap {auc_gap:.1e}",
            fit.tau, calibrated.tau
        ),
    );
}

#[test]
fn criterion_06_end_to_end_learning() {
    let _g = serial();
    let tr = trained();
    let bayes = bayes_accuracy(&tr.data.oracle_for(Split::Test));
    let r = &tr.run.report.raw;
    let auc = r.auc_roc.unwrap_or(0.0);
    let ok = r.accuracy >= bayes - 0.05 && auc >= 0.95 && tr.seconds < 300.0;
    verdict(
        6,
        ok,
        &format!(
            "test accuracy {:.4} vs Bayes {bayes:.4} (need ≥ {:.4}); AUC {auc:.4}; trained in {:.1}s",
            r.accuracy,
            bayes - 0.05,
            tr.seconds
        ),
    );
}

#[test]
fn criterion_07_overfit_sanity() {
    let _g = serial();
    let streams = StreamConfig::default();
    let data = generate_synthetic(&SyntheticSpec::default(), &streams).unwrap();
    let mut records: Vec<_> = data.records.iter().filter(|r| r.split == Split::Train).take(64).cloned().collect();
    records.extend(data.records.iter().filter(|r| r.split == Split::Val).take(64).cloned());
    let ds = Dataset::from_records(&records, &streams, DEFAULT_IQR_FLOOR).unwrap();

    let mut cfg = RunConfig::default();
    cfg.model.dropout_encoder = 0.0;
    cfg.model.dropout_transformer = 0.0;
    cfg.model.dropout_head = 0.0;
    cfg.loss.mixup = false;
    cfg.loss.smoothing = 0.0;
    cfg.train.weight_decay = 0.0;
    cfg.train.epochs = 300;
    cfg.train.warmup_epochs = 10;
    let model = init_model(cfg.model.clone(), streams, 0).unwrap();
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss.clone(), &ds.train, &ds.val, 0).unwrap();
    let mut reached = None;
    let mut best = 0.0f64;
    while !trainer.is_finished() {
        let row = trainer.run_epoch().unwrap();
        let (acc, _) = quick_eval(trainer.model(), &ds.train, 512).unwrap();
        best = best.max(acc);
        if acc >= 0.98 {
            reached = Some(row.epoch + 1);
            break;
        }
    }
    verdict(
        7,
        reached.is_some(),
        &format!("64 records: train accuracy ≥ 0.98 after {reached:?} epochs (best {best:.4})"),
    );
}

#[test]
fn criterion_08_selective_prediction() {
    let _g = serial();
    let tr = trained();
    let scored = &tr.run.scored;
    let acc = tr.run.report.raw.accuracy;
    let grid: Vec<f64> = (1..=100).map(|k| k as f64 / 100.0).filter(|&c| c <= acc).collect();
    let oracle = selective_table(scored, RiskSource::Oracle, &grid).unwrap();
    let oracle_ok = oracle.iter().all(|r| r.accuracy == 1.0);

    let all = [tr.data.records.clone(), tr.data.tail.clone()].concat();
    let with_tail = Dataset::with_scaler(&all, &tr.dataset.streams, tr.dataset.scaler.clone()).unwrap();
    let s = score_split(&tr.run.checkpoint, &with_tail.test, 512).unwrap();
    let rows = selective_table(&s, RiskSource::MahalanobisCc, &[1.0, 0.8]).unwrap();
    let (a100, a80) = (rows[0].accuracy, rows[1].accuracy);

    verdict(
        8,
        oracle_ok && a80 >= a100,
        &format!(
            "oracle risk: accuracy 1.0 at all {} coverages ≤ {acc:.3}: {oracle_ok}; test ∪ tail ({} records): mahalanobis_cc acc@100% {a100:.4}, acc@80% {a80:.4}",
            grid.len(),
            s.ids.len()
        ),
    );
}

#[test]
fn criterion_09_metric_oracles() {
    let _g = serial();
    let auroc = auc_roc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    let m_perfect = mcc(&confusion(0.5, &[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0]));
    let m_inverted = mcc(&confusion(0.5, &[0.1, 0.9, 0.2, 0.8], &[1, 0, 1, 0]));
    let m_constant = mcc(&confusion(0.5, &[0.9, 0.9, 0.9, 0.9], &[1, 0, 1, 0]));
    // Two bins of width 0.5: {0.2, 0.3} with one positive, {0.7, 0.9} with
    // two positives. ECE = ½|0.25 − 0.5| + ½|0.8 − 1| = 0.225.
    let e = ece(&[0.2, 0.3, 0.7, 0.9], &[0, 1, 1, 1], 2, EceVariant::Class1).unwrap();
    let correct = [true, false, true, true, false, true, true, true, true, false];
    let ed = error_detection_eval(&correct, &[0.3; 10]).unwrap();
    let rate = 3.0 / 10.0;
    let ok = auroc == 0.75
        && m_perfect == 1.0
        && m_inverted == -1.0
        && m_constant == 0.0
        && (e - 0.225).abs() < 1e-12
        && (ed.auprc - rate).abs() < 1e-12;
    verdict(
        9,
        ok,
        &format!(
            "AUROC {auroc}; MCC {m_perfect}/{m_inverted}/{m_constant}; ECE {e}; constant-score AUPRC {} vs error rate {rate}",
            ed.auprc
        ),
    );
}

fn tiny_flags() -> Vec<String> {
    [
        "model.d=8",
        "model.layers=1",
        "model.heads=2",
        "model.d_z=4",
        "train.epochs=5",
        "train.warmup_epochs=1",
        "train.batch_size=32",
        "synthetic.n_train=300",
        "synthetic.n_val=100",
        "synthetic.n_test=100",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect()
}

fn cli(args: &[String]) -> i32 {
    let mut v = vec!["crossing-intent".to_string()];
    v.extend_from_slice(args);
    crossing_intent::cli::run(v)
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_10_determinism_and_aggregate() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    let flags = tiny_flags();
    let data_flag = vec!["--set".to_string(), format!("data.dir={}", data_dir.display())];
    let gen = cli(&[["gen-data", "--out"].map(String::from).to_vec(), vec![data_dir.display().to_string()], flags.clone()].concat());
    let mut codes = vec![gen];
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        codes.push(cli(&[
            vec!["train".to_string(), "--progress".into(), "0".into(), "--out".into(), out.display().to_string()],
            flags.clone(),
            data_flag.clone(),
        ]
        .concat()));
    }
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let files = files_under(&a);
    let mut differing = Vec::new();
    for f in &files {
        if f.file_name().is_some_and(|n| n == "run_manifest.json") {
            continue;
        }
        if std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap_or_default() {
            differing.push(f.display().to_string());
        }
    }
    let has = |name: &str| files.iter().any(|f| f.ends_with(name));
    let artifacts = ["history.csv", "report.json", "params.bin", "manifest.json", "aggregate.json"]
        .iter()
        .all(|n| has(n));

    // Five seeds through the library driver.
    let streams = StreamConfig::default();
    let spec = SyntheticSpec {
        n_train: 300,
        n_val: 100,
        n_test: 100,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, &streams).unwrap();
    let ds = Dataset::from_records(&data.records, &streams, DEFAULT_IQR_FLOOR).unwrap();
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        d: 8,
        layers: 1,
        heads: 2,
        d_z: 4,
        ..ModelConfig::default()
    };
    cfg.train.epochs = 5;
    cfg.train.warmup_epochs = 1;
    cfg.train.seeds = vec![0, 1, 2, 3, 4];
    let runs = run_seeds(&ds, &cfg, &|_, _| {}).unwrap();
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    let agg = aggregate(&cfg.train.seeds, &reports).unwrap();
    let acc = &agg.metrics["raw.accuracy"];
    let pattern_ok = {
        let parts: Vec<&str> = acc.formatted.split(" ± ").collect();
        parts.len() == 2
            && parts.iter().all(|p| p.parse::<f64>().is_ok() && p.split('.').nth(1).is_some_and(|d| d.len() == 3))
    };

    let ok = codes.iter().all(|&c| c == 0) && differing.is_empty() && artifacts && pattern_ok && acc.std.is_some();
    verdict(
        10,
        ok,
        &format!(
            "exit codes {codes:?}; {} artifacts compared, differing {differing:?}; 5-seed accuracy \"{}\"",
            files.len() - 1,
            acc.formatted
        ),
    );
}

#[test]
fn criterion_11_ablation_machinery() {
    let _g = serial();
    let ds = &trained().dataset;
    let mut base = RunConfig::default();
    base.train.epochs = 20;
    base.train.warmup_epochs = 3;
    let mut notes = Vec::new();
    let mut ok = true;
    for s in StreamId::ALL {
        let mut cfg = base.clone();
        cfg.model = ablate_stream(&base.model, s).unwrap();
        match run_seed(ds, &cfg, 0, &|_, _| {}) {
            Ok(run) => {
                let m = &run.checkpoint.model;
                let batch = ds.test.batch(&[0, 1]).unwrap();
                let out = m.predict(&batch).unwrap();
                let shape_ok = run.scored.attention.shape()[1..] == [3, 3]
                    && out.z.shape()[1] == 3 * cfg.model.d
                    && !m.tokens().contains(&s);
                ok &= shape_ok;
                notes.push(format!("w/o {}: acc {:.3}", s.code(), run.report.raw.accuracy));
            }
            Err(e) => {
                ok = false;
                notes.push(format!("w/o {}: {e}", s.code()));
            }
        }
    }
    verdict(11, ok, &format!("attention 3×3, fused width 3d; {}", notes.join(", ")));
}
