//! Classification, ranking and calibration metrics, plus seed aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 15;
pub const NLL_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// The same counts with the roles of the classes swapped.
    pub fn flipped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

/// `a / b`, or 0 when `b` is 0.
fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Predicts 1 iff `prob ≥ threshold`.
pub fn confusion(threshold: f64, probs: &[f64], labels: &[u8]) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(c: &Confusion) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den.sqrt()
    }
}

fn check_lengths(op: &'static str, scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim(op, &[scores.len()], &[labels.len()]));
    }
    Ok(())
}

/// Indices sorted by descending score, ties kept in input order.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve via the Mann–Whitney statistic (ties count ½).
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths("auc_roc", scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC-ROC needs both classes".into()));
    }
    // average ranks (1-based, ascending) over tie groups
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Average precision: `Σ_k (R_k − R_{k−1})·P_k` over score thresholds in
/// descending order, with tied scores forming a single step.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths("average_precision", scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive".into()));
    }
    let idx = ranked(scores);
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            tp += usize::from(labels[idx[j]] == 1);
            seen += 1;
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_lengths("roc_curve", scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC curve needs both classes".into()));
    }
    let idx = ranked(scores);
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        out.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        i = j;
    }
    Ok(out)
}

/// Precision–recall points `(recall, precision)`, one per distinct score.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_lengths("pr_curve", scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("PR curve needs a positive".into()));
    }
    let idx = ranked(scores);
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0, 0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            tp += usize::from(labels[idx[j]] == 1);
            seen += 1;
            j += 1;
        }
        out.push((tp as f64 / pos as f64, tp as f64 / seen as f64));
        i = j;
    }
    Ok(out)
}

pub fn brier(probs: &[f64], labels: &[u8]) -> f64 {
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| (p - y as f64).powi(2))
        .sum::<f64>()
        / n
}

pub fn nll(probs: &[f64], labels: &[u8], clamp: f64) -> f64 {
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let p = p.clamp(clamp, 1.0 - clamp);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EceVariant {
    /// Class-1 probability against the class-1 rate.
    Class1,
    /// `max(p, 1 − p)` against the accuracy of the predicted class.
    Confidence,
}

/// Expected calibration error over `bins` equal-width bins on `[0, 1]`.
pub fn ece(probs: &[f64], labels: &[u8], bins: usize, variant: EceVariant) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Parameter("ECE needs at least one bin".into()));
    }
    check_lengths("ece", probs, labels)?;
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hit = vec![0.0; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let (c, h) = match variant {
            EceVariant::Class1 => (p, y as f64),
            EceVariant::Confidence => {
                let pred = u8::from(p >= 0.5);
                (p.max(1.0 - p), f64::from(u8::from(pred == y)))
            }
        };
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        hit[b] += h;
    }
    let n = probs.len().max(1) as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let k = count[b] as f64;
            (k / n) * (conf[b] / k - hit[b] / k).abs()
        })
        .sum())
}

/// Threshold maximizing positive-class F1 on validation data. Candidates are
/// 0, 1 and the midpoints between consecutive distinct probabilities; ties go
/// to the candidate closest to 0.5. When every probability is equal no cut
/// separates anything and 0.5 is returned.
pub fn select_threshold(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths("select_threshold", probs, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Calibration("threshold selection needs both classes".into()));
    }
    let mut uniq = probs.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    if uniq.len() == 1 {
        return Ok(0.5);
    }
    let mut candidates = vec![0.0, 1.0];
    candidates.extend(uniq.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    let mut best = (f64::NEG_INFINITY, f64::INFINITY, 0.5);
    for t in candidates {
        let f1 = confusion(t, probs, labels).f1();
        let dist = (t - 0.5).abs();
        if f1 > best.0 || (f1 == best.0 && (dist < best.1 || (dist == best.1 && t < best.2))) {
            best = (f1, dist, t);
        }
    }
    Ok(best.2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Metrics of one prediction set at a fixed threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub threshold: f64,
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when only one class is present.
    pub auc_roc: Option<f64>,
    pub average_precision: Option<f64>,
    pub mcc: f64,
    pub class0: ClassScores,
    pub class1: ClassScores,
    pub brier: f64,
    pub nll: f64,
    pub ece: f64,
    pub ece_confidence: f64,
    pub ece_bins: usize,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn compute(probs: &[f64], labels: &[u8], threshold: f64, ece_bins: usize) -> Result<Self> {
        check_lengths("evaluate", probs, labels)?;
        if probs.is_empty() {
            return Err(Error::Data("cannot evaluate an empty set".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain {
                op: "evaluate",
                detail: format!("probability {p} outside [0, 1]"),
            });
        }
        let c = confusion(threshold, probs, labels);
        let neg = c.flipped();
        let class = |c: &Confusion| ClassScores {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        };
        Ok(Self {
            n: probs.len(),
            threshold,
            accuracy: c.accuracy(),
            f1: c.f1(),
            auc_roc: auc_roc(probs, labels).ok(),
            average_precision: average_precision(probs, labels).ok(),
            mcc: mcc(&c),
            class0: class(&neg),
            class1: class(&c),
            brier: brier(probs, labels),
            nll: nll(probs, labels, NLL_CLAMP),
            ece: ece(probs, labels, ece_bins, EceVariant::Class1)?,
            ece_confidence: ece(probs, labels, ece_bins, EceVariant::Confidence)?,
            ece_bins,
            confusion: c,
        })
    }

    /// Scalar metrics by name, for aggregation.
    pub fn scalars(&self) -> BTreeMap<&'static str, f64> {
        let mut m = BTreeMap::new();
        m.insert("accuracy", self.accuracy);
        m.insert("f1", self.f1);
        if let Some(v) = self.auc_roc {
            m.insert("auc_roc", v);
        }
        if let Some(v) = self.average_precision {
            m.insert("average_precision", v);
        }
        m.insert("mcc", self.mcc);
        m.insert("precision_0", self.class0.precision);
        m.insert("recall_0", self.class0.recall);
        m.insert("f1_0", self.class0.f1);
        m.insert("precision_1", self.class1.precision);
        m.insert("recall_1", self.class1.recall);
        m.insert("f1_1", self.class1.f1);
        m.insert("brier", self.brier);
        m.insert("nll", self.nll);
        m.insert("ece", self.ece);
        m.insert("ece_confidence", self.ece_confidence);
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (N − 1).
    pub std: f64,
    pub formatted: String,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Estimation(format!(
                "need at least 2 values to aggregate, got {}",
                values.len()
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        Ok(Self {
            mean,
            std,
            formatted: format!("{mean:.3} ± {std:.3}"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub n_seeds: usize,
    pub metrics: BTreeMap<String, MeanStd>,
}

/// Mean and N−1 standard deviation per metric over seeds. Metrics missing
/// from any report are left out.
pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<SeedAggregate> {
    if reports.len() < 2 {
        return Err(Error::Estimation(format!(
            "aggregation needs at least 2 seeds, got {}",
            reports.len()
        )));
    }
    let scalars: Vec<_> = reports.iter().map(EvalReport::scalars).collect();
    let mut metrics = BTreeMap::new();
    for key in scalars[0].keys() {
        let vals: Option<Vec<f64>> = scalars.iter().map(|s| s.get(key).copied()).collect();
        if let Some(vals) = vals {
            metrics.insert(key.to_string(), MeanStd::of(&vals)?);
        }
    }
    Ok(SeedAggregate {
        n_seeds: reports.len(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let c = confusion(0.5, &[0.6, 0.4], &[1, 0]);
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (1, 1, 0, 0));
        let c = confusion(0.0, &[0.0, 0.3, 1.0], &[1, 0, 0]);
        assert_eq!(c.tp + c.fp, 3);
        let c = confusion(1.0 + 1e-9, &[0.0, 0.3, 1.0], &[1, 0, 0]);
        assert_eq!(c.tn + c.fn_, 3);
    }

    #[test]
    fn mcc_canonical_cases() {
        let perfect = Confusion { tp: 3, fp: 0, tn: 2, fn_: 0 };
        let inverted = Confusion { tp: 0, fp: 2, tn: 0, fn_: 3 };
        let sym = Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 };
        assert_eq!(mcc(&perfect), 1.0);
        assert_eq!(mcc(&inverted), -1.0);
        assert_eq!(mcc(&sym), 0.0);
        assert_eq!(mcc(&Confusion { tp: 4, ..Default::default() }), 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auc_roc(&[0.9, 0.8, 0.3], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc_roc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_equals_trapezoid_area() {
        let s = [0.9, 0.7, 0.7, 0.4, 0.4, 0.4, 0.2, 0.1];
        let y = [1, 0, 1, 1, 0, 0, 1, 0];
        let pts = roc_curve(&s, &y).unwrap();
        let area: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
        assert!((area - auc_roc(&s, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert!((average_precision(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 1, 0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // constant scores: one step at recall 1 with precision = positive rate
        assert!((average_precision(&[0.4; 5], &[1, 0, 0, 1, 0]).unwrap() - 0.4).abs() < 1e-15);
        // hand case: ranks 1..5 with labels 1,0,1,1,0 → (1 + 2/3 + 3/4) / 3
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6, 0.5], &[1, 0, 1, 1, 0]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0 + 0.75) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn brier_nll_examples() {
        assert!((brier(&[0.8, 0.3], &[1, 0]) - 0.065).abs() < 1e-15);
        assert_eq!(brier(&[0.5; 4], &[1, 0, 1, 1]), 0.25);
        assert_eq!(brier(&[1.0, 0.0], &[1, 0]), 0.0);
        assert!((nll(&[0.5; 3], &[1, 0, 1], NLL_CLAMP) - 2f64.ln()).abs() < 1e-15);
        assert!(nll(&[1.0, 0.0], &[1, 0], NLL_CLAMP) < 1e-11);
    }

    #[test]
    fn ece_examples() {
        assert!((ece(&[1.0; 4], &[1, 0, 1, 0], 15, EceVariant::Class1).unwrap() - 0.5).abs() < 1e-15);
        // each bin's mean probability equals its positive rate
        let p = [0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.75];
        let y = [1, 0, 0, 0, 1, 1, 1, 0];
        assert!(ece(&p, &y, 10, EceVariant::Class1).unwrap().abs() < 1e-15);
        // bins=1 → |mean prob − positive rate|
        let p = [0.1, 0.4, 0.8, 0.95, 0.3];
        let y = [0, 1, 1, 1, 0];
        let want = (p.iter().sum::<f64>() / 5.0 - 0.6).abs();
        assert!((ece(&p, &y, 1, EceVariant::Class1).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn ece_hand_table() {
        // 4 bins: [0,.25) [.25,.5) [.5,.75) [.75,1]
        let p = [0.1, 0.2, 0.3, 0.45, 0.55, 0.6, 0.8, 0.9];
        let y = [0, 1, 0, 1, 1, 1, 1, 0];
        // bin0: conf .15 acc .5 → 2/8·.35; bin1: .375 vs .5 → 2/8·.125
        // bin2: .575 vs 1 → 2/8·.425; bin3: .85 vs .5 → 2/8·.35
        let want = 0.25 * (0.35 + 0.125 + 0.425 + 0.35);
        assert!((ece(&p, &y, 4, EceVariant::Class1).unwrap() - want).abs() < 1e-12);
        // confidence variant: conf = max(p, 1−p); correct = (p ≥ .5) == y
        // confs .9 .8 .7 .55 | .55 .6 .8 .9 ; correct 1 0 1 0 | 1 1 1 0
        // bin2 [.5,.75): .7,.55,.55,.6 → mean .6 acc .75 ; bin3: .9,.8,.8,.9 → .85 acc .5
        let want = 0.5 * (0.6f64 - 0.75).abs() + 0.5 * (0.85f64 - 0.5).abs();
        assert!((ece(&p, &y, 4, EceVariant::Confidence).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn threshold_examples() {
        let t = select_threshold(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1]).unwrap();
        assert!((t - 0.45).abs() < 1e-15);
        assert_eq!(select_threshold(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(select_threshold(&[0.3, 0.4], &[1, 1]), Err(Error::Calibration(_))));
    }

    #[test]
    fn threshold_exhaustive_cuts() {
        let p = [0.05, 0.12, 0.33, 0.33, 0.41, 0.58, 0.61, 0.77, 0.8, 0.93];
        let y = [0, 1, 0, 1, 0, 1, 0, 1, 1, 0];
        let t = select_threshold(&p, &y).unwrap();
        let got = confusion(t, &p, &y).f1();
        // brute force: every subset of points predicted positive that is
        // consistent with some threshold (an upper set of distinct scores)
        let mut best: f64 = 0.0;
        for mask in 0u32..(1 << 10) {
            let pred: Vec<bool> = (0..10).map(|k| mask >> k & 1 == 1).collect();
            let consistent = (0..10).all(|i| (0..10).all(|j| !(pred[i] && !pred[j] && p[j] >= p[i])));
            if !consistent {
                continue;
            }
            let mut c = Confusion::default();
            for k in 0..10 {
                match (pred[k], y[k] == 1) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, false) => c.tn += 1,
                    (false, true) => c.fn_ += 1,
                }
            }
            best = best.max(c.f1());
        }
        assert_eq!(got, best);
    }

    #[test]
    fn aggregate_examples() {
        let base = EvalReport::compute(&[0.9, 0.2, 0.7, 0.4], &[1, 0, 1, 0], 0.5, 15).unwrap();
        let agg = aggregate_seeds(&[base.clone(), base.clone()]).unwrap();
        assert!(agg.metrics.values().all(|m| m.std == 0.0));
        let m = MeanStd::of(&[0.8, 0.9]).unwrap();
        assert!((m.mean - 0.85).abs() < 1e-15 && (m.std - 0.070710678).abs() < 1e-8);
        assert!(aggregate_seeds(&[base]).is_err());
    }

    #[test]
    fn class1_scores_match_headline() {
        let r = EvalReport::compute(&[0.9, 0.6, 0.2, 0.7, 0.1], &[1, 0, 0, 1, 1], 0.5, 15).unwrap();
        assert_eq!(r.class1.f1, r.f1);
        assert_eq!(r.confusion.total(), 5);
    }
}
