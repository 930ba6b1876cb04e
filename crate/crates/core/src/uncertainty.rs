//! Risk scores: KL-based, Mahalanobis distance with Ledoit–Wolf shrinkage,
//! selective prediction and error-detection evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::metrics::{auc_roc, average_precision};
use crate::tensor::Tensor;

pub const DEFAULT_RIDGE: f64 = 1e-3;

/// Lower-triangular Cholesky factor of a symmetric positive definite
/// row-major `n × n` matrix.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n {
        return Err(Error::dim("cholesky", &[a.len()], &[n, n]));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !(d > 0.0) {
                    return Err(Error::Estimation(format!(
                        "matrix is not positive definite (pivot {i} = {d})"
                    )));
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Inverse of an SPD matrix via its Cholesky factor, symmetrized.
pub fn spd_inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let l = cholesky(a, n)?;
    // invert L by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹
    let mut linv = vec![0.0; n * n];
    for col in 0..n {
        for i in col..n {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let s: f64 = (col..i).map(|k| l[i * n + k] * linv[k * n + col]).sum();
            linv[i * n + col] = (rhs - s) / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = (i..n).map(|k| linv[k * n + i] * linv[k * n + j]).sum();
            inv[i * n + j] = v;
            inv[j * n + i] = v;
        }
    }
    Ok(inv)
}

/// Shrunk covariance `(1 − ρ)·S + ρ·(tr S / d)·I + ridge·I`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShrunkCovariance {
    pub mean: Vec<f64>,
    /// Row-major `d × d`, ridge included.
    pub cov: Vec<f64>,
    pub shrinkage: f64,
    pub dim: usize,
}

/// Ledoit–Wolf shrinkage toward a scaled identity. The sample covariance `S`
/// uses `1/(N − 1)`; the intensity is `ρ = min(β̄², δ²) / δ²` with
/// `δ² = ‖S − μI‖²/d` and `β̄² = (1/N²) Σ_k ‖x_k x_kᵀ − S‖²/d`, clipped to
/// `[0, 1]`.
pub fn ledoit_wolf_cov(rows: &Tensor, ridge: f64) -> Result<ShrunkCovariance> {
    if rows.shape().len() != 2 {
        return Err(Error::dim("ledoit_wolf_cov", rows.shape(), &[]));
    }
    let (n, d) = (rows.shape()[0], rows.shape()[1]);
    if n < 2 {
        return Err(Error::Estimation(format!("covariance needs at least 2 rows, got {n}")));
    }
    if d == 0 {
        return Err(Error::Estimation("zero-dimensional embeddings".into()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Parameter(format!("ridge must be >= 0, got {ridge}")));
    }
    let x = rows.data();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += x[r * d + c];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<f64> = (0..n * d).map(|k| x[k] - mean[k % d]).collect();
    let mut s = vec![0.0; d * d];
    for r in 0..n {
        let row = &centered[r * d..(r + 1) * d];
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] += row[i] * row[j];
            }
        }
    }
    for v in &mut s {
        *v /= (n - 1) as f64;
    }
    let mu = (0..d).map(|i| s[i * d + i]).sum::<f64>() / d as f64;
    let delta2 = (0..d * d)
        .map(|k| {
            let t = if k / d == k % d { mu } else { 0.0 };
            (s[k] - t).powi(2)
        })
        .sum::<f64>()
        / d as f64;
    let mut beta_bar2 = 0.0;
    for r in 0..n {
        let row = &centered[r * d..(r + 1) * d];
        for i in 0..d {
            for j in 0..d {
                beta_bar2 += (row[i] * row[j] - s[i * d + j]).powi(2);
            }
        }
    }
    beta_bar2 /= (n as f64).powi(2) * d as f64;
    let rho = if delta2 > 0.0 {
        (beta_bar2.min(delta2) / delta2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let cov = (0..d * d)
        .map(|k| {
            let diag = k / d == k % d;
            (1.0 - rho) * s[k] + if diag { rho * mu + ridge } else { 0.0 }
        })
        .collect();
    Ok(ShrunkCovariance {
        mean,
        cov,
        shrinkage: rho,
        dim: d,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    Global,
    ClassConditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Anomaly-head mean `μ`.
    AnomalyMean,
    /// Penultimate classifier feature `z_cls`.
    ClassifierFeature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorGroup {
    /// Class label for class-conditional groups.
    pub label: Option<u8>,
    pub centroid: Vec<f64>,
    /// Row-major `d × d` precision matrix.
    pub precision: Vec<f64>,
    pub shrinkage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisDetector {
    pub mode: DetectorMode,
    pub source: EmbeddingSource,
    pub dim: usize,
    pub ridge: f64,
    pub groups: Vec<DetectorGroup>,
}

fn fit_group(rows: &Tensor, ridge: f64, label: Option<u8>) -> Result<DetectorGroup> {
    let c = ledoit_wolf_cov(rows, ridge)?;
    Ok(DetectorGroup {
        label,
        precision: spd_inverse(&c.cov, c.dim)?,
        centroid: c.mean,
        shrinkage: c.shrinkage,
    })
}

fn select_rows(x: &Tensor, keep: impl Fn(usize) -> bool) -> Result<Tensor> {
    let d = x.shape()[1];
    let mut data = Vec::new();
    let mut n = 0;
    for r in 0..x.shape()[0] {
        if keep(r) {
            data.extend_from_slice(x.row(r));
            n += 1;
        }
    }
    Tensor::new(vec![n, d], data)
}

impl MahalanobisDetector {
    /// Fits on training-split embeddings `[N × d]`.
    pub fn fit(
        embeddings: &Tensor,
        labels: &[u8],
        mode: DetectorMode,
        source: EmbeddingSource,
        ridge: f64,
    ) -> Result<Self> {
        if embeddings.shape().len() != 2 {
            return Err(Error::dim("MahalanobisDetector::fit", embeddings.shape(), &[]));
        }
        let dim = embeddings.shape()[1];
        let groups = match mode {
            DetectorMode::Global => vec![fit_group(embeddings, ridge, None)?],
            DetectorMode::ClassConditional => {
                if labels.len() != embeddings.shape()[0] {
                    return Err(Error::dim("MahalanobisDetector::fit", embeddings.shape(), &[labels.len()]));
                }
                let mut groups = Vec::new();
                for class in [0u8, 1] {
                    let count = labels.iter().filter(|&&y| y == class).count();
                    if count < 2 {
                        return Err(Error::Estimation(format!(
                            "class {class} has {count} training samples; at least 2 are needed"
                        )));
                    }
                    let rows = select_rows(embeddings, |r| labels[r] == class)?;
                    groups.push(fit_group(&rows, ridge, Some(class))?);
                }
                groups
            }
        };
        Ok(Self {
            mode,
            source,
            dim,
            ridge,
            groups,
        })
    }

    /// Squared distance; the minimum over groups in class-conditional mode.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::dim("mahalanobis_score", &[x.len()], &[self.dim]));
        }
        let d = self.dim;
        let mut best = f64::INFINITY;
        let mut diff = vec![0.0; d];
        for g in &self.groups {
            for (o, (a, b)) in diff.iter_mut().zip(x.iter().zip(&g.centroid)) {
                *o = a - b;
            }
            let mut q = 0.0;
            for i in 0..d {
                let row = &g.precision[i * d..(i + 1) * d];
                q += diff[i] * row.iter().zip(&diff).map(|(p, v)| p * v).sum::<f64>();
            }
            best = best.min(q.max(0.0));
        }
        Ok(best)
    }

    pub fn score_rows(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.shape().len() != 2 {
            return Err(Error::dim("mahalanobis_score", x.shape(), &[self.dim]));
        }
        (0..x.shape()[0]).map(|r| self.score(x.row(r))).collect()
    }
}

/// `σ(kl)`, mapping a non-negative KL to `[0.5, 1)`.
pub fn kl_score(kl: f64) -> f64 {
    sigmoid(kl)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub coverage: f64,
    /// Indices of kept samples, lowest risk first.
    pub kept: Vec<usize>,
    pub accuracy: f64,
}

/// Keeps the `⌈coverage·N⌉` lowest-risk samples (stable on ties) and reports
/// their accuracy.
pub fn selective_predict(correct: &[bool], risk: &[f64], coverage: f64) -> Result<Selection> {
    if correct.len() != risk.len() {
        return Err(Error::dim("selective_predict", &[correct.len()], &[risk.len()]));
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Parameter(format!("coverage must be in (0, 1], got {coverage}")));
    }
    if correct.is_empty() {
        return Err(Error::Data("no predictions to select from".into()));
    }
    let n = correct.len();
    let k = ((coverage * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| risk[a].total_cmp(&risk[b]));
    order.truncate(k);
    let hits = order.iter().filter(|&&i| correct[i]).count();
    Ok(Selection {
        coverage,
        accuracy: hits as f64 / k as f64,
        kept: order,
    })
}

/// Accuracy at each coverage in `grid`.
pub fn risk_coverage_curve(correct: &[bool], risk: &[f64], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&c| selective_predict(correct, risk, c).map(|s| (c, s.accuracy)))
        .collect()
}

/// Evenly spaced coverages `1/steps, 2/steps, …, 1`.
pub fn coverage_grid(steps: usize) -> Vec<f64> {
    (1..=steps).map(|k| k as f64 / steps as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetection {
    pub auroc: f64,
    pub auprc: f64,
    /// AUPRC of an uninformative score.
    pub error_rate: f64,
}

/// How well `risk` ranks incorrect predictions (the positive class) first.
pub fn error_detection_eval(correct: &[bool], risk: &[f64]) -> Result<ErrorDetection> {
    let errors: Vec<u8> = correct.iter().map(|&c| u8::from(!c)).collect();
    let n_err = errors.iter().filter(|&&e| e == 1).count();
    if n_err == 0 || n_err == errors.len() {
        return Err(Error::UndefinedMetric(
            "error detection needs both correct and incorrect predictions".into(),
        ));
    }
    Ok(ErrorDetection {
        auroc: auc_roc(risk, &errors)?,
        auprc: average_precision(risk, &errors)?,
        error_rate: n_err as f64 / errors.len() as f64,
    })
}
