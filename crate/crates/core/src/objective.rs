//! Training objective: MixUp, label smoothing, BCE with logits, KL and
//! diversity regularizers, the temperature prior, and post-hoc temperature
//! fitting.

use serde::{Deserialize, Serialize};

use crate::data::{StreamBatch, StreamId};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ForwardVars;
use crate::rng::RngStream;

/// Variance floor inside the diversity penalty's standard deviation.
pub const DIVERSITY_VAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub kl_start: f64,
    pub kl_end: f64,
    pub div_start: f64,
    pub div_end: f64,
    pub tau_prior: f64,
    pub smoothing: f64,
    pub mixup: bool,
    pub mixup_alpha: f64,
    /// Draw one mixing coefficient per sample instead of one per batch.
    pub mixup_per_sample: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kl_start: 1e-4,
            kl_end: 1e-3,
            div_start: 0.0,
            div_end: 0.05,
            tau_prior: 0.01,
            smoothing: 0.1,
            mixup: true,
            mixup_alpha: 1.0,
            mixup_per_sample: true,
        }
    }
}

/// Coefficients in effect at one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub kl: f64,
    pub div: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kl_start", self.kl_start),
            ("kl_end", self.kl_end),
            ("div_start", self.div_start),
            ("div_end", self.div_end),
            ("tau_prior", self.tau_prior),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        if self.kl_end < self.kl_start || self.div_end < self.div_start {
            return Err(Error::Config("loss weight schedules must be non-decreasing".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing must be in [0, 1), got {}", self.smoothing)));
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::Config(format!("mixup_alpha must be > 0, got {}", self.mixup_alpha)));
        }
        Ok(())
    }

    /// Linear ramps from `start` (first epoch) to `end` (last epoch).
    pub fn at(&self, epoch: usize, epochs: usize) -> Lambdas {
        let frac = if epochs <= 1 {
            0.0
        } else {
            (epoch.min(epochs - 1)) as f64 / (epochs - 1) as f64
        };
        Lambdas {
            kl: self.kl_start + (self.kl_end - self.kl_start) * frac,
            div: self.div_start + (self.div_end - self.div_start) * frac,
            tau: self.tau_prior,
        }
    }
}

/// A mixed batch and how it was produced.
#[derive(Clone, Debug)]
pub struct Mixup {
    pub batch: StreamBatch,
    pub targets: Vec<f64>,
    /// One coefficient per sample (all equal unless drawn per sample).
    pub lambda: Vec<f64>,
    pub perm: Vec<usize>,
    /// False when the batch was too small to mix and was passed through.
    pub mixed: bool,
}

/// `x̃ = λ·x + (1 − λ)·x_π`, `ỹ = λ·y + (1 − λ)·y_π` for every stream.
pub fn mix_with(batch: &StreamBatch, y: &[f64], lambda: &[f64], perm: &[usize]) -> Result<(StreamBatch, Vec<f64>)> {
    let n = batch.batch_size();
    if y.len() != n || lambda.len() != n || perm.len() != n {
        return Err(Error::dim("mixup", &[n], &[y.len(), lambda.len(), perm.len()]));
    }
    let mut out = batch.clone();
    for s in StreamId::ALL {
        let src = batch.stream(s);
        let w = src.last_dim();
        let dst = out.stream_mut(s).data_mut();
        for b in 0..n {
            let (l, j) = (lambda[b], perm[b]);
            for c in 0..w {
                dst[b * w + c] = l * src.data()[b * w + c] + (1.0 - l) * src.data()[j * w + c];
            }
        }
    }
    let targets = (0..n).map(|b| lambda[b] * y[b] + (1.0 - lambda[b]) * y[perm[b]]).collect();
    Ok((out, targets))
}

pub fn mixup_batch(
    batch: &StreamBatch,
    y: &[f64],
    alpha: f64,
    per_sample: bool,
    rng: &mut RngStream,
) -> Result<Mixup> {
    let n = batch.batch_size();
    if n < 2 {
        return Ok(Mixup {
            batch: batch.clone(),
            targets: y.to_vec(),
            lambda: vec![1.0; n],
            perm: (0..n).collect(),
            mixed: false,
        });
    }
    let lambda = if per_sample {
        (0..n).map(|_| rng.beta(alpha, alpha)).collect::<Result<Vec<_>>>()?
    } else {
        vec![rng.beta(alpha, alpha)?; n]
    };
    let perm = rng.permutation(n);
    let (mixed, targets) = mix_with(batch, y, &lambda, &perm)?;
    Ok(Mixup {
        batch: mixed,
        targets,
        lambda,
        perm,
        mixed: true,
    })
}

/// `t = (1 − ε)·y + ε/2`.
pub fn smooth_targets(y: &[f64], eps: f64) -> Vec<f64> {
    y.iter().map(|v| (1.0 - eps) * v + eps / 2.0).collect()
}

pub use crate::graph::bce_with_logits_mean as bce_with_logits;

/// Column spread above which the diversity penalty stops rewarding growth.
pub const DIVERSITY_STD_CAP: f64 = 1.0;

/// `−(1/m) Σ_j min(sqrt(max(Var_b F[b, j], floor)), cap)` as a graph node.
/// Only spread below the cap is penalized; without it the term rewards
/// scaling `F` up without bound. Returns `None` when the batch has fewer
/// than two rows (the spread is undefined).
pub fn diversity_penalty(g: &mut Graph, f: Var) -> Result<Option<Var>> {
    if g.shape(f).len() != 2 {
        return Err(Error::dim("diversity_penalty", g.shape(f), &[]));
    }
    if g.shape(f)[0] < 2 {
        return Ok(None);
    }
    let std = g.column_std(f, DIVERSITY_VAR_FLOOR)?;
    // min(x, c) = (x + c − |x − c|) / 2
    let over = g.add_scalar(std, -DIVERSITY_STD_CAP);
    let over = g.abs(over);
    let capped = g.sub(std, over)?;
    let capped = g.add_scalar(capped, DIVERSITY_STD_CAP);
    let m = g.mean(capped);
    Ok(Some(g.scale(m, -0.5)))
}

/// Scalar terms of the composite loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    /// Batch mean of the per-sample KL.
    pub kl: f64,
    pub div: f64,
    /// `|τ − 1|`.
    pub temp_prior: f64,
    pub lambdas: Lambdas,
}

impl LossBreakdown {
    pub fn assemble(ce: f64, kl: f64, div: f64, tau: f64, lambdas: Lambdas) -> Self {
        let temp_prior = (tau - 1.0).abs();
        Self {
            total: ce + lambdas.kl * kl + lambdas.div * div + lambdas.tau * temp_prior,
            ce,
            kl,
            div,
            temp_prior,
            lambdas,
        }
    }
}

/// Builds `CE + λ_KL·mean(kl) + λ_div·div(z) + λ_τ·|τ − 1|` on the graph.
/// `τ` enters only through the prior.
pub fn total_loss(
    g: &mut Graph,
    out: &ForwardVars,
    log_tau: Var,
    targets: &[f64],
    lambdas: Lambdas,
) -> Result<(Var, LossBreakdown)> {
    if lambdas.kl < 0.0 || lambdas.div < 0.0 || lambdas.tau < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let ce = g.bce_with_logits(out.logit, targets)?;
    let kl = g.mean(out.kl);
    let div = diversity_penalty(g, out.z)?;
    let tau = g.exp(log_tau);
    let tau_m1 = g.add_scalar(tau, -1.0);
    let prior = g.abs(tau_m1);
    let prior = g.sum(prior);

    let mut total = ce;
    let kl_term = g.scale(kl, lambdas.kl);
    total = g.add(total, kl_term)?;
    if let Some(div) = div {
        let t = g.scale(div, lambdas.div);
        total = g.add(total, t)?;
    }
    let t = g.scale(prior, lambdas.tau);
    total = g.add(total, t)?;

    let ce_v = g.value(ce).item();
    let kl_v = g.value(kl).item();
    let div_v = div.map_or(0.0, |d| g.value(d).item());
    let tau_v = g.value(tau).data()[0];
    let mut bd = LossBreakdown::assemble(ce_v, kl_v, div_v, tau_v, lambdas);
    bd.total = g.value(total).item();
    Ok((total, bd))
}

/// Mean negative log-likelihood of labels under `σ(ℓ/τ)`.
pub fn scaled_nll(logits: &[f64], labels: &[u8], tau: f64) -> f64 {
    let t: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    bce_with_logits(&scaled, &t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub tau: f64,
    pub nll: f64,
    pub nll_at_one: f64,
}

pub const TAU_MIN: f64 = 0.05;
pub const TAU_MAX: f64 = 20.0;
const TAU_GRID: usize = 400;

/// Fits `τ*` minimizing validation NLL over `[0.05, 20]`: a 400-point
/// log-uniform grid, then golden-section search between the neighbors of
/// the best grid point.
pub fn fit_posthoc_temperature(logits: &[f64], labels: &[u8]) -> Result<TemperatureFit> {
    if logits.len() != labels.len() {
        return Err(Error::dim("fit_posthoc_temperature", &[logits.len()], &[labels.len()]));
    }
    if logits.len() < 10 {
        return Err(Error::Calibration(format!(
            "need at least 10 validation samples, got {}",
            logits.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Calibration("validation labels contain a single class".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("validation logits".into()));
    }
    let f = |log_tau: f64| scaled_nll(logits, labels, log_tau.exp());
    let (lo, hi) = (TAU_MIN.ln(), TAU_MAX.ln());
    let step = (hi - lo) / (TAU_GRID - 1) as f64;
    let grid: Vec<f64> = (0..TAU_GRID).map(|k| lo + step * k as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let best = (0..TAU_GRID)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .expect("non-empty grid");

    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(TAU_GRID - 1)];
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..100 {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let refined = (a + b) / 2.0;
    let (x, nll) = [(refined, f(refined)), (grid[best], vals[best])]
        .into_iter()
        .min_by(|p, q| p.1.total_cmp(&q.1))
        .expect("two candidates");
    Ok(TemperatureFit {
        tau: x.exp(),
        nll,
        nll_at_one: f(0.0),
    })
}
