//! Synthetic four-stream data with a closed-form Bayes-optimal probability.
//!
//! Each record draws standard-normal latent cues `u`; observed raw features are
//! `loc + scale · u` with per-feature `loc`/`scale` fixed by the seed. The true
//! crossing log-odds are `intercept + Σ w·u + Σ c·u_k·u_l`, and the label is
//! Bernoulli(`σ(logit / noise)`). With `noise = 0` the label is the sign of
//! the logit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FeatureRecord, FeatureRef, InteractionPair, Split, StreamConfig, StreamId};
use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::rng::{purpose, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Shifts the class balance.
    pub intercept: f64,
    /// Linear coefficients keyed by feature, e.g. `a0 = 2.0`.
    pub linear: BTreeMap<String, f64>,
    /// Product coefficients keyed by pair, e.g. `"a0*p0" = 2.5`.
    pub products: BTreeMap<String, f64>,
    /// Logistic noise scale; 0 makes labels a deterministic function of the cues.
    pub noise: f64,
    /// Records in the out-of-distribution set.
    pub n_ood: usize,
    /// OOD mean shift of every feature, in units of its scale.
    pub ood_shift: f64,
    /// OOD multiplier on the latent spread of every feature.
    pub ood_scale: f64,
    /// Records in the ambiguous tail: shifted features, true probability 0.5.
    pub n_tail: usize,
    pub tail_shift: f64,
    /// Records per synthetic video.
    pub video_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let linear = [
            ("s0", 3.0),
            ("s1", -2.5),
            ("a0", 2.0),
            ("p0", 1.5),
            ("a1", 1.5),
            ("s2", 1.5),
            ("s3", 1.5),
        ];
        let products = [("a0*p0", 2.5), ("a2*p1", -2.0)];
        Self {
            seed: 7,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            intercept: 0.0,
            linear: linear.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            products: products.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            noise: 1.0,
            n_ood: 500,
            ood_shift: 3.0,
            ood_scale: 1.0,
            n_tail: 0,
            tail_shift: 3.0,
            video_size: 20,
        }
    }
}

/// Generated records and their true probabilities.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    /// Train, val and test records, in that order.
    pub records: Vec<FeatureRecord>,
    /// True `P(label = 1)` for each entry of `records`.
    pub oracle: Vec<f64>,
    pub ood: Vec<FeatureRecord>,
    pub ood_oracle: Vec<f64>,
    pub tail: Vec<FeatureRecord>,
    pub tail_oracle: Vec<f64>,
}

impl SyntheticData {
    /// Oracle probabilities of the records in `split`.
    pub fn oracle_for(&self, split: Split) -> Vec<f64> {
        self.records
            .iter()
            .zip(&self.oracle)
            .filter(|(r, _)| r.split == split)
            .map(|(_, p)| *p)
            .collect()
    }
}

/// Expected accuracy of the Bayes-optimal classifier: mean of `max(p, 1 − p)`.
pub fn bayes_accuracy(oracle: &[f64]) -> f64 {
    oracle.iter().map(|p| p.max(1.0 - p)).sum::<f64>() / oracle.len().max(1) as f64
}

struct Model {
    linear: Vec<(FeatureRef, f64)>,
    products: Vec<(InteractionPair, f64)>,
    loc: [Vec<f64>; 3],
    scale: [Vec<f64>; 3],
}

impl Model {
    fn logit(&self, u: &[Vec<f64>; 3], intercept: f64) -> f64 {
        let at = |f: FeatureRef| u[f.stream.index()][f.index];
        let lin: f64 = self.linear.iter().map(|(f, w)| w * at(*f)).sum();
        let prod: f64 = self
            .products
            .iter()
            .map(|(p, c)| c * at(p.left) * at(p.right))
            .sum();
        intercept + lin + prod
    }

    fn features(&self, u: &[Vec<f64>; 3], spread: f64, shift: f64) -> [Vec<f64>; 3] {
        std::array::from_fn(|k| {
            u[k].iter()
                .zip(&self.loc[k])
                .zip(&self.scale[k])
                .map(|((u, l), s)| l + s * (spread * u + shift))
                .collect()
        })
    }
}

fn probability(logit: f64, noise: f64) -> f64 {
    if noise > 0.0 {
        sigmoid(logit / noise)
    } else if logit > 0.0 {
        1.0
    } else if logit < 0.0 {
        0.0
    } else {
        0.5
    }
}

fn check_ref(f: FeatureRef, cfg: &StreamConfig) -> Result<FeatureRef> {
    if f.stream == StreamId::Interaction || f.index >= cfg.width(f.stream) {
        return Err(Error::Config(format!("synthetic coefficient on invalid feature {f}")));
    }
    Ok(f)
}

impl SyntheticSpec {
    pub fn validate(&self, cfg: &StreamConfig) -> Result<()> {
        self.compile(cfg, &mut RngStream::new(0)).map(|_| ())
    }

    fn compile(&self, cfg: &StreamConfig, rng: &mut RngStream) -> Result<Model> {
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("synthetic noise must be >= 0, got {}", self.noise)));
        }
        if self.n_train + self.n_val + self.n_test == 0 {
            return Err(Error::Config("synthetic split sizes are all zero".into()));
        }
        if self.video_size == 0 {
            return Err(Error::Config("synthetic video_size must be positive".into()));
        }
        for (name, v) in [
            ("intercept", self.intercept),
            ("ood_shift", self.ood_shift),
            ("ood_scale", self.ood_scale),
            ("tail_shift", self.tail_shift),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("synthetic {name} must be finite")));
            }
        }
        let linear = self
            .linear
            .iter()
            .map(|(k, w)| Ok((check_ref(k.parse()?, cfg)?, *w)))
            .collect::<Result<Vec<_>>>()?;
        let products = self
            .products
            .iter()
            .map(|(k, c)| {
                let pair: InteractionPair = k.parse()?;
                check_ref(pair.left, cfg)?;
                check_ref(pair.right, cfg)?;
                Ok((pair, *c))
            })
            .collect::<Result<Vec<_>>>()?;
        let widths = [cfg.d_a, cfg.d_p, cfg.width_s()];
        let loc = widths.map(|w| (0..w).map(|_| rng.uniform_range(-2.0, 2.0)).collect());
        let scale = widths.map(|w| (0..w).map(|_| rng.uniform_range(0.5, 3.0)).collect());
        Ok(Model {
            linear,
            products,
            loc,
            scale,
        })
    }
}

/// Generates train/val/test records plus the OOD and ambiguous-tail sets.
/// OOD and tail records carry the `test` split tag.
pub fn generate_synthetic(spec: &SyntheticSpec, cfg: &StreamConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let root = RngStream::new(spec.seed).split(purpose::SYNTHETIC);
    let model = spec.compile(cfg, &mut root.split(1))?;
    let mut rng = root.split(2);
    let widths = [cfg.d_a, cfg.d_p, cfg.width_s()];

    let mut draw = |id: String, video: usize, track: usize, split: Split, kind: Kind| {
        let u: [Vec<f64>; 3] = widths.map(|w| (0..w).map(|_| rng.normal()).collect());
        let (p, x) = match kind {
            Kind::Regular => (
                probability(model.logit(&u, spec.intercept), spec.noise),
                model.features(&u, 1.0, 0.0),
            ),
            Kind::Ood => (
                probability(model.logit(&u, spec.intercept), spec.noise),
                model.features(&u, spec.ood_scale, spec.ood_shift),
            ),
            Kind::Tail => (0.5, model.features(&u, 1.0, spec.tail_shift)),
        };
        let label = u8::from(rng.bernoulli(p));
        let [x_a, x_p, x_s] = x;
        let rec = FeatureRecord {
            id,
            video_id: format!("vid_{video:04}"),
            track_id: format!("trk_{track:03}"),
            split,
            label,
            x_a,
            x_p,
            x_s,
        };
        (rec, p)
    };

    let mut out = SyntheticData {
        records: Vec::new(),
        oracle: Vec::new(),
        ood: Vec::new(),
        ood_oracle: Vec::new(),
        tail: Vec::new(),
        tail_oracle: Vec::new(),
    };
    let vs = spec.video_size;
    let mut k = 0;
    for (split, n) in [(Split::Train, spec.n_train), (Split::Val, spec.n_val), (Split::Test, spec.n_test)] {
        for _ in 0..n {
            let (r, p) = draw(format!("syn_{k:05}"), k / vs, k % vs, split, Kind::Regular);
            out.records.push(r);
            out.oracle.push(p);
            k += 1;
        }
    }
    for j in 0..spec.n_ood {
        let (r, p) = draw(format!("ood_{j:05}"), 9000 + j / vs, j % vs, Split::Test, Kind::Ood);
        out.ood.push(r);
        out.ood_oracle.push(p);
    }
    for j in 0..spec.n_tail {
        let (r, p) = draw(format!("tail_{j:05}"), 8000 + j / vs, j % vs, Split::Test, Kind::Tail);
        out.tail.push(r);
        out.tail_oracle.push(p);
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum Kind {
    Regular,
    Ood,
    Tail,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coefficients_give_half() {
        let spec = SyntheticSpec {
            linear: BTreeMap::new(),
            products: BTreeMap::new(),
            n_train: 50,
            n_val: 10,
            n_test: 10,
            ..Default::default()
        };
        let data = generate_synthetic(&spec, &StreamConfig::default()).unwrap();
        assert!(data.oracle.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn separable_limit() {
        let spec = SyntheticSpec {
            linear: [("a0".to_string(), 5.0)].into_iter().collect(),
            products: BTreeMap::new(),
            noise: 0.0,
            ..Default::default()
        };
        let cfg = StreamConfig::default();
        let data = generate_synthetic(&spec, &cfg).unwrap();
        assert!(bayes_accuracy(&data.oracle) > 0.999);
        // scale > 0, so the label is the sign of x_a0 − loc_a0; recover loc as
        // the boundary between the classes
        let max_neg = data.records.iter().filter(|r| r.label == 0).map(|r| r.x_a[0]).fold(f64::MIN, f64::max);
        let min_pos = data.records.iter().filter(|r| r.label == 1).map(|r| r.x_a[0]).fold(f64::MAX, f64::min);
        assert!(max_neg < min_pos);
    }

    #[test]
    fn default_label_rate_tracks_oracle() {
        let data = generate_synthetic(&SyntheticSpec::default(), &StreamConfig::default()).unwrap();
        assert_eq!(data.records.len(), 3000);
        let rate = data.records.iter().map(|r| r.label as f64).sum::<f64>() / 3000.0;
        let mean_p = data.oracle.iter().sum::<f64>() / 3000.0;
        assert!((rate - mean_p).abs() < 0.03);
        let bayes = bayes_accuracy(&data.oracle);
        assert!((0.88..0.95).contains(&bayes), "bayes accuracy {bayes}");
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticSpec {
            n_train: 30,
            n_val: 5,
            n_test: 5,
            n_tail: 4,
            ..Default::default()
        };
        let cfg = StreamConfig::default();
        let a = generate_synthetic(&spec, &cfg).unwrap();
        let b = generate_synthetic(&spec, &cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.tail, b.tail);
        let c = generate_synthetic(&SyntheticSpec { seed: 8, ..spec }, &cfg).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn invalid_coefficient_is_config_error() {
        let spec = SyntheticSpec {
            linear: [("a99".to_string(), 1.0)].into_iter().collect(),
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&spec, &StreamConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
