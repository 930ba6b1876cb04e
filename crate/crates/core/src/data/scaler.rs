use serde::{Deserialize, Serialize};

use super::{build_interactions, FeatureRecord, ScaledStreams, Split, StreamConfig};
use crate::error::{Error, Result};

pub const DEFAULT_IQR_FLOOR: f64 = 1e-6;

/// Percentile with linear interpolation between order statistics
/// (position `q · (n − 1)` in the sorted sample). `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-feature median and interquartile range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub median: Vec<f64>,
    pub iqr: Vec<f64>,
}

impl FeatureStats {
    fn fit(rows: &[&[f64]]) -> Self {
        let width = rows.first().map_or(0, |r| r.len());
        let mut median = Vec::with_capacity(width);
        let mut iqr = Vec::with_capacity(width);
        let mut col = Vec::with_capacity(rows.len());
        for j in 0..width {
            col.clear();
            col.extend(rows.iter().map(|r| r[j]));
            col.sort_by(f64::total_cmp);
            median.push(percentile(&col, 0.5));
            iqr.push(percentile(&col, 0.75) - percentile(&col, 0.25));
        }
        Self { median, iqr }
    }

    fn apply(&self, x: &[f64], floor: f64, what: &str) -> Result<Vec<f64>> {
        if x.len() != self.median.len() {
            return Err(Error::Data(format!(
                "{what}: {} features but scaler was fitted on {}",
                x.len(),
                self.median.len()
            )));
        }
        Ok(x.iter()
            .zip(&self.median)
            .zip(&self.iqr)
            .map(|((v, m), q)| (v - m) / q.max(floor))
            .collect())
    }
}

/// Median/IQR scaling per raw stream, fitted on training records only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustScaler {
    pub a: FeatureStats,
    pub p: FeatureStats,
    pub s: FeatureStats,
    pub iqr_floor: f64,
}

impl RobustScaler {
    /// Fits on the `train` records among `records`; other splits are ignored.
    pub fn fit(records: &[FeatureRecord], cfg: &StreamConfig, iqr_floor: f64) -> Result<Self> {
        if !(iqr_floor > 0.0) {
            return Err(Error::Parameter(format!("iqr_floor must be > 0, got {iqr_floor}")));
        }
        let train: Vec<&FeatureRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
        if train.len() < 2 {
            return Err(Error::Data(format!(
                "scaler needs at least 2 training records, found {}",
                train.len()
            )));
        }
        for r in &train {
            r.validate(cfg)?;
        }
        let rows = |f: fn(&FeatureRecord) -> &[f64]| -> Vec<&[f64]> { train.iter().map(|r| f(r)).collect() };
        Ok(Self {
            a: FeatureStats::fit(&rows(|r| &r.x_a)),
            p: FeatureStats::fit(&rows(|r| &r.x_p)),
            s: FeatureStats::fit(&rows(|r| &r.x_s)),
            iqr_floor,
        })
    }

    /// `(x − median) / max(IQR, floor)` for each raw stream.
    pub fn transform(&self, record: &FeatureRecord) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        Ok((
            self.a.apply(&record.x_a, self.iqr_floor, "x_a")?,
            self.p.apply(&record.x_p, self.iqr_floor, "x_p")?,
            self.s.apply(&record.x_s, self.iqr_floor, "x_s")?,
        ))
    }

    pub fn transform_with_interactions(&self, record: &FeatureRecord, cfg: &StreamConfig) -> Result<ScaledStreams> {
        let (a, p, s) = self.transform(record)?;
        let i = build_interactions(&a, &p, &s, cfg)?;
        Ok(ScaledStreams { a, p, s, i })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn cfg(d: usize) -> StreamConfig {
        StreamConfig {
            d_a: d,
            d_p: d,
            d_s: d,
            text_embedding_dim: 0,
            interaction_pairs: vec!["a0*p0".parse().unwrap()],
        }
    }

    fn rec(id: usize, split: Split, a: Vec<f64>, p: Vec<f64>, s: Vec<f64>) -> FeatureRecord {
        FeatureRecord {
            id: format!("r{id}"),
            video_id: "v".into(),
            track_id: "t".into(),
            split,
            label: (id % 2) as u8,
            x_a: a,
            x_p: p,
            x_s: s,
        }
    }

    #[test]
    fn textbook_percentiles() {
        let recs: Vec<_> = (1..=5)
            .map(|v| rec(v, Split::Train, vec![v as f64], vec![7.0], vec![v as f64 * 2.0]))
            .collect();
        let sc = RobustScaler::fit(&recs, &cfg(1), DEFAULT_IQR_FLOOR).unwrap();
        assert_eq!(sc.a.median, vec![3.0]);
        assert_eq!(sc.a.iqr, vec![2.0]);
        // constant feature: IQR 0, divisor = floor, output 0
        assert_eq!(sc.p.iqr, vec![0.0]);
        let (_, p, _) = sc.transform(&recs[0]).unwrap();
        assert_eq!(p, vec![0.0]);
    }

    #[test]
    fn empty_train_split_is_data_error() {
        let recs = vec![rec(0, Split::Val, vec![1.0], vec![1.0], vec![1.0])];
        assert!(matches!(RobustScaler::fit(&recs, &cfg(1), 1e-6), Err(Error::Data(_))));
    }

    #[test]
    fn median_and_median_plus_iqr() {
        let mut rng = RngStream::new(4);
        let recs: Vec<_> = (0..50)
            .map(|i| {
                let v: Vec<f64> = (0..3).map(|_| rng.normal() * 4.0 + 2.0).collect();
                rec(i, Split::Train, v.clone(), v.clone(), v)
            })
            .collect();
        let sc = RobustScaler::fit(&recs, &cfg(3), 1e-6).unwrap();
        let mut r = recs[0].clone();
        r.x_a = sc.a.median.clone();
        r.x_p = sc.p.median.iter().zip(&sc.p.iqr).map(|(m, q)| m + q).collect();
        let (a, p, _) = sc.transform(&r).unwrap();
        assert!(a.iter().all(|v| *v == 0.0));
        assert!(p.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn scaled_train_medians_are_zero() {
        let mut rng = RngStream::new(8);
        let recs: Vec<_> = (0..200)
            .map(|i| {
                let v: Vec<f64> = (0..6).map(|j| rng.normal() * (j as f64 + 1.0) + j as f64).collect();
                rec(i, Split::Train, v.clone(), v.clone(), v)
            })
            .collect();
        let sc = RobustScaler::fit(&recs, &cfg(6), 1e-6).unwrap();
        for j in 0..6 {
            let mut col: Vec<f64> = recs.iter().map(|r| sc.transform(r).unwrap().0[j]).collect();
            col.sort_by(f64::total_cmp);
            assert!(percentile(&col, 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn transform_twice_is_not_idempotent() {
        let mut rng = RngStream::new(9);
        let recs: Vec<_> = (0..40)
            .map(|i| {
                let v: Vec<f64> = (0..2).map(|_| rng.normal() * 3.0 + 5.0).collect();
                rec(i, Split::Train, v.clone(), v.clone(), v)
            })
            .collect();
        let sc = RobustScaler::fit(&recs, &cfg(2), 1e-6).unwrap();
        let r = &recs[3];
        let (once, _, _) = sc.transform(r).unwrap();
        let mut again = r.clone();
        again.x_a = once.clone();
        let (twice, _, _) = sc.transform(&again).unwrap();
        for j in 0..2 {
            let expected = (once[j] - sc.a.median[j]) / sc.a.iqr[j];
            assert!((twice[j] - expected).abs() < 1e-12);
            assert!((twice[j] - once[j]).abs() > 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_is_data_error() {
        let recs: Vec<_> = (0..3).map(|i| rec(i, Split::Train, vec![i as f64], vec![1.0], vec![1.0])).collect();
        let sc = RobustScaler::fit(&recs, &cfg(1), 1e-6).unwrap();
        let bad = rec(9, Split::Test, vec![1.0, 2.0], vec![1.0], vec![1.0]);
        assert!(matches!(sc.transform(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn ignores_non_train_records() {
        let mut recs: Vec<_> = (0..10).map(|i| rec(i, Split::Train, vec![i as f64], vec![1.0], vec![1.0])).collect();
        let base = RobustScaler::fit(&recs, &cfg(1), 1e-6).unwrap();
        recs.push(rec(100, Split::Val, vec![1e6], vec![-1e6], vec![3.0]));
        recs.insert(0, rec(101, Split::Test, vec![-1e6], vec![1e6], vec![3.0]));
        assert_eq!(RobustScaler::fit(&recs, &cfg(1), 1e-6).unwrap(), base);
    }
}
