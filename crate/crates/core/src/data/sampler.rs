use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Draws record indices with replacement, each weighted by `1 / count(class)`
/// so both classes are drawn equally often in expectation.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    cumulative: Vec<f64>,
}

impl WeightedSampler {
    pub fn new(labels: &[u8]) -> Result<Self> {
        let pos = labels.iter().filter(|&&l| l == 1).count();
        let neg = labels.iter().filter(|&&l| l == 0).count();
        if pos + neg != labels.len() {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        if pos == 0 || neg == 0 {
            return Err(Error::Data(format!(
                "weighted sampling needs both classes (positives {pos}, negatives {neg})"
            )));
        }
        let mut acc = 0.0;
        let cumulative = labels
            .iter()
            .map(|&l| {
                acc += if l == 1 { 1.0 / pos as f64 } else { 1.0 / neg as f64 };
                acc
            })
            .collect();
        Ok(Self { cumulative })
    }

    /// Normalized weight of record `i`.
    pub fn weight(&self, i: usize) -> f64 {
        let prev = if i == 0 { 0.0 } else { self.cumulative[i - 1] };
        (self.cumulative[i] - prev) / self.total()
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    pub fn draw(&self, rng: &mut RngStream) -> usize {
        let u = rng.uniform() * self.total();
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }

    pub fn draw_n(&self, rng: &mut RngStream, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_labels_give_uniform_weights() {
        let s = WeightedSampler::new(&[0, 1, 0, 1, 1, 0]).unwrap();
        for i in 0..6 {
            assert!((s.weight(i) - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn imbalanced_draws_are_balanced() {
        let labels: Vec<u8> = (0..1000).map(|i| u8::from(i % 10 == 0)).collect();
        let s = WeightedSampler::new(&labels).unwrap();
        let mut rng = RngStream::new(11);
        let n = 100_000;
        let minority = s.draw_n(&mut rng, n).iter().filter(|&&i| labels[i] == 1).count();
        let frac = minority as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "minority fraction {frac}");
    }

    #[test]
    fn deterministic_under_seed() {
        let labels = [0, 0, 0, 1, 1];
        let s = WeightedSampler::new(&labels).unwrap();
        let a = s.draw_n(&mut RngStream::new(5), 50);
        let b = s.draw_n(&mut RngStream::new(5), 50);
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_is_data_error() {
        assert!(matches!(WeightedSampler::new(&[1, 1, 1]), Err(Error::Data(_))));
        assert!(WeightedSampler::new(&[]).is_err());
    }
}
