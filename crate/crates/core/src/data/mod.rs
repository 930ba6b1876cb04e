//! Four-stream feature schema, preprocessing and dataset plumbing.
//!
//! A record carries three raw streams (attention, positional, situational).
//! The fourth (interaction) stream is derived: products of pairs of *scaled*
//! raw features, computed after robust scaling and never re-scaled.

mod io;
mod sampler;
mod scaler;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_records, write_records, DataFormat};
pub use sampler::WeightedSampler;
pub use scaler::{percentile, FeatureStats, RobustScaler, DEFAULT_IQR_FLOOR};
pub use synthetic::{bayes_accuracy, generate_synthetic, SyntheticData, SyntheticSpec};

/// One of the four behavioral streams, in canonical token order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StreamId {
    #[serde(rename = "a")]
    Attention,
    #[serde(rename = "p")]
    Positional,
    #[serde(rename = "s")]
    Situational,
    #[serde(rename = "i")]
    Interaction,
}

impl StreamId {
    pub const ALL: [StreamId; 4] = [
        StreamId::Attention,
        StreamId::Positional,
        StreamId::Situational,
        StreamId::Interaction,
    ];

    pub fn code(self) -> char {
        match self {
            StreamId::Attention => 'a',
            StreamId::Positional => 'p',
            StreamId::Situational => 's',
            StreamId::Interaction => 'i',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == c)
    }

    /// Short label used on attention heat-map axes.
    pub fn label(self) -> &'static str {
        match self {
            StreamId::Attention => "attn",
            StreamId::Positional => "pos",
            StreamId::Situational => "sit",
            StreamId::Interaction => "inter",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

impl FromStr for StreamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                Self::from_code(c).ok_or_else(|| Error::Config(format!("unknown stream `{s}`")))
            }
            _ => Err(Error::Config(format!("unknown stream `{s}`"))),
        }
    }
}

/// Reference to one scaled raw feature, e.g. `a3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureRef {
    pub stream: StreamId,
    pub index: usize,
}

impl fmt::Display for FeatureRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.stream, self.index)
    }
}

impl FromStr for FeatureRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("bad feature reference `{s}` (expected e.g. `a3`)"));
        let mut chars = s.chars();
        let stream = chars.next().and_then(StreamId::from_code).ok_or_else(bad)?;
        let index = chars.as_str().parse().map_err(|_| bad())?;
        Ok(FeatureRef { stream, index })
    }
}

/// One interaction feature: the product of two scaled raw features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct InteractionPair {
    pub left: FeatureRef,
    pub right: FeatureRef,
}

impl fmt::Display for InteractionPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}*{}", self.left, self.right)
    }
}

impl FromStr for InteractionPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (l, r) = s
            .split_once('*')
            .ok_or_else(|| Error::Config(format!("bad interaction pair `{s}` (expected `a0*p1`)")))?;
        Ok(Self {
            left: l.parse()?,
            right: r.parse()?,
        })
    }
}

impl TryFrom<String> for InteractionPair {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InteractionPair> for String {
    fn from(p: InteractionPair) -> String {
        p.to_string()
    }
}

/// Dimensions of the raw streams and the interaction-feature definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub d_a: usize,
    pub d_p: usize,
    /// Situational features excluding the text-embedding block.
    pub d_s: usize,
    /// Width of a precomputed text-embedding block appended to `x_s`.
    #[serde(default)]
    pub text_embedding_dim: usize,
    pub interaction_pairs: Vec<InteractionPair>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self::with_cross_product(8, 6, 10, StreamId::Attention, StreamId::Positional)
            .expect("default stream config is valid")
    }
}

impl StreamConfig {
    /// All products `left_k · right_l` between two raw streams.
    pub fn with_cross_product(
        d_a: usize,
        d_p: usize,
        d_s: usize,
        left: StreamId,
        right: StreamId,
    ) -> Result<Self> {
        let mut cfg = Self {
            d_a,
            d_p,
            d_s,
            text_embedding_dim: 0,
            interaction_pairs: Vec::new(),
        };
        cfg.interaction_pairs = cross_pairs(&cfg, left, right)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn d_i(&self) -> usize {
        self.interaction_pairs.len()
    }

    /// Full situational width including the text-embedding block.
    pub fn width_s(&self) -> usize {
        self.d_s + self.text_embedding_dim
    }

    /// Input width of a stream's encoder.
    pub fn width(&self, stream: StreamId) -> usize {
        match stream {
            StreamId::Attention => self.d_a,
            StreamId::Positional => self.d_p,
            StreamId::Situational => self.width_s(),
            StreamId::Interaction => self.d_i(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_a == 0 || self.d_p == 0 || self.width_s() == 0 {
            return Err(Error::Config("stream dimensions must be positive".into()));
        }
        if self.interaction_pairs.is_empty() {
            return Err(Error::Config("at least one interaction pair is required".into()));
        }
        for pair in &self.interaction_pairs {
            for f in [pair.left, pair.right] {
                if f.stream == StreamId::Interaction {
                    return Err(Error::Config(format!(
                        "interaction pair {pair} may only reference streams a, p, s"
                    )));
                }
                if f.index >= self.width(f.stream) {
                    return Err(Error::Config(format!(
                        "interaction pair {pair}: index {} out of range for stream {} (width {})",
                        f.index,
                        f.stream,
                        self.width(f.stream)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Every `(left_k, right_l)` product pair, row-major over `left`.
pub fn cross_pairs(cfg: &StreamConfig, left: StreamId, right: StreamId) -> Result<Vec<InteractionPair>> {
    if left == StreamId::Interaction || right == StreamId::Interaction {
        return Err(Error::Config("interaction products use streams a, p, s only".into()));
    }
    let mut out = Vec::new();
    for k in 0..cfg.width(left) {
        for l in 0..cfg.width(right) {
            out.push(InteractionPair {
                left: FeatureRef { stream: left, index: k },
                right: FeatureRef {
                    stream: right,
                    index: l,
                },
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split tag `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One pedestrian instance with its raw streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub video_id: String,
    pub track_id: String,
    pub split: Split,
    pub label: u8,
    pub x_a: Vec<f64>,
    pub x_p: Vec<f64>,
    pub x_s: Vec<f64>,
}

impl FeatureRecord {
    pub fn validate(&self, cfg: &StreamConfig) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Data(format!("record {}: label {} not in {{0,1}}", self.id, self.label)));
        }
        for (name, v, want) in [
            ("x_a", &self.x_a, cfg.d_a),
            ("x_p", &self.x_p, cfg.d_p),
            ("x_s", &self.x_s, cfg.width_s()),
        ] {
            if v.len() != want {
                return Err(Error::Data(format!(
                    "record {}: {name} has {} values, expected {want}",
                    self.id,
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("record {}: non-finite value in {name}", self.id)));
            }
        }
        Ok(())
    }

    pub fn stream(&self, stream: StreamId) -> &[f64] {
        match stream {
            StreamId::Attention => &self.x_a,
            StreamId::Positional => &self.x_p,
            StreamId::Situational => &self.x_s,
            StreamId::Interaction => &[],
        }
    }
}

/// Scaled streams plus the derived interaction stream for one record.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledStreams {
    pub a: Vec<f64>,
    pub p: Vec<f64>,
    pub s: Vec<f64>,
    pub i: Vec<f64>,
}

impl ScaledStreams {
    pub fn stream(&self, stream: StreamId) -> &[f64] {
        match stream {
            StreamId::Attention => &self.a,
            StreamId::Positional => &self.p,
            StreamId::Situational => &self.s,
            StreamId::Interaction => &self.i,
        }
    }

    pub fn stream_mut(&mut self, stream: StreamId) -> &mut Vec<f64> {
        match stream {
            StreamId::Attention => &mut self.a,
            StreamId::Positional => &mut self.p,
            StreamId::Situational => &mut self.s,
            StreamId::Interaction => &mut self.i,
        }
    }
}

/// `x_i[j] = left_j · right_j`, computed from already-scaled `a`, `p`, `s`.
pub fn build_interactions(a: &[f64], p: &[f64], s: &[f64], cfg: &StreamConfig) -> Result<Vec<f64>> {
    let value = |f: FeatureRef| -> Result<f64> {
        let src = match f.stream {
            StreamId::Attention => a,
            StreamId::Positional => p,
            StreamId::Situational => s,
            StreamId::Interaction => {
                return Err(Error::Config(format!("interaction feature {f} cannot be a factor")))
            }
        };
        src.get(f.index)
            .copied()
            .ok_or_else(|| Error::Config(format!("feature {f} out of range (width {})", src.len())))
    };
    cfg.interaction_pairs
        .iter()
        .map(|pair| Ok(value(pair.left)? * value(pair.right)?))
        .collect()
}

/// A batch of model inputs: one `[B × width]` matrix per stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub a: Tensor,
    pub p: Tensor,
    pub s: Tensor,
    pub i: Tensor,
}

impl StreamBatch {
    pub fn from_rows(rows: &[&ScaledStreams]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let stack = |f: &dyn Fn(&ScaledStreams) -> &Vec<f64>| -> Result<Tensor> {
            let width = f(rows[0]).len();
            let mut data = Vec::with_capacity(rows.len() * width);
            for r in rows {
                let v = f(r);
                if v.len() != width {
                    return Err(Error::Data("inconsistent stream widths in batch".into()));
                }
                data.extend_from_slice(v);
            }
            Tensor::new(vec![rows.len(), width], data)
        };
        Ok(Self {
            a: stack(&|r| &r.a)?,
            p: stack(&|r| &r.p)?,
            s: stack(&|r| &r.s)?,
            i: stack(&|r| &r.i)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn stream(&self, stream: StreamId) -> &Tensor {
        match stream {
            StreamId::Attention => &self.a,
            StreamId::Positional => &self.p,
            StreamId::Situational => &self.s,
            StreamId::Interaction => &self.i,
        }
    }

    pub fn stream_mut(&mut self, stream: StreamId) -> &mut Tensor {
        match stream {
            StreamId::Attention => &mut self.a,
            StreamId::Positional => &mut self.p,
            StreamId::Situational => &mut self.s,
            StreamId::Interaction => &mut self.i,
        }
    }
}

/// A split after scaling: inputs, labels and ids in record order.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub inputs: Vec<ScaledStreams>,
}

impl PreparedSplit {
    pub fn prepare<'a>(
        records: impl IntoIterator<Item = &'a FeatureRecord>,
        scaler: &RobustScaler,
        cfg: &StreamConfig,
    ) -> Result<Self> {
        let mut out = Self {
            ids: Vec::new(),
            labels: Vec::new(),
            inputs: Vec::new(),
        };
        for r in records {
            out.ids.push(r.id.clone());
            out.labels.push(r.label);
            out.inputs.push(scaler.transform_with_interactions(r, cfg)?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<StreamBatch> {
        let rows: Vec<&ScaledStreams> = indices.iter().map(|&i| &self.inputs[i]).collect();
        StreamBatch::from_rows(&rows)
    }

    /// Consecutive index chunks covering the whole split.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let n = self.len();
        (0..n).step_by(size.max(1)).map(move |start| (start..(start + size).min(n)).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
        }
    }
}

/// Records of one split, in file order.
pub fn split_records(records: &[FeatureRecord], split: Split) -> Vec<&FeatureRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_parsing() {
        let p: InteractionPair = "a3*p1".parse().unwrap();
        assert_eq!(p.left, FeatureRef { stream: StreamId::Attention, index: 3 });
        assert_eq!(p.to_string(), "a3*p1");
        assert!("a3p1".parse::<InteractionPair>().is_err());
        assert!("x1*p0".parse::<InteractionPair>().is_err());
    }

    #[test]
    fn default_config_dims() {
        let cfg = StreamConfig::default();
        assert_eq!((cfg.d_a, cfg.d_p, cfg.d_s, cfg.d_i()), (8, 6, 10, 48));
    }

    #[test]
    fn validate_rejects_bad_pairs() {
        let mut cfg = StreamConfig::default();
        cfg.interaction_pairs.push("a8*p0".parse().unwrap());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = StreamConfig::default();
        cfg.interaction_pairs.push("i0*p0".parse().unwrap());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn interaction_examples() {
        let cfg = StreamConfig {
            d_a: 1,
            d_p: 1,
            d_s: 1,
            text_embedding_dim: 0,
            interaction_pairs: vec!["a0*p0".parse().unwrap(), "s0*a0".parse().unwrap()],
        };
        assert_eq!(build_interactions(&[2.0], &[3.0], &[0.0], &cfg).unwrap(), vec![6.0, 0.0]);
    }

    #[test]
    fn interaction_invalid_index_is_config_error() {
        let cfg = StreamConfig {
            d_a: 1,
            d_p: 1,
            d_s: 1,
            text_embedding_dim: 0,
            interaction_pairs: vec!["a5*p0".parse().unwrap()],
        };
        assert!(matches!(build_interactions(&[1.0], &[1.0], &[1.0], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn full_cross_product_matches_nested_loops() {
        let cfg = StreamConfig::with_cross_product(3, 2, 1, StreamId::Attention, StreamId::Positional).unwrap();
        assert_eq!(cfg.d_i(), 6);
        let a = [1.5, -2.0, 0.25];
        let p = [4.0, -3.0];
        let got = build_interactions(&a, &p, &[0.0], &cfg).unwrap();
        let mut oracle = Vec::new();
        for x in a {
            for y in p {
                oracle.push(x * y);
            }
        }
        assert_eq!(got, oracle);
    }

    #[test]
    fn split_parse() {
        assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
        assert!("dev".parse::<Split>().is_err());
    }
}
