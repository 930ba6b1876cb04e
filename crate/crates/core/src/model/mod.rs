//! The multi-stream network: highway encoders, stream embeddings, a
//! pre-norm transformer over the stream tokens, a global cross-stream
//! attention block, a residual classifier and a variational anomaly head.

pub mod layers;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{StreamBatch, StreamConfig, StreamId};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use layers::{
    anomaly_forward, classify, embed_and_stack, head_average, highway_forward, kl_divergence,
    multi_head_attention, transformer_layer, AnomalyVars, AttentionVars, ClassifierVars, HighwayVars, LayerVars,
    ResidualBlockVars, LN_EPS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width of every token.
    pub d: usize,
    /// Transformer layers.
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Anomaly latent width.
    pub d_z: usize,
    pub dropout_encoder: f64,
    pub dropout_transformer: f64,
    pub dropout_head: f64,
    /// Streams removed from the model (ablation).
    pub ablate: Vec<StreamId>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            d_z: 16,
            dropout_encoder: 0.1,
            dropout_transformer: 0.1,
            dropout_head: 0.1,
            ablate: Vec::new(),
        }
    }
}

impl ModelConfig {
    /// The larger configuration whose size sits in the 1–2M parameter range.
    pub fn reference() -> Self {
        Self {
            d: 128,
            heads: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 4 || self.d % 4 != 0 {
            return Err(Error::Config(format!("d must be a positive multiple of 4, got {}", self.d)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one transformer layer is required".into()));
        }
        if self.d_z == 0 {
            return Err(Error::Config("d_z must be at least 1".into()));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be at least 1".into()));
        }
        for (name, r) in [
            ("dropout_encoder", self.dropout_encoder),
            ("dropout_transformer", self.dropout_transformer),
            ("dropout_head", self.dropout_head),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {r}")));
            }
        }
        if self.tokens().len() < 2 {
            return Err(Error::Config("ablation must leave at least two streams".into()));
        }
        Ok(())
    }

    /// Streams that become tokens, in canonical order.
    pub fn tokens(&self) -> Vec<StreamId> {
        StreamId::ALL
            .into_iter()
            .filter(|s| !self.ablate.contains(s))
            .collect()
    }

    /// Input width of the classifier and anomaly head.
    pub fn fused_dim(&self) -> usize {
        self.tokens().len() * self.d
    }

    /// Residual block widths `(in, out)`: 3d→2d→d→d/2.
    pub fn block_dims(&self) -> [(usize, usize); 3] {
        let d = self.d;
        [(3 * d, 2 * d), (2 * d, d), (d, d / 2)]
    }
}

/// A configuration with stream `s` removed.
pub fn ablate_stream(config: &ModelConfig, stream: StreamId) -> Result<ModelConfig> {
    let mut out = config.clone();
    if !out.ablate.contains(&stream) {
        out.ablate.push(stream);
        out.ablate.sort();
    }
    out.validate()?;
    Ok(out)
}

/// Named parameter tensors in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Closed-form parameter count.
pub fn param_count(cfg: &ModelConfig, streams: &StreamConfig) -> usize {
    let d = cfg.d;
    let lin = |i: usize, o: usize| i * o + o;
    let mut n = 0;
    for s in cfg.tokens() {
        let w = streams.width(s);
        n += 2 * lin(w, d) + lin(d, d) + 2 * d;
        if w != d {
            n += lin(w, d);
        }
        n += d; // embedding
    }
    let attn = 4 * lin(d, d);
    let ffn = lin(d, cfg.ffn_mult * d) + lin(cfg.ffn_mult * d, d);
    n += cfg.layers * (attn + ffn + 4 * d);
    n += attn;
    let f = cfg.fused_dim();
    n += lin(f, 3 * d) + 2 * 3 * d;
    for (i, o) in cfg.block_dims() {
        n += lin(i, o) + 2 * o;
        if i != o {
            n += lin(i, o);
        }
    }
    n += lin(d / 2, d / 4) + lin(d / 4, 1) + 1;
    n += 2 * lin(f, cfg.d_z);
    n
}

/// Per-sample outputs of an evaluation-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// Head-averaged attention `[B × T × T]`.
    pub attention: Tensor,
    /// Fused vector `[B × T·d]`.
    pub z: Tensor,
    pub mu: Tensor,
    pub eta: Tensor,
    pub kl: Vec<f64>,
    /// Penultimate classifier feature `[B × d/4]`.
    pub z_cls: Tensor,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logit: Var,
    pub attention: Tensor,
    pub z: Var,
    pub mu: Var,
    pub eta: Var,
    pub z_anom: Var,
    pub kl: Var,
    pub z_cls: Var,
}

/// Random streams consumed by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNoise {
    pub dropout: RngStream,
    pub reparam: RngStream,
}

impl ForwardNoise {
    pub fn new(root: &RngStream) -> Self {
        use crate::rng::purpose;
        Self {
            dropout: root.split(purpose::DROPOUT),
            reparam: root.split(purpose::REPARAM),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub streams: StreamConfig,
    pub params: ParamStore,
}

fn stream_key(s: StreamId) -> char {
    s.code()
}

fn xavier(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)).collect();
    Tensor::from_raw(vec![fan_in, fan_out], data)
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut RngStream,
}

impl Init<'_> {
    fn linear(&mut self, w: String, b: String, i: usize, o: usize) -> Result<()> {
        let t = xavier(self.rng, i, o);
        self.store.insert(w, t)?;
        self.store.insert(b, Tensor::zeros(&[o]))
    }

    fn norm(&mut self, gain: String, bias: String, n: usize) -> Result<()> {
        self.store.insert(gain, Tensor::ones(&[n]))?;
        self.store.insert(bias, Tensor::zeros(&[n]))
    }
}

impl Model {
    /// Initializes parameters: Xavier-uniform weights, zero biases, unit
    /// layer-norm gains, small normal stream embeddings, `log τ = 0`.
    pub fn new(config: ModelConfig, streams: StreamConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        streams.validate()?;
        let d = config.d;
        let mut it = Init {
            store: ParamStore::new(),
            rng,
        };
        for s in config.tokens() {
            let k = stream_key(s);
            let w = streams.width(s);
            it.linear(format!("highway.{k}.W_g"), format!("highway.{k}.b_g"), w, d)?;
            it.linear(format!("highway.{k}.W_1"), format!("highway.{k}.b_1"), w, d)?;
            it.linear(format!("highway.{k}.W_2"), format!("highway.{k}.b_2"), d, d)?;
            it.norm(format!("highway.{k}.ln_gain"), format!("highway.{k}.ln_bias"), d)?;
            if w != d {
                it.linear(format!("highway.{k}.W_p"), format!("highway.{k}.b_p"), w, d)?;
            }
        }
        for s in config.tokens() {
            let e = (0..d).map(|_| 0.02 * it.rng.normal()).collect();
            it.store.insert(format!("embed.{}", stream_key(s)), Tensor::from_raw(vec![d], e))?;
        }
        let attn = |it: &mut Init, p: &str| -> Result<()> {
            for m in ["q", "k", "v", "o"] {
                it.linear(format!("{p}.W{m}"), format!("{p}.b{m}"), d, d)?;
            }
            Ok(())
        };
        let hidden = config.ffn_mult * d;
        for l in 0..config.layers {
            it.norm(format!("transformer.{l}.ln1_gain"), format!("transformer.{l}.ln1_bias"), d)?;
            attn(&mut it, &format!("transformer.{l}.attn"))?;
            it.norm(format!("transformer.{l}.ln2_gain"), format!("transformer.{l}.ln2_bias"), d)?;
            it.linear(format!("transformer.{l}.ffn.W_1"), format!("transformer.{l}.ffn.b_1"), d, hidden)?;
            it.linear(format!("transformer.{l}.ffn.W_2"), format!("transformer.{l}.ffn.b_2"), hidden, d)?;
        }
        attn(&mut it, "global_attn")?;
        it.linear("classifier.W_0".into(), "classifier.b_0".into(), config.fused_dim(), 3 * d)?;
        it.norm("classifier.ln0_gain".into(), "classifier.ln0_bias".into(), 3 * d)?;
        for (k, (i, o)) in config.block_dims().into_iter().enumerate() {
            let p = format!("classifier.block{}", k + 1);
            it.linear(format!("{p}.W"), format!("{p}.b"), i, o)?;
            it.norm(format!("{p}.ln_gain"), format!("{p}.ln_bias"), o)?;
            if i != o {
                it.linear(format!("{p}.P"), format!("{p}.b_P"), i, o)?;
            }
        }
        it.linear("classifier.head.W_1".into(), "classifier.head.b_1".into(), d / 2, d / 4)?;
        it.linear("classifier.head.W_2".into(), "classifier.head.b_2".into(), d / 4, 1)?;
        it.store.insert("classifier.log_tau", Tensor::zeros(&[1]))?;
        it.linear("anomaly.W_mu".into(), "anomaly.b_mu".into(), config.fused_dim(), config.d_z)?;
        it.linear("anomaly.W_eta".into(), "anomaly.b_eta".into(), config.fused_dim(), config.d_z)?;
        Ok(Self {
            config,
            streams,
            params: it.store,
        })
    }

    /// Rebuilds a model around existing parameters, checking every expected
    /// name and shape.
    pub fn from_params(config: ModelConfig, streams: StreamConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config, streams, &mut RngStream::new(0))?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, t) in template.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        // keep canonical order
        let mut ordered = ParamStore::new();
        for name in template.params.names() {
            ordered.insert(name.clone(), params.get(name).expect("checked").clone())?;
        }
        Ok(Self {
            config: template.config,
            streams: template.streams,
            params: ordered,
        })
    }

    pub fn tokens(&self) -> Vec<StreamId> {
        self.config.tokens()
    }

    /// Learned temperature `τ = exp(log τ)`.
    pub fn temperature(&self) -> f64 {
        self.params.get("classifier.log_tau").expect("log_tau").data()[0].exp()
    }

    /// Registers every parameter as a trainable graph leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.param(t.clone())).collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| vars[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    fn opt_pair(&self, vars: &[Var], w: &str, b: &str) -> Result<Option<(Var, Var)>> {
        match self.params.position(w) {
            Some(_) => Ok(Some((self.var(vars, w)?, self.var(vars, b)?))),
            None => Ok(None),
        }
    }

    pub fn highway_vars(&self, vars: &[Var], s: StreamId) -> Result<HighwayVars> {
        let k = stream_key(s);
        let v = |n: &str| self.var(vars, &format!("highway.{k}.{n}"));
        Ok(HighwayVars {
            w_g: v("W_g")?,
            b_g: v("b_g")?,
            w_1: v("W_1")?,
            b_1: v("b_1")?,
            w_2: v("W_2")?,
            b_2: v("b_2")?,
            ln_gain: v("ln_gain")?,
            ln_bias: v("ln_bias")?,
            proj: self.opt_pair(vars, &format!("highway.{k}.W_p"), &format!("highway.{k}.b_p"))?,
        })
    }

    fn attention_vars(&self, vars: &[Var], p: &str) -> Result<AttentionVars> {
        let v = |n: &str| self.var(vars, &format!("{p}.{n}"));
        Ok(AttentionVars {
            wq: v("Wq")?,
            bq: v("bq")?,
            wk: v("Wk")?,
            bk: v("bk")?,
            wv: v("Wv")?,
            bv: v("bv")?,
            wo: v("Wo")?,
            bo: v("bo")?,
        })
    }

    pub fn layer_vars(&self, vars: &[Var], l: usize) -> Result<LayerVars> {
        let v = |n: &str| self.var(vars, &format!("transformer.{l}.{n}"));
        Ok(LayerVars {
            ln1_gain: v("ln1_gain")?,
            ln1_bias: v("ln1_bias")?,
            attn: self.attention_vars(vars, &format!("transformer.{l}.attn"))?,
            ln2_gain: v("ln2_gain")?,
            ln2_bias: v("ln2_bias")?,
            ffn_w1: v("ffn.W_1")?,
            ffn_b1: v("ffn.b_1")?,
            ffn_w2: v("ffn.W_2")?,
            ffn_b2: v("ffn.b_2")?,
        })
    }

    pub fn global_attention_vars(&self, vars: &[Var]) -> Result<AttentionVars> {
        self.attention_vars(vars, "global_attn")
    }

    pub fn classifier_vars(&self, vars: &[Var]) -> Result<ClassifierVars> {
        let v = |n: &str| self.var(vars, &format!("classifier.{n}"));
        let blocks = (1..=3)
            .map(|k| {
                let p = format!("classifier.block{k}");
                Ok(ResidualBlockVars {
                    w: self.var(vars, &format!("{p}.W"))?,
                    b: self.var(vars, &format!("{p}.b"))?,
                    ln_gain: self.var(vars, &format!("{p}.ln_gain"))?,
                    ln_bias: self.var(vars, &format!("{p}.ln_bias"))?,
                    shortcut: self.opt_pair(vars, &format!("{p}.P"), &format!("{p}.b_P"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassifierVars {
            w_0: v("W_0")?,
            b_0: v("b_0")?,
            ln0_gain: v("ln0_gain")?,
            ln0_bias: v("ln0_bias")?,
            blocks,
            head_w1: v("head.W_1")?,
            head_b1: v("head.b_1")?,
            head_w2: v("head.W_2")?,
            head_b2: v("head.b_2")?,
        })
    }

    pub fn anomaly_vars(&self, vars: &[Var]) -> Result<AnomalyVars> {
        Ok(AnomalyVars {
            w_mu: self.var(vars, "anomaly.W_mu")?,
            b_mu: self.var(vars, "anomaly.b_mu")?,
            w_eta: self.var(vars, "anomaly.W_eta")?,
            b_eta: self.var(vars, "anomaly.b_eta")?,
        })
    }

    pub fn log_tau_var(&self, vars: &[Var]) -> Result<Var> {
        self.var(vars, "classifier.log_tau")
    }

    /// Full forward pass over `batch` with parameters bound as `vars`.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        batch: &StreamBatch,
        training: bool,
        noise: &mut ForwardNoise,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let b = batch.batch_size();
        let tokens = self.tokens();
        let t = tokens.len();
        let mut encoded = Vec::with_capacity(t);
        let mut embeds = Vec::with_capacity(t);
        for &s in &tokens {
            let x = batch.stream(s);
            let want = self.streams.width(s);
            if x.shape() != [b, want] {
                return Err(Error::dim("model input", x.shape(), &[b, want]));
            }
            let xv = g.constant(x.clone());
            let hv = self.highway_vars(vars, s)?;
            encoded.push(highway_forward(g, &hv, xv, cfg.dropout_encoder, training, &mut noise.dropout)?);
            embeds.push(self.var(vars, &format!("embed.{}", stream_key(s)))?);
        }
        let mut h = embed_and_stack(g, &encoded, &embeds)?;
        for l in 0..cfg.layers {
            let lv = self.layer_vars(vars, l)?;
            h = transformer_layer(
                g,
                &lv,
                h,
                b,
                t,
                cfg.heads,
                cfg.dropout_transformer,
                training,
                &mut noise.dropout,
            )?;
        }
        let gv = self.global_attention_vars(vars)?;
        let (zmat, weights) = multi_head_attention(g, &gv, h, b, t, cfg.heads)?;
        let attention = head_average(g.value(weights), b, cfg.heads);
        let z = g.reshape(zmat, vec![b, t * cfg.d])?;
        let cv = self.classifier_vars(vars)?;
        let (logit, z_cls) = classify(g, &cv, z, cfg.dropout_head, training, &mut noise.dropout)?;
        let av = self.anomaly_vars(vars)?;
        let (mu, eta, z_anom, kl) = anomaly_forward(g, &av, z, training, &mut noise.reparam)?;
        Ok(ForwardVars {
            logit,
            attention,
            z,
            mu,
            eta,
            z_anom,
            kl,
            z_cls,
        })
    }

    /// Evaluation-mode forward pass (no dropout, `z_anom = μ`).
    pub fn predict(&self, batch: &StreamBatch) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let mut noise = ForwardNoise::new(&RngStream::new(0));
        let fv = self.forward(&mut g, &vars, batch, false, &mut noise)?;
        Ok(ForwardOutput {
            logits: g.value(fv.logit).data().to_vec(),
            attention: fv.attention,
            z: g.value(fv.z).clone(),
            mu: g.value(fv.mu).clone(),
            eta: g.value(fv.eta).clone(),
            kl: g.value(fv.kl).data().to_vec(),
            z_cls: g.value(fv.z_cls).clone(),
        })
    }

    /// Evaluation forward over a whole split, in chunks.
    pub fn predict_split(&self, split: &crate::data::PreparedSplit, chunk: usize) -> Result<ForwardOutput> {
        let mut parts = Vec::new();
        for idx in split.chunks(chunk) {
            parts.push(self.predict(&split.batch(&idx)?)?);
        }
        concat_outputs(parts)
    }
}

fn concat_rows(ts: Vec<&Tensor>) -> Result<Tensor> {
    let first = ts.first().ok_or_else(|| Error::Data("no rows to concatenate".into()))?;
    let mut shape = first.shape().to_vec();
    shape[0] = ts.iter().map(|t| t.shape()[0]).sum();
    let data = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

fn concat_outputs(parts: Vec<ForwardOutput>) -> Result<ForwardOutput> {
    if parts.is_empty() {
        return Err(Error::Data("empty split".into()));
    }
    Ok(ForwardOutput {
        logits: parts.iter().flat_map(|p| p.logits.iter().copied()).collect(),
        attention: concat_rows(parts.iter().map(|p| &p.attention).collect())?,
        z: concat_rows(parts.iter().map(|p| &p.z).collect())?,
        mu: concat_rows(parts.iter().map(|p| &p.mu).collect())?,
        eta: concat_rows(parts.iter().map(|p| &p.eta).collect())?,
        kl: parts.iter().flat_map(|p| p.kl.iter().copied()).collect(),
        z_cls: concat_rows(parts.iter().map(|p| &p.z_cls).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ScaledStreams;

    fn tiny_streams() -> StreamConfig {
        StreamConfig::with_cross_product(3, 2, 4, StreamId::Attention, StreamId::Positional).unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            d_z: 4,
            ..Default::default()
        }
    }

    fn batch(streams: &StreamConfig, n: usize, seed: u64) -> StreamBatch {
        let mut rng = RngStream::new(seed);
        let rows: Vec<ScaledStreams> = (0..n)
            .map(|_| {
                let mut v = |w: usize| (0..w).map(|_| rng.normal()).collect::<Vec<_>>();
                ScaledStreams {
                    a: v(streams.d_a),
                    p: v(streams.d_p),
                    s: v(streams.width_s()),
                    i: v(streams.d_i()),
                }
            })
            .collect();
        StreamBatch::from_rows(&rows.iter().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn param_count_formula_matches_enumeration() {
        let cases = [
            (tiny(), tiny_streams()),
            (ModelConfig::default(), StreamConfig::default()),
            (
                ablate_stream(&ModelConfig::default(), StreamId::Interaction).unwrap(),
                StreamConfig::default(),
            ),
        ];
        for (cfg, s) in cases {
            let m = Model::new(cfg.clone(), s.clone(), &mut RngStream::new(1)).unwrap();
            assert_eq!(m.params.scalar_count(), param_count(&cfg, &s));
        }
    }

    #[test]
    fn reference_preset_in_budget() {
        let s = StreamConfig {
            text_embedding_dim: 32,
            ..StreamConfig::default()
        };
        let n = param_count(&ModelConfig::reference(), &s);
        assert!((1_000_000..=2_000_000).contains(&n), "{n}");
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { heads: 3, ..tiny() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig { layers: 0, ..tiny() };
        assert!(bad.validate().is_err());
        let two = ModelConfig {
            ablate: vec![StreamId::Attention, StreamId::Positional],
            ..tiny()
        };
        assert!(two.validate().is_ok());
        assert!(ablate_stream(&two, StreamId::Situational).is_err());
    }

    #[test]
    fn attention_rows_are_distributions_and_kl_nonnegative() {
        let s = tiny_streams();
        let m = Model::new(tiny(), s.clone(), &mut RngStream::new(2)).unwrap();
        let out = m.predict(&batch(&s, 5, 3)).unwrap();
        assert_eq!(out.attention.shape(), &[5, 4, 4]);
        for row in out.attention.data().chunks(4) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(out.kl.iter().all(|&k| k >= 0.0));
        assert_eq!(out.z.shape(), &[5, 32]);
        assert_eq!(out.z_cls.shape(), &[5, 2]);
    }

    #[test]
    fn zero_final_layer_gives_half() {
        let s = tiny_streams();
        let mut m = Model::new(tiny(), s.clone(), &mut RngStream::new(2)).unwrap();
        m.params.get_mut("classifier.head.W_2").unwrap().data_mut().fill(0.0);
        let out = m.predict(&batch(&s, 3, 4)).unwrap();
        for l in out.logits {
            assert_eq!(crate::graph::sigmoid(l / m.temperature()), 0.5);
        }
    }

    #[test]
    fn eval_is_deterministic_and_batch_invariant() {
        let s = tiny_streams();
        let m = Model::new(tiny(), s.clone(), &mut RngStream::new(5)).unwrap();
        let b8 = batch(&s, 8, 6);
        let out = m.predict(&b8).unwrap();
        let again = m.predict(&b8).unwrap();
        assert_eq!(out.logits, again.logits);
        for i in 0..8 {
            let one = StreamBatch {
                a: Tensor::new(vec![1, s.d_a], b8.a.row(i).to_vec()).unwrap(),
                p: Tensor::new(vec![1, s.d_p], b8.p.row(i).to_vec()).unwrap(),
                s: Tensor::new(vec![1, s.width_s()], b8.s.row(i).to_vec()).unwrap(),
                i: Tensor::new(vec![1, s.d_i()], b8.i.row(i).to_vec()).unwrap(),
            };
            let o1 = m.predict(&one).unwrap();
            assert!((o1.logits[0] - out.logits[i]).abs() < 1e-10);
            assert!((o1.kl[0] - out.kl[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn ablated_model_shapes() {
        let s = tiny_streams();
        let cfg = ablate_stream(&tiny(), StreamId::Interaction).unwrap();
        let m = Model::new(cfg, s.clone(), &mut RngStream::new(7)).unwrap();
        let out = m.predict(&batch(&s, 2, 8)).unwrap();
        assert_eq!(out.attention.shape(), &[2, 3, 3]);
        assert_eq!(out.z.shape(), &[2, 24]);
        assert!(m.params.names().iter().all(|n| !n.starts_with("highway.i.")));
    }

    #[test]
    fn all_zero_classifier_outputs_bias() {
        let s = tiny_streams();
        let mut m = Model::new(tiny(), s.clone(), &mut RngStream::new(9)).unwrap();
        let names: Vec<String> = m.params.names().iter().filter(|n| n.starts_with("classifier.")).cloned().collect();
        for n in names {
            if n.ends_with("gain") || n == "classifier.log_tau" {
                continue;
            }
            m.params.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        m.params.get_mut("classifier.head.b_2").unwrap().data_mut()[0] = 0.37;
        let out = m.predict(&batch(&s, 3, 1)).unwrap();
        assert!(out.logits.iter().all(|&l| l == 0.37));
        // shortcut present exactly when widths differ
        for k in 1..=3 {
            let (i, o) = m.config.block_dims()[k - 1];
            assert_eq!(m.params.get(&format!("classifier.block{k}.P")).is_some(), i != o);
        }
    }
}
