//! Building blocks of the network, expressed over graph variables.
//!
//! Activations are `[rows × features]` matrices. Token sequences of a batch
//! are stored as `[B·T × d]` with the tokens of sample `b` in rows
//! `b·T .. b·T + T`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Highway encoder: `h = g ⊙ T(x) + (1 − g) ⊙ P(x)` with
/// `g = σ(x·W_g + b_g)` and `T(x) = LN(Dropout(GELU(x·W_1 + b_1))·W_2 + b_2)`.
/// `P` is an affine projection, or the identity when `proj` is `None`.
#[derive(Clone, Copy, Debug)]
pub struct HighwayVars {
    pub w_g: Var,
    pub b_g: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub proj: Option<(Var, Var)>,
}

pub fn highway_forward(
    g: &mut Graph,
    p: &HighwayVars,
    x: Var,
    dropout: f64,
    training: bool,
    rng: &mut RngStream,
) -> Result<Var> {
    let gate_pre = g.linear(x, p.w_g, p.b_g)?;
    let gate = g.sigmoid(gate_pre);
    let t = g.linear(x, p.w_1, p.b_1)?;
    let t = g.gelu(t);
    let t = g.dropout(t, dropout, training, rng)?;
    let t = g.linear(t, p.w_2, p.b_2)?;
    let t = g.layer_norm(t, p.ln_gain, p.ln_bias, LN_EPS)?;
    let base = match p.proj {
        Some((w, b)) => g.linear(x, w, b)?,
        None => x,
    };
    if g.shape(base) != g.shape(t) {
        return Err(Error::dim("highway", g.shape(base), g.shape(t)));
    }
    // g·T + (1 − g)·P  =  P + g·(T − P)
    let diff = g.sub(t, base)?;
    let gated = g.mul(gate, diff)?;
    g.add(base, gated)
}

/// Adds each stream's embedding to its encoder output and interleaves the
/// tokens: row `b·T + j` is `h_j[b] + e_j`.
pub fn embed_and_stack(g: &mut Graph, encoded: &[Var], embeddings: &[Var]) -> Result<Var> {
    if encoded.len() != embeddings.len() {
        return Err(Error::Contract(format!(
            "{} encoder outputs but {} embeddings",
            encoded.len(),
            embeddings.len()
        )));
    }
    let tokens = encoded
        .iter()
        .zip(embeddings)
        .map(|(&h, &e)| g.add_bias(h, e))
        .collect::<Result<Vec<_>>>()?;
    g.interleave(&tokens)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head self-attention over `x: [B·T × d]`. Returns the projected
/// output `[B·T × d]` and the softmax weights `[B·h × T × T]`.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &AttentionVars,
    x: Var,
    batch: usize,
    tokens: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let d = g.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("hidden dim {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let q = g.linear(x, p.wq, p.bq)?;
    let k = g.linear(x, p.wk, p.bk)?;
    let v = g.linear(x, p.wv, p.bv)?;
    let q = g.split_heads(q, batch, tokens, heads)?;
    let k = g.split_heads(k, batch, tokens, heads)?;
    let v = g.split_heads(v, batch, tokens, heads)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax(scores);
    let ctx = g.bmm(weights, v, false)?;
    let ctx = g.merge_heads(ctx, batch, tokens, heads)?;
    let out = g.linear(ctx, p.wo, p.bo)?;
    Ok((out, weights))
}

/// Mean over heads of `[B·h × T × T]` softmax weights, giving `[B × T × T]`.
pub fn head_average(weights: &Tensor, batch: usize, heads: usize) -> Tensor {
    let t = weights.shape()[1];
    let w = weights.data();
    let mut out = vec![0.0; batch * t * t];
    for b in 0..batch {
        for h in 0..heads {
            let src = &w[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
            for (o, s) in out[b * t * t..(b + 1) * t * t].iter_mut().zip(src) {
                *o += s;
            }
        }
    }
    for o in &mut out {
        *o /= heads as f64;
    }
    Tensor::from_raw(vec![batch, t, t], out)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub attn: AttentionVars,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

/// One pre-norm encoder layer:
/// `x + Dropout(MHA(LN(x)))`, then `x + Dropout(FFN(LN(x)))`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer(
    g: &mut Graph,
    p: &LayerVars,
    x: Var,
    batch: usize,
    tokens: usize,
    heads: usize,
    dropout: f64,
    training: bool,
    rng: &mut RngStream,
) -> Result<Var> {
    let n = g.layer_norm(x, p.ln1_gain, p.ln1_bias, LN_EPS)?;
    let (a, _) = multi_head_attention(g, &p.attn, n, batch, tokens, heads)?;
    let a = g.dropout(a, dropout, training, rng)?;
    let x = g.add(x, a)?;
    let n = g.layer_norm(x, p.ln2_gain, p.ln2_bias, LN_EPS)?;
    let f = g.linear(n, p.ffn_w1, p.ffn_b1)?;
    let f = g.gelu(f);
    let f = g.linear(f, p.ffn_w2, p.ffn_b2)?;
    let f = g.dropout(f, dropout, training, rng)?;
    g.add(x, f)
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualBlockVars {
    pub w: Var,
    pub b: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    /// Affine shortcut; `None` means identity (input and output widths match).
    pub shortcut: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct ClassifierVars {
    pub w_0: Var,
    pub b_0: Var,
    pub ln0_gain: Var,
    pub ln0_bias: Var,
    pub blocks: Vec<ResidualBlockVars>,
    pub head_w1: Var,
    pub head_b1: Var,
    pub head_w2: Var,
    pub head_b2: Var,
}

/// Residual classifier. Returns the pre-sigmoid logit `[B]` and the
/// penultimate feature `z_cls`.
pub fn classify(
    g: &mut Graph,
    p: &ClassifierVars,
    z: Var,
    dropout: f64,
    training: bool,
    rng: &mut RngStream,
) -> Result<(Var, Var)> {
    let x = g.linear(z, p.w_0, p.b_0)?;
    let x = g.layer_norm(x, p.ln0_gain, p.ln0_bias, LN_EPS)?;
    let x = g.gelu(x);
    let mut x = g.dropout(x, dropout, training, rng)?;
    for blk in &p.blocks {
        let y = g.linear(x, blk.w, blk.b)?;
        let y = g.layer_norm(y, blk.ln_gain, blk.ln_bias, LN_EPS)?;
        let y = g.gelu(y);
        let y = g.dropout(y, dropout, training, rng)?;
        let skip = match blk.shortcut {
            Some((w, b)) => g.linear(x, w, b)?,
            None => x,
        };
        x = g.add(y, skip)?;
    }
    let c = g.linear(x, p.head_w1, p.head_b1)?;
    let c = g.gelu(c);
    let z_cls = g.dropout(c, dropout, training, rng)?;
    let logit = g.linear(z_cls, p.head_w2, p.head_b2)?;
    let rows = g.shape(logit)[0];
    let logit = g.reshape(logit, vec![rows])?;
    Ok((logit, z_cls))
}

#[derive(Clone, Copy, Debug)]
pub struct AnomalyVars {
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_eta: Var,
    pub b_eta: Var,
}

/// Variational anomaly head. `η` is the log-variance. Returns
/// `(μ, η, z_anom, kl)` with `kl = −½ Σ (1 + η − μ² − e^η)` per sample.
pub fn anomaly_forward(
    g: &mut Graph,
    p: &AnomalyVars,
    z: Var,
    training: bool,
    rng: &mut RngStream,
) -> Result<(Var, Var, Var, Var)> {
    let mu = g.linear(z, p.w_mu, p.b_mu)?;
    let eta = g.linear(z, p.w_eta, p.b_eta)?;
    let z_anom = if training {
        let shape = g.shape(mu).to_vec();
        let n: usize = shape.iter().product();
        let eps = Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())?;
        let eps = g.constant(eps);
        let half = g.scale(eta, 0.5);
        let sd = g.exp(half);
        let noise = g.mul(sd, eps)?;
        g.add(mu, noise)?
    } else {
        mu
    };
    let kl = kl_divergence(g, mu, eta)?;
    Ok((mu, eta, z_anom, kl))
}

/// `−½ Σ_i (1 + η_i − μ_i² − e^{η_i})` over the last axis.
pub fn kl_divergence(g: &mut Graph, mu: Var, eta: Var) -> Result<Var> {
    let one_plus = g.add_scalar(eta, 1.0);
    let mu2 = g.square(mu);
    let e = g.exp(eta);
    let t = g.sub(one_plus, mu2)?;
    let t = g.sub(t, e)?;
    let s = g.sum_last_axis(t);
    Ok(g.scale(s, -0.5))
}
