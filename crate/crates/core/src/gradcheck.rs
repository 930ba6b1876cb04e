//! Finite-difference verification of the reverse pass.
//!
//! Two layers of checking:
//!
//! * every parameter of a tiny reference model (`d=8, L=1, h=2, d_z=4`)
//!   against central differences of the full composite loss, in training
//!   mode, with dropout masks and reparameterisation noise replayed from a
//!   fixed seed on every evaluation;
//! * every differentiable op in isolation on random inputs, so that a broken
//!   backward rule can be attributed to the op that owns it.

use serde::{Deserialize, Serialize};

use crate::data::{StreamBatch, StreamConfig, StreamId};
use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::model::{ForwardNoise, Model, ModelConfig, ParamStore};
use crate::objective::{total_loss, Lambdas};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that gradients that are
/// zero up to rounding do not blow the ratio up.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Tolerance for the full-model check.
    pub tol: f64,
    /// Tolerance for the per-op checks.
    pub op_tol: f64,
    pub batch: usize,
    pub seed: u64,
    /// `log τ` of the reference model; kept away from 0 so the `|τ − 1|`
    /// prior is differentiable.
    pub log_tau: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            op_tol: 1e-5,
            batch: 6,
            seed: 0,
            log_tau: 0.3,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamResult {
    pub name: String,
    pub size: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub params: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpResult {
    pub op: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tol: f64,
    pub op_tol: f64,
    pub loss: f64,
    pub max_rel_err: f64,
    pub params: Vec<ParamResult>,
    pub groups: Vec<GroupResult>,
    pub ops: Vec<OpResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failing_params(&self) -> Vec<&ParamResult> {
        self.params.iter().filter(|p| !(p.max_rel_err < self.tol)).collect()
    }

    pub fn failing_ops(&self) -> Vec<&OpResult> {
        self.ops.iter().filter(|o| !o.passed).collect()
    }

    /// Human-readable summary: one line per group, then any failures.
    pub fn render(&self) -> String {
        let mut lines = vec![format!(
            "gradcheck: loss {:.6}, step {:e}, tolerance {:e}",
            self.loss, self.step, self.tol
        )];
        let width = self.groups.iter().map(|g| g.group.len()).max().unwrap_or(0);
        for g in &self.groups {
            let mark = if g.max_rel_err < self.tol { "ok  " } else { "FAIL" };
            lines.push(format!(
                "  {mark} {:<width$}  max rel err {:.3e}  ({} tensors, worst {})",
                g.group, g.max_rel_err, g.params, g.worst_param
            ));
        }
        lines.push(format!("  overall max rel err {:.3e}", self.max_rel_err));
        let bad = self.failing_params();
        if !bad.is_empty() {
            lines.push("failing parameters:".into());
            for p in bad {
                lines.push(format!("  {}[{}]  rel err {:.3e}", p.name, p.worst_index, p.max_rel_err));
            }
        }
        let ops = self.failing_ops();
        if !ops.is_empty() {
            lines.push("failing backward rules:".into());
            for o in ops {
                lines.push(format!("  {}  rel err {:.3e}", o.op, o.max_rel_err));
            }
        }
        lines.push(if self.passed { "PASS".into() } else { "FAIL".into() });
        lines.join("\n")
    }
}

fn group_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

fn random_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_raw(shape.to_vec(), (0..n).map(|_| rng.normal()).collect())
}

/// The tiny model, one input batch and soft targets used by the full check.
pub struct Reference {
    pub model: Model,
    pub batch: StreamBatch,
    pub targets: Vec<f64>,
    pub lambdas: Lambdas,
    noise_seed: u64,
}

impl Reference {
    pub fn build(cfg: &GradcheckConfig) -> Result<Self> {
        let streams = StreamConfig::with_cross_product(3, 2, 4, StreamId::Attention, StreamId::Positional)?;
        let mc = ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            d_z: 4,
            ..ModelConfig::default()
        };
        let root = RngStream::new(cfg.seed);
        let mut init = root.split(crate::rng::purpose::INIT);
        let mut model = Model::new(mc, streams.clone(), &mut init)?;
        model
            .params
            .get_mut("classifier.log_tau")
            .ok_or_else(|| Error::Contract("model has no temperature".into()))?
            .data_mut()[0] = cfg.log_tau;
        let mut data = root.split(crate::rng::purpose::SYNTHETIC);
        let b = cfg.batch.max(2);
        let batch = StreamBatch {
            a: random_tensor(&[b, streams.d_a], &mut data),
            p: random_tensor(&[b, streams.d_p], &mut data),
            s: random_tensor(&[b, streams.width_s()], &mut data),
            i: random_tensor(&[b, streams.d_i()], &mut data),
        };
        // Soft targets as produced by MixUp plus smoothing.
        let targets = (0..b).map(|_| data.uniform_range(0.05, 0.95)).collect();
        Ok(Self {
            model,
            batch,
            targets,
            lambdas: Lambdas {
                kl: 0.1,
                div: 0.05,
                tau: 0.1,
            },
            noise_seed: cfg.seed.wrapping_add(1),
        })
    }

    fn noise(&self) -> ForwardNoise {
        ForwardNoise::new(&RngStream::new(self.noise_seed))
    }

    /// Loss for an arbitrary parameter set, with the noise streams replayed.
    pub fn loss_at(&self, params: &ParamStore) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let out = self.model.forward(&mut g, &vars, &self.batch, true, &mut self.noise())?;
        let log_tau = self.model.log_tau_var(&vars)?;
        let (_, bd) = total_loss(&mut g, &out, log_tau, &self.targets, self.lambdas)?;
        Ok(bd.total)
    }

    /// Loss value and reverse-mode gradients for every parameter.
    pub fn gradients(&self, fault: Option<OpKind>) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        if let Some(k) = fault {
            g.inject_backward_fault(k);
        }
        let vars = self.model.bind(&mut g);
        let out = self.model.forward(&mut g, &vars, &self.batch, true, &mut self.noise())?;
        let log_tau = self.model.log_tau_var(&vars)?;
        let (loss, bd) = total_loss(&mut g, &out, log_tau, &self.targets, self.lambdas)?;
        g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(self.model.params.tensors())
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((bd.total, grads))
    }
}

/// Full-model check followed by the per-op checks. `fault` negates one
/// backward rule, which the report should then attribute to that op.
pub fn run(cfg: &GradcheckConfig, fault: Option<OpKind>) -> Result<GradcheckReport> {
    if !(cfg.step > 0.0) || !(cfg.tol > 0.0) || !(cfg.op_tol > 0.0) {
        return Err(Error::Config("gradcheck: step and tolerances must be positive".into()));
    }
    let r = Reference::build(cfg)?;
    let (loss, grads) = r.gradients(fault)?;
    let mut params = r.model.params.clone();
    let mut results = Vec::with_capacity(params.len());
    for (pi, name) in r.model.params.names().iter().enumerate() {
        let n = params.tensors()[pi].len();
        let (mut worst, mut worst_index) = (0.0f64, 0);
        for j in 0..n {
            let x0 = params.tensors()[pi].data()[j];
            params.tensors_mut()[pi].data_mut()[j] = x0 + cfg.step;
            let up = r.loss_at(&params)?;
            params.tensors_mut()[pi].data_mut()[j] = x0 - cfg.step;
            let down = r.loss_at(&params)?;
            params.tensors_mut()[pi].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * cfg.step);
            let err = relative_error(grads[pi].data()[j], numeric);
            if !(err <= worst) {
                worst = err;
                worst_index = j;
            }
        }
        results.push(ParamResult {
            name: name.clone(),
            size: n,
            max_rel_err: worst,
            worst_index,
        });
    }

    let mut groups: Vec<GroupResult> = Vec::new();
    for p in &results {
        let key = group_of(&p.name);
        match groups.iter_mut().find(|g| g.group == key) {
            Some(g) => {
                g.params += 1;
                if !(p.max_rel_err <= g.max_rel_err) {
                    g.max_rel_err = p.max_rel_err;
                    g.worst_param = p.name.clone();
                }
            }
            None => groups.push(GroupResult {
                group: key.to_string(),
                params: 1,
                max_rel_err: p.max_rel_err,
                worst_param: p.name.clone(),
            }),
        }
    }
    let max_rel_err = results.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    let ops = check_ops(cfg, fault)?;
    let passed = results.iter().all(|p| p.max_rel_err < cfg.tol) && ops.iter().all(|o| o.passed);
    Ok(GradcheckReport {
        step: cfg.step,
        tol: cfg.tol,
        op_tol: cfg.op_tol,
        loss,
        max_rel_err,
        params: results,
        groups,
        ops,
        passed,
    })
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct OpCase {
    op: OpKind,
    inputs: Vec<Tensor>,
    build: Build,
}

fn case(op: OpKind, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        op,
        inputs,
        build: Box::new(build),
    }
}

fn op_cases(rng: &mut RngStream) -> Vec<OpCase> {
    let mut r = |shape: &[usize]| random_tensor(shape, rng);
    let x34 = r(&[3, 4]);
    // Inputs bounded away from the kink of |x| and the pole of ln x.
    let away = x34.map(|v| if v >= 0.0 { v + 0.5 } else { v - 0.5 });
    let positive = x34.map(|v| v.abs() + 0.5);
    vec![
        case(OpKind::MatMul, vec![r(&[3, 4]), r(&[4, 2])], |g, v| g.matmul(v[0], v[1])),
        case(OpKind::AddBias, vec![r(&[3, 4]), r(&[4])], |g, v| g.add_bias(v[0], v[1])),
        case(OpKind::Add, vec![r(&[3, 4]), r(&[3, 4])], |g, v| g.add(v[0], v[1])),
        case(OpKind::Sub, vec![r(&[3, 4]), r(&[3, 4])], |g, v| g.sub(v[0], v[1])),
        case(OpKind::Mul, vec![r(&[3, 4]), r(&[3, 4])], |g, v| g.mul(v[0], v[1])),
        case(OpKind::Scale, vec![r(&[3, 4])], |g, v| Ok(g.scale(v[0], -1.7))),
        case(OpKind::AddScalar, vec![r(&[3, 4])], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        case(OpKind::Sigmoid, vec![r(&[3, 4])], |g, v| Ok(g.sigmoid(v[0]))),
        case(OpKind::Gelu, vec![r(&[3, 4])], |g, v| Ok(g.gelu(v[0]))),
        case(OpKind::Exp, vec![r(&[3, 4])], |g, v| Ok(g.exp(v[0]))),
        case(OpKind::Log, vec![positive], |g, v| g.log(v[0])),
        case(OpKind::Abs, vec![away], |g, v| Ok(g.abs(v[0]))),
        case(OpKind::Square, vec![r(&[3, 4])], |g, v| Ok(g.square(v[0]))),
        case(OpKind::LayerNorm, vec![r(&[3, 5]), r(&[5]), r(&[5])], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        case(OpKind::Softmax, vec![r(&[3, 4])], |g, v| Ok(g.softmax(v[0]))),
        case(OpKind::Dropout, vec![r(&[4, 5])], |g, v| {
            g.dropout(v[0], 0.3, true, &mut RngStream::new(17))
        }),
        case(OpKind::Sum, vec![r(&[3, 4])], |g, v| Ok(g.sum(v[0]))),
        case(OpKind::Mean, vec![r(&[3, 4])], |g, v| Ok(g.mean(v[0]))),
        case(OpKind::SumLastAxis, vec![r(&[3, 4])], |g, v| Ok(g.sum_last_axis(v[0]))),
        case(OpKind::Reshape, vec![r(&[3, 4])], |g, v| g.reshape(v[0], vec![2, 6])),
        case(OpKind::Interleave, vec![r(&[2, 3]), r(&[2, 3]), r(&[2, 3])], |g, v| g.interleave(v)),
        case(OpKind::SplitHeads, vec![r(&[6, 4])], |g, v| g.split_heads(v[0], 2, 3, 2)),
        case(OpKind::MergeHeads, vec![r(&[4, 3, 2])], |g, v| g.merge_heads(v[0], 2, 3, 2)),
        case(OpKind::Bmm, vec![r(&[2, 3, 4]), r(&[2, 4, 2])], |g, v| g.bmm(v[0], v[1], false)),
        case(OpKind::Bmm, vec![r(&[2, 3, 4]), r(&[2, 5, 4])], |g, v| g.bmm(v[0], v[1], true)),
        case(OpKind::BceWithLogits, vec![r(&[5])], |g, v| {
            g.bce_with_logits(v[0], &[0.0, 1.0, 0.3, 0.9, 0.5])
        }),
        case(OpKind::ColumnStd, vec![r(&[6, 3])], |g, v| g.column_std(v[0], 1e-8)),
    ]
}

fn check_case(c: &OpCase, step: f64, fault: Option<OpKind>, w: &mut RngStream) -> Result<f64> {
    let eval = |inputs: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = (c.build)(&mut g, &vars)?;
        Ok(g.value(y).clone())
    };
    let y0 = eval(&c.inputs)?;
    let weights = random_tensor(y0.shape(), w);
    let dot = |y: &Tensor| y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>();

    let mut g = Graph::new();
    if let Some(k) = fault {
        g.inject_backward_fault(k);
    }
    let vars: Vec<Var> = c.inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = (c.build)(&mut g, &vars)?;
    g.backward_with(y, weights.clone())?;

    let mut inputs = c.inputs.clone();
    let mut worst = 0.0f64;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(c.inputs[k].shape()));
        for j in 0..inputs[k].len() {
            let x0 = inputs[k].data()[j];
            inputs[k].data_mut()[j] = x0 + step;
            let up = dot(&eval(&inputs)?);
            inputs[k].data_mut()[j] = x0 - step;
            let down = dot(&eval(&inputs)?);
            inputs[k].data_mut()[j] = x0;
            let err = relative_error(analytic.data()[j], (up - down) / (2.0 * step));
            if !(err <= worst) {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Random-input check of every differentiable op's backward rule.
pub fn check_ops(cfg: &GradcheckConfig, fault: Option<OpKind>) -> Result<Vec<OpResult>> {
    let mut rng = RngStream::new(cfg.seed.wrapping_add(101));
    let cases = op_cases(&mut rng);
    let mut out: Vec<OpResult> = Vec::new();
    for c in &cases {
        let err = check_case(c, cfg.step, fault, &mut rng)?;
        let name = c.op.name();
        match out.iter_mut().find(|o| o.op == name) {
            Some(o) => {
                o.max_rel_err = o.max_rel_err.max(err);
                o.passed = o.max_rel_err < cfg.op_tol;
            }
            None => out.push(OpResult {
                op: name.to_string(),
                max_rel_err: err,
                passed: err < cfg.op_tol,
            }),
        }
    }
    Ok(out)
}
