//! Deterministic training loop: AdamW, warmup + cosine schedule, global-norm
//! clipping, class-balanced sampling and resumable state.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{PreparedSplit, StreamConfig, WeightedSampler};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph};
use crate::metrics::confusion;
use crate::model::{ForwardNoise, Model, ModelConfig, ParamStore};
use crate::objective::{mixup_batch, smooth_targets, total_loss, LossWeights};
use crate::rng::{purpose, RngState, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub final_lr_factor: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seeds: Vec<u64>,
    /// Evaluate test with the best-validation-F1 parameters instead of the
    /// final ones.
    pub keep_best: bool,
    /// Print a progress line every this many epochs (0 = quiet).
    pub report_every: usize,
    /// Seeds trained concurrently by `run_seeds`.
    pub jobs: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: 7,
            lr: 1e-3,
            final_lr_factor: 0.01,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1.0,
            clip_norm: 1.0,
            seeds: vec![0],
            keep_best: true,
            report_every: 0,
            jobs: 1,
            eval_batch: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.final_lr_factor) {
            return bad("final_lr_factor must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm must be positive");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size).max(1)
    }

    pub fn schedule(&self, n_train: usize) -> LrSchedule {
        let spe = self.steps_per_epoch(n_train);
        LrSchedule {
            peak: self.lr,
            final_factor: self.final_lr_factor,
            warmup_steps: self.warmup_epochs * spe,
            total_steps: self.epochs * spe,
        }
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to `peak·final_factor`
/// at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub final_factor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(1 + self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (PI * progress).cos());
        self.peak * (self.final_factor + (1.0 - self.final_factor) * cos)
    }
}

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let z: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { t: 0, m: z.clone(), v: z }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: AdamState,
}

/// Parameters exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !name.ends_with("log_tau")
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &ParamStore) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            state: AdamState::zeros_like(params),
        }
    }

    /// One update: `θ ← θ·(1 − lr·wd)` (skipped for the temperature), then
    /// `θ ← θ − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.state.m.len() != params.len() {
            return Err(Error::dim("adamw", &[params.len()], &[grads.len(), self.state.m.len()]));
        }
        for (name, g) in params.names().iter().zip(grads) {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let names: Vec<bool> = params.names().iter().map(|n| decays(n)).collect();
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
            let decay = if names[k] { 1.0 - lr * self.weight_decay } else { 1.0 };
            let m = self.state.m[k].data_mut();
            let v = self.state.v[k].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let mhat = *mj / c1;
                let vhat = *vj / c2;
                *pj *= decay;
                *pj -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One line of `history.csv`. Loss columns are epoch means over steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub kl: f64,
    pub div: f64,
    pub temp_prior: f64,
    pub total: f64,
    pub val_acc: f64,
    pub val_f1: f64,
}

pub const HISTORY_HEADER: &str = "epoch,step,lr,ce,kl,div,temp_prior,total,val_acc,val_f1";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.step, r.lr, r.ce, r.kl, r.div, r.temp_prior, r.total, r.val_acc, r.val_f1
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub val_f1: f64,
    pub params: Vec<Tensor>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub params: Vec<Tensor>,
    pub adam: AdamState,
    pub data_order: RngState,
    pub mixup: RngState,
    pub dropout: RngState,
    pub reparam: RngState,
    pub best: Option<Snapshot>,
    pub history: Vec<HistoryRow>,
}

/// Initializes a model from the INIT sub-stream of `seed`.
pub fn init_model(config: ModelConfig, streams: StreamConfig, seed: u64) -> Result<Model> {
    let mut rng = RngStream::new(seed).split(purpose::INIT);
    Model::new(config, streams, &mut rng)
}

/// Validation accuracy and F1 at `ℓ ≥ 0` (probability 0.5).
pub fn quick_eval(model: &Model, split: &PreparedSplit, chunk: usize) -> Result<(f64, f64)> {
    let out = model.predict_split(split, chunk)?;
    let probs: Vec<f64> = out.logits.iter().map(|&l| sigmoid(l)).collect();
    let c = confusion(0.5, &probs, &split.labels);
    Ok((c.accuracy(), c.f1()))
}

pub struct Trainer<'d> {
    model: Model,
    config: TrainConfig,
    weights: LossWeights,
    train: &'d PreparedSplit,
    val: &'d PreparedSplit,
    sampler: WeightedSampler,
    optimizer: AdamW,
    data_order: RngStream,
    mixup: RngStream,
    noise: ForwardNoise,
    epoch: usize,
    step: usize,
    best: Option<Snapshot>,
    history: Vec<HistoryRow>,
}

/// Result of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters when `keep_best` is set, otherwise final.
    pub model: Model,
    pub final_model: Model,
    pub best_epoch: Option<usize>,
    pub history: Vec<HistoryRow>,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: Model,
        config: TrainConfig,
        weights: LossWeights,
        train: &'d PreparedSplit,
        val: &'d PreparedSplit,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let root = RngStream::new(seed);
        let optimizer = AdamW::new(&config, &model.params);
        Ok(Self {
            sampler: WeightedSampler::new(&train.labels)?,
            optimizer,
            data_order: root.split(purpose::DATA_ORDER),
            mixup: root.split(purpose::MIXUP),
            noise: ForwardNoise::new(&root),
            model,
            config,
            weights,
            train,
            val,
            epoch: 0,
            step: 0,
            best: None,
            history: Vec::new(),
        })
    }

    /// Rebuilds a trainer from a saved state. `model` supplies the
    /// configuration and parameter names; its values are overwritten.
    pub fn resume(
        mut model: Model,
        config: TrainConfig,
        weights: LossWeights,
        train: &'d PreparedSplit,
        val: &'d PreparedSplit,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        load_values(&mut model.params, &state.params)?;
        if state.adam.m.len() != model.params.len() || state.adam.v.len() != model.params.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        let optimizer = AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            state: state.adam,
        };
        Ok(Self {
            sampler: WeightedSampler::new(&train.labels)?,
            optimizer,
            data_order: RngStream::from_state(state.data_order),
            mixup: RngStream::from_state(state.mixup),
            noise: ForwardNoise {
                dropout: RngStream::from_state(state.dropout),
                reparam: RngStream::from_state(state.reparam),
            },
            model,
            config,
            weights,
            train,
            val,
            epoch: state.epoch,
            step: state.step,
            best: state.best,
            history: state.history,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            epoch: self.epoch,
            step: self.step,
            params: self.model.params.tensors().to_vec(),
            adam: self.optimizer.state.clone(),
            data_order: self.data_order.state(),
            mixup: self.mixup.state(),
            dropout: self.noise.dropout.state(),
            reparam: self.noise.reparam.state(),
            best: self.best.clone(),
            history: self.history.clone(),
        }
    }

    fn train_step(&mut self, lambdas: crate::objective::Lambdas) -> Result<(crate::objective::LossBreakdown, f64)> {
        let idx = self.sampler.draw_n(&mut self.data_order, self.config.batch_size);
        let batch = self.train.batch(&idx)?;
        let y: Vec<f64> = idx.iter().map(|&i| f64::from(self.train.labels[i])).collect();
        let (batch, y) = if self.weights.mixup {
            let m = mixup_batch(&batch, &y, self.weights.mixup_alpha, self.weights.mixup_per_sample, &mut self.mixup)?;
            (m.batch, m.targets)
        } else {
            (batch, y)
        };
        let targets = smooth_targets(&y, self.weights.smoothing);

        let mut g = Graph::new();
        let vars = self.model.bind(&mut g);
        let out = self.model.forward(&mut g, &vars, &batch, true, &mut self.noise)?;
        let log_tau = self.model.log_tau_var(&vars)?;
        let (loss, bd) = total_loss(&mut g, &out, log_tau, &targets, lambdas)?;
        if !bd.total.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                step: self.step,
                detail: format!("loss is {}", bd.total),
            });
        }
        g.backward(loss)?;
        let mut grads: Vec<Tensor> = vars
            .iter()
            .zip(self.model.params.tensors())
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        for (name, gr) in self.model.params.names().iter().zip(&grads) {
            if !gr.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        clip_gradients(&mut grads, self.config.clip_norm);
        let lr = self.config.schedule(self.train.len()).at(self.step);
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok((bd, lr))
    }

    /// Runs one epoch plus the validation pass and records its history row.
    pub fn run_epoch(&mut self) -> Result<HistoryRow> {
        if self.is_finished() {
            return Err(Error::Contract("training already finished".into()));
        }
        let lambdas = self.weights.at(self.epoch, self.config.epochs);
        let spe = self.config.steps_per_epoch(self.train.len());
        let mut sums = [0.0; 5];
        let mut lr = 0.0;
        for _ in 0..spe {
            let (bd, step_lr) = self.train_step(lambdas)?;
            for (s, v) in sums.iter_mut().zip([bd.ce, bd.kl, bd.div, bd.temp_prior, bd.total]) {
                *s += v;
            }
            lr = step_lr;
        }
        let n = spe as f64;
        let (val_acc, val_f1) = quick_eval(&self.model, self.val, self.config.eval_batch)?;
        let row = HistoryRow {
            epoch: self.epoch,
            step: self.step,
            lr,
            ce: sums[0] / n,
            kl: sums[1] / n,
            div: sums[2] / n,
            temp_prior: sums[3] / n,
            total: sums[4] / n,
            val_acc,
            val_f1,
        };
        if self.best.as_ref().is_none_or(|b| val_f1 > b.val_f1) {
            self.best = Some(Snapshot {
                epoch: self.epoch,
                val_f1,
                params: self.model.params.tensors().to_vec(),
            });
        }
        self.history.push(row);
        self.epoch += 1;
        Ok(row)
    }

    /// Trains to the configured epoch count, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&HistoryRow)) -> Result<()> {
        while !self.is_finished() {
            let row = self.run_epoch()?;
            on_epoch(&row);
        }
        Ok(())
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        let final_model = self.model;
        let (model, best_epoch) = match (&self.best, self.config.keep_best) {
            (Some(b), true) => {
                let mut m = final_model.clone();
                load_values(&mut m.params, &b.params)?;
                (m, Some(b.epoch))
            }
            (b, _) => (final_model.clone(), b.as_ref().map(|b| b.epoch)),
        };
        Ok(TrainOutcome {
            model,
            final_model,
            best_epoch,
            history: self.history,
        })
    }
}

fn load_values(store: &mut ParamStore, values: &[Tensor]) -> Result<()> {
    if values.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter arrays, found {}",
            store.len(),
            values.len()
        )));
    }
    for ((name, dst), src) in store.names().to_vec().iter().zip(store.tensors_mut()).zip(values) {
        if dst.shape() != src.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, saved {:?}",
                dst.shape(),
                src.shape()
            )));
        }
        *dst = src.clone();
    }
    Ok(())
}

/// Trains a freshly initialized model for `seed`.
pub fn train(
    model: Model,
    train: &PreparedSplit,
    val: &PreparedSplit,
    config: &TrainConfig,
    weights: &LossWeights,
    seed: u64,
    on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, config.clone(), weights.clone(), train, val, seed)?;
    t.run(on_epoch)?;
    t.finish()
}
