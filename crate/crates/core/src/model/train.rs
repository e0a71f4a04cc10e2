use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{AsrModel, LossOptions, ModelError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order update rule with per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Optimizer {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (t, g) in params.tensors_mut().iter_mut().zip(grads) {
                    t.data_mut().iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for (i, (t, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (k, w) in t.data_mut().iter_mut().enumerate() {
                        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                        *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Gradients of bound parameters; unused parameters get zeros.
pub(crate) fn collect_grads(g: &Graph, params: &[Var]) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|&p| match g.grad(p) {
            Some(d) => d.to_vec(),
            None => vec![0.0; g.value(p).numel()],
        })
        .collect()
}

/// One training utterance: normalized features `[T, D]` and unit ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Tensor,
    pub units: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: LossOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.005,
            lr_decay: 0.5,
            decay_every: 0,
            clip_norm: 5.0,
            seed: 1,
            loss: LossOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_ctc: f64,
    pub loss_att: f64,
    pub loss_ld: f64,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub learning_rate: f64,
    pub ctc_skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

fn batch_loss(
    model: &AsrModel,
    examples: &[&Example],
    opts: &LossOptions,
    trainable: bool,
) -> Result<(Graph, Vec<Var>, super::LossParts)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, trainable);
    let feats: Vec<Var> = examples.iter().map(|e| g.constant(e.features.clone())).collect();
    let batch: Vec<(Var, &[usize])> = feats.iter().zip(examples).map(|(&f, e)| (f, e.units.as_slice())).collect();
    let parts = model.mtl_loss(&mut g, &b, &batch, opts)?;
    Ok((g, b.params, parts))
}

/// Mean loss over `examples` without updating anything.
pub fn evaluate(model: &AsrModel, examples: &[Example], opts: &LossOptions, batch_size: usize) -> Result<f64> {
    let refs: Vec<&Example> = examples.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size.max(1)) {
        let (g, _, parts) = batch_loss(model, chunk, opts, false)?;
        total += g.scalar_value(parts.total) * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Mini-batch training with global-norm clipping. The parameters with the
/// lowest dev loss (train loss when `dev` is empty) are restored at the end.
pub fn train(
    model: &mut AsrModel,
    train_set: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(ModelError::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ctc, mut att, mut ld, mut total, mut skipped) = (0.0, 0.0, 0.0, 0.0, 0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (mut g, params, parts) = batch_loss(model, &batch, &cfg.loss, true)?;
            let value = g.scalar_value(parts.total);
            if !value.is_finite() {
                return Err(ModelError::Diverged { epoch, batch: bi, loss: value });
            }
            let n = chunk.len() as f64;
            total += value * n;
            ctc += parts.ctc * n;
            att += parts.att * n;
            ld += parts.ld * n;
            skipped += parts.ctc_skipped;
            g.backward(parts.total)?;
            let mut grads = collect_grads(&g, &params);
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut model.params, &grads);
        }
        let n = train_set.len() as f64;
        let dev_loss = if dev.is_empty() {
            None
        } else {
            Some(evaluate(model, dev, &cfg.loss, cfg.batch_size)?)
        };
        let entry = EpochLog {
            epoch,
            loss_ctc: ctc / n,
            loss_att: att / n,
            loss_ld: ld / n,
            train_loss: total / n,
            dev_loss,
            learning_rate: opt.learning_rate,
            ctc_skipped: skipped,
        };
        on_epoch(&entry);
        let select = dev_loss.unwrap_or(entry.train_loss);
        if best.as_ref().is_none_or(|(_, b, _)| select < *b) {
            best = Some((epoch, select, model.params.clone()));
        }
        log.push(entry);
        if cfg.decay_every > 0 && epoch % cfg.decay_every == 0 {
            opt.learning_rate *= cfg.lr_decay;
        }
    }
    let (best_epoch, best_loss, params) = best.ok_or(ModelError::Config("zero epochs".into()))?;
    model.params = params;
    Ok(TrainOutcome { log, best_epoch, best_loss })
}
