use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Linear, Lstm, LstmState};
use super::params::{ParamBuilder, ParamStore};
use super::train::{clip_global_norm, collect_grads, Optimizer, OptimizerKind};
use super::{ModelError, Result};
use crate::subword::SOS_EOS_ID;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub units: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            embed_dim: 16,
            units: 32,
            init_scale: 0.1,
            seed: 3,
        }
    }
}

/// Recurrent unit-level language model over the ASR vocabulary.
#[derive(Debug, Clone)]
pub struct RnnLm {
    config: LmConfig,
    vocab_size: usize,
    pub params: ParamStore,
    embed: usize,
    lstm: Lstm,
    out: Linear,
}

impl RnnLm {
    pub fn new(config: LmConfig, vocab_size: usize) -> Result<Self> {
        if config.embed_dim == 0 || config.units == 0 || vocab_size <= SOS_EOS_ID {
            return Err(ModelError::Config("language model dimensions must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut params, config.seed, config.init_scale);
        let embed = pb.uniform("lm.embed", vocab_size, config.embed_dim);
        let lstm = Lstm::new(&mut pb, "lm.lstm", config.embed_dim, config.units);
        let out = Linear::new(&mut pb, "lm.out", config.units, vocab_size, true);
        Ok(RnnLm {
            config,
            vocab_size,
            params,
            embed,
            lstm,
            out,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        self.lstm.zero_state(g)
    }

    /// Consumes one unit; the hidden state of the result is the LM feature.
    pub fn advance(&self, g: &mut Graph, p: &[Var], state: LstmState, unit: usize) -> Result<LstmState> {
        let emb = g.gather_rows(p[self.embed], &[unit])?;
        self.lstm.step_input(g, p, emb, state)
    }

    /// Next-unit log distribution from a state, `[1, V]`.
    pub fn distribution(&self, g: &mut Graph, p: &[Var], state: LstmState) -> Result<Var> {
        let logits = self.out.forward(g, p, state.h)?;
        Ok(g.log_softmax(logits))
    }

    /// Consumes `unit` (or `<sos>`) and returns the distribution of the next unit.
    pub fn lm_step(&self, g: &mut Graph, p: &[Var], state: LstmState, unit: usize) -> Result<(LstmState, Var)> {
        let next = self.advance(g, p, state, unit)?;
        let logp = self.distribution(g, p, next)?;
        Ok((next, logp))
    }

    /// Negative log-likelihood of `units` followed by `<eos>`.
    pub fn sequence_loss(&self, g: &mut Graph, p: &[Var], units: &[usize]) -> Result<Var> {
        let mut state = self.zero_state(g);
        let mut rows = Vec::with_capacity(units.len() + 1);
        let mut prev = SOS_EOS_ID;
        let mut targets = units.to_vec();
        targets.push(SOS_EOS_ID);
        for &t in &targets {
            let (s, lp) = self.lm_step(g, p, state, prev)?;
            rows.push(lp);
            state = s;
            prev = t;
        }
        let all = g.concat_rows(&rows)?;
        let v = self.vocab_size;
        let mut mask = vec![0.0; targets.len() * v];
        for (r, &t) in targets.iter().enumerate() {
            mask[r * v + t] = -1.0;
        }
        let mask = g.constant(Tensor::matrix(targets.len(), v, mask)?);
        let picked = g.mul(all, mask)?;
        Ok(g.sum(picked))
    }

    /// Σ log P(u_i | u_<i) over the units (no end token).
    pub fn log_prob(&self, units: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let mut state = self.zero_state(&mut g);
        let mut prev = SOS_EOS_ID;
        let mut total = 0.0;
        for &u in units {
            let (s, lp) = self.lm_step(&mut g, &p, state, prev)?;
            total += g.value(lp).data()[u];
            state = s;
            prev = u;
        }
        Ok(total)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = serde_json::json!({ "config": self.config, "vocab_size": self.vocab_size });
        std::fs::write(dir.join("lm.json"), format!("{meta:#}\n"))?;
        self.params.save(&dir.join("lm.ckpt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            config: LmConfig,
            vocab_size: usize,
        }
        let text = std::fs::read_to_string(dir.join("lm.json"))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut lm = RnnLm::new(meta.config, meta.vocab_size)?;
        lm.params.load_values(&dir.join("lm.ckpt"))?;
        Ok(lm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            clip_norm: 5.0,
            seed: 11,
        }
    }
}

/// Returns the mean per-sequence NLL of each epoch.
pub fn train_lm(lm: &mut RnnLm, sequences: &[Vec<usize>], cfg: &LmTrainConfig) -> Result<Vec<f64>> {
    if sequences.is_empty() {
        return Err(ModelError::Empty("language model corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &lm.params);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut g = Graph::new();
            let p = lm.params.bind(&mut g, true);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                losses.push(lm.sequence_loss(&mut g, &p, &sequences[i])?);
            }
            let all = g.concat_cols(&losses)?;
            let s = g.sum(all);
            let loss = g.scale(s, 1.0 / chunk.len() as f64);
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(ModelError::Diverged { epoch, batch: bi, loss: value });
            }
            total += value * chunk.len() as f64;
            g.backward(loss)?;
            let mut grads = collect_grads(&g, &p);
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut lm.params, &grads);
        }
        history.push(total / sequences.len() as f64);
    }
    Ok(history)
}
