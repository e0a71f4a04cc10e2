//! Joint CTC/attention network, output heads, recurrent LM and training.

mod layers;
mod lm;
mod params;
mod train;

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Lang;
use crate::ctc::{ctc_loss_node, CtcError};
use crate::subword::{MixedVocab, BLANK_ID, SOS_EOS_ID};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub use layers::{Linear, Lstm, LstmState};
pub use lm::{train_lm, LmConfig, LmTrainConfig, RnnLm};
pub use params::{ParamBuilder, ParamStore};
pub use train::{
    clip_global_norm, evaluate, train, EpochLog, Example, Optimizer, OptimizerKind, TrainConfig, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("{what}: {left} vs {right}")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    Flat,
    Hierarchical,
    ColdFusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub enc_layers: usize,
    pub enc_units: usize,
    /// Frame-dropping factor after each encoder layer.
    pub subsample: Vec<usize>,
    pub embed_dim: usize,
    pub dec_units: usize,
    pub att_dim: usize,
    pub att_channels: usize,
    /// Odd width of the convolution over previous attention weights.
    pub att_width: usize,
    pub head: HeadMode,
    pub cf_lm_dim: usize,
    pub cf_hidden: usize,
    pub cf_depth: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 40,
            enc_layers: 2,
            enc_units: 32,
            subsample: vec![2, 2],
            embed_dim: 16,
            dec_units: 32,
            att_dim: 32,
            att_channels: 4,
            att_width: 5,
            head: HeadMode::Flat,
            cf_lm_dim: 16,
            cf_hidden: 32,
            cf_depth: 1,
            init_scale: 0.1,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.input_dim == 0 || self.enc_units == 0 || self.dec_units == 0 || self.att_dim == 0 || self.embed_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.enc_layers == 0 {
            return bad("encoder needs at least one layer");
        }
        if self.subsample.len() != self.enc_layers {
            return bad("subsample schedule needs one factor per encoder layer");
        }
        if self.subsample.contains(&0) {
            return bad("subsample factors must be positive");
        }
        if self.att_width % 2 == 0 || self.att_channels == 0 {
            return bad("attention convolution width must be odd and channels positive");
        }
        if self.head == HeadMode::ColdFusion && (self.cf_lm_dim == 0 || self.cf_hidden == 0 || self.cf_depth == 0) {
            return bad("cold-fusion dimensions must be positive");
        }
        if !(self.init_scale > 0.0) {
            return bad("init scale must be positive");
        }
        Ok(())
    }

    pub fn total_subsampling(&self) -> usize {
        self.subsample.iter().product()
    }

    /// Encoder output length for `frames` input frames.
    pub fn output_length(&self, frames: usize) -> usize {
        self.subsample.iter().fold(frames, |t, &k| t.div_ceil(k))
    }
}

#[derive(Debug, Clone)]
struct EncLayer {
    fwd: Lstm,
    bwd: Lstm,
    proj: Linear,
    factor: usize,
}

#[derive(Debug, Clone)]
struct Attention {
    enc: Linear,
    dec: Linear,
    conv: usize,
    loc: Linear,
    v: Linear,
    width: usize,
}

#[derive(Debug, Clone)]
struct ColdHead {
    lm_feat: Vec<Linear>,
    ed: Linear,
    gate: Linear,
    fused: Vec<Linear>,
    out: Linear,
}

#[derive(Debug, Clone)]
enum Head {
    Flat(Linear),
    Hier { class: Linear, token: Linear },
    Cold(ColdHead),
}

/// Encoder output with the attention key projection cached.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub h: Var,
    pub keys: Var,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub dec: LstmState,
    /// Attention weights of the previous step, `[1, len]`.
    pub att: Var,
    pub lm: Option<LstmState>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub state: DecoderState,
    /// Log distribution over the vocabulary, `[1, V]`.
    pub logp: Var,
    /// Attention weights of this step.
    pub att: Var,
    pub context: Var,
    /// Unnormalized class scores (hierarchical head).
    pub class_logits: Option<Var>,
    /// Cold-fusion gate activations.
    pub gate: Option<Var>,
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    pub params: Vec<Var>,
    pub lm: Option<Vec<Var>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    pub lambda: f64,
    pub with_lid: bool,
    pub label_smoothing: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            lambda: 0.5,
            with_lid: false,
            label_smoothing: 0.1,
        }
    }
}

/// Batch loss node with the batch-mean component values.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ctc: f64,
    pub att: f64,
    pub ld: f64,
    pub ctc_skipped: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    vocab_size: usize,
    blocks: Vec<(usize, usize)>,
    lm: Option<LmConfig>,
}

#[derive(Debug, Clone)]
pub struct AsrModel {
    config: ModelConfig,
    vocab_size: usize,
    blocks: Vec<Range<usize>>,
    unit_block: Vec<usize>,
    pub params: ParamStore,
    encoder: Vec<EncLayer>,
    ctc_out: Linear,
    embed: usize,
    dec_lstm: Lstm,
    attention: Attention,
    head: Head,
    lm: Option<RnnLm>,
}

/// Contiguous class blocks in id order; every unit belongs to exactly one.
pub fn class_blocks(vocab: &MixedVocab) -> Result<Vec<Range<usize>>> {
    let mut blocks: Vec<(Lang, Range<usize>)> = Vec::new();
    for (i, &c) in vocab.classes().iter().enumerate() {
        match blocks.last_mut() {
            Some((lang, r)) if *lang == c => r.end = i + 1,
            _ => {
                if blocks.iter().any(|(l, _)| *l == c) {
                    return Err(ModelError::Config(format!("class {c:?} is not contiguous in the vocabulary")));
                }
                blocks.push((c, i..i + 1));
            }
        }
    }
    Ok(blocks.into_iter().map(|(_, r)| r).collect())
}

impl AsrModel {
    /// Fresh model. Cold fusion requires a pre-trained LM over the same vocabulary.
    pub fn new(config: ModelConfig, vocab: &MixedVocab, lm: Option<RnnLm>) -> Result<Self> {
        let blocks = class_blocks(vocab)?;
        Self::with_blocks(config, vocab.len(), blocks, lm)
    }

    pub fn with_blocks(config: ModelConfig, vocab_size: usize, blocks: Vec<Range<usize>>, lm: Option<RnnLm>) -> Result<Self> {
        config.validate()?;
        if vocab_size <= SOS_EOS_ID {
            return Err(ModelError::Config("vocabulary lacks the special units".into()));
        }
        let covered: usize = blocks.iter().map(|r| r.len()).sum();
        if covered != vocab_size || blocks.first().map(|r| r.start) != Some(0) || blocks.windows(2).any(|w| w[0].end != w[1].start) {
            return Err(ModelError::Config("class blocks must tile the vocabulary".into()));
        }
        let lm = match (config.head, lm) {
            (HeadMode::ColdFusion, Some(lm)) => {
                if lm.vocab_size() != vocab_size {
                    return Err(ModelError::Config(format!(
                        "LM vocabulary size {} differs from {}",
                        lm.vocab_size(),
                        vocab_size
                    )));
                }
                Some(lm)
            }
            (HeadMode::ColdFusion, None) => return Err(ModelError::Config("cold fusion needs a language model".into())),
            (_, _) => None,
        };
        let mut unit_block = vec![0; vocab_size];
        for (b, r) in blocks.iter().enumerate() {
            for u in r.clone() {
                unit_block[u] = b;
            }
        }

        let c = &config;
        let mut params = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut params, c.seed, c.init_scale);
        let mut encoder = Vec::new();
        let mut input = c.input_dim;
        for (l, &factor) in c.subsample.iter().enumerate() {
            let fwd = Lstm::new(&mut pb, &format!("enc.{l}.fwd"), input, c.enc_units);
            let bwd = Lstm::new(&mut pb, &format!("enc.{l}.bwd"), input, c.enc_units);
            let proj = Linear::new(&mut pb, &format!("enc.{l}.proj"), 2 * c.enc_units, c.enc_units, true);
            encoder.push(EncLayer { fwd, bwd, proj, factor });
            input = c.enc_units;
        }
        let ctc_out = Linear::new(&mut pb, "ctc.out", c.enc_units, vocab_size, true);
        let embed = pb.uniform("dec.embed", vocab_size, c.embed_dim);
        let dec_lstm = Lstm::new(&mut pb, "dec.lstm", c.embed_dim + c.enc_units, c.dec_units);
        let attention = Attention {
            enc: Linear::new(&mut pb, "att.enc", c.enc_units, c.att_dim, false),
            dec: Linear::new(&mut pb, "att.dec", c.dec_units, c.att_dim, true),
            conv: pb.uniform("att.conv", c.att_width, c.att_channels),
            loc: Linear::new(&mut pb, "att.loc", c.att_channels, c.att_dim, false),
            v: Linear::new(&mut pb, "att.v", c.att_dim, 1, false),
            width: c.att_width,
        };
        let state_dim = c.dec_units + c.enc_units;
        let head = match c.head {
            HeadMode::Flat => Head::Flat(Linear::new(&mut pb, "out", state_dim, vocab_size, true)),
            HeadMode::Hierarchical => Head::Hier {
                class: Linear::new(&mut pb, "out.class", state_dim, blocks.len(), true),
                token: Linear::new(&mut pb, "out.token", state_dim, vocab_size, true),
            },
            HeadMode::ColdFusion => {
                let lm_units = lm.as_ref().expect("checked above").config().units;
                let mut lm_feat = Vec::new();
                let mut d = lm_units;
                for i in 0..c.cf_depth {
                    lm_feat.push(Linear::new(&mut pb, &format!("cf.lm.{i}"), d, c.cf_lm_dim, true));
                    d = c.cf_lm_dim;
                }
                let ed = Linear::new(&mut pb, "cf.ed", state_dim, c.cf_hidden, true);
                let gate = Linear::new(&mut pb, "cf.gate", c.cf_hidden + c.cf_lm_dim, c.cf_lm_dim, true);
                let mut fused = Vec::new();
                let mut d = c.cf_hidden + c.cf_lm_dim;
                for i in 0..c.cf_depth {
                    fused.push(Linear::new(&mut pb, &format!("cf.fused.{i}"), d, c.cf_hidden, true));
                    d = c.cf_hidden;
                }
                let out = Linear::new(&mut pb, "cf.out", c.cf_hidden, vocab_size, true);
                Head::Cold(ColdHead { lm_feat, ed, gate, fused, out })
            }
        };
        Ok(AsrModel {
            config,
            vocab_size,
            blocks,
            unit_block,
            params,
            encoder,
            ctc_out,
            embed,
            dec_lstm,
            attention,
            head,
            lm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    /// Index of the class block holding `unit`.
    pub fn unit_class(&self, unit: usize) -> usize {
        self.unit_block[unit]
    }

    pub fn lm(&self) -> Option<&RnnLm> {
        self.lm.as_ref()
    }

    /// Places parameters on the graph. LM parameters are always constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            params: self.params.bind(g, trainable),
            lm: self.lm.as_ref().map(|lm| lm.params.bind(g, false)),
        }
    }

    pub fn encode(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<EncoderOutput> {
        let p = &b.params;
        if g.value(features).cols() != self.config.input_dim {
            return Err(ModelError::LengthMismatch {
                what: "feature dimension",
                left: g.value(features).cols(),
                right: self.config.input_dim,
            });
        }
        let mut x = features;
        for layer in &self.encoder {
            let f = layer.fwd.run(g, p, x, false)?;
            let r = layer.bwd.run(g, p, x, true)?;
            let both = g.concat_cols(&[f, r])?;
            let y = layer.proj.forward(g, p, both)?;
            x = g.tanh(y);
            if layer.factor > 1 {
                let t_len = g.value(x).rows();
                let keep: Vec<usize> = (0..t_len).step_by(layer.factor).collect();
                x = g.gather_rows(x, &keep)?;
            }
        }
        self.encoder_output(g, b, x)
    }

    /// Wraps arbitrary high-level features `[T', enc_units]` as encoder output.
    pub fn encoder_output(&self, g: &mut Graph, b: &Bound, h: Var) -> Result<EncoderOutput> {
        let keys = self.attention.enc.forward(g, &b.params, h)?;
        let len = g.value(h).rows();
        Ok(EncoderOutput { h, keys, len })
    }

    /// Log distribution of the CTC branch, `[T', V]`.
    pub fn ctc_logprobs(&self, g: &mut Graph, b: &Bound, enc: &EncoderOutput) -> Result<Var> {
        let logits = self.ctc_out.forward(g, &b.params, enc.h)?;
        Ok(g.log_softmax(logits))
    }

    pub fn initial_state(&self, g: &mut Graph, enc: &EncoderOutput) -> DecoderState {
        let dec = self.dec_lstm.zero_state(g);
        let att = g.constant(Tensor::full(&[1, enc.len], 1.0 / enc.len as f64));
        let lm = self.lm.as_ref().map(|lm| lm.zero_state(g));
        DecoderState { dec, att, lm }
    }

    /// Location-aware attention from the previous decoder output and weights.
    pub fn attend(&self, g: &mut Graph, b: &Bound, enc: &EncoderOutput, dec_h: Var, prev_att: Var) -> Result<(Var, Var)> {
        let p = &b.params;
        let a = &self.attention;
        let query = a.dec.forward(g, p, dec_h)?;
        let prev_col = g.transpose(prev_att);
        let windows = g.unfold(prev_col, a.width)?;
        let conv = g.matmul(windows, p[a.conv])?;
        let loc = a.loc.forward(g, p, conv)?;
        let pre = g.add(enc.keys, loc)?;
        let pre = g.add_broadcast(pre, query)?;
        let act = g.tanh(pre);
        let energy = a.v.forward(g, p, act)?;
        let energy = g.transpose(energy);
        let weights = g.softmax(energy);
        let context = g.matmul(weights, enc.h)?;
        Ok((weights, context))
    }

    /// Consumes `prev` (a unit or `<sos>`) and yields the next-unit distribution.
    pub fn decode_step(&self, g: &mut Graph, b: &Bound, enc: &EncoderOutput, state: &DecoderState, prev: usize) -> Result<StepOutput> {
        let p = &b.params;
        let (att, context) = self.attend(g, b, enc, state.dec.h, state.att)?;
        let emb = g.gather_rows(p[self.embed], &[prev])?;
        let input = g.concat_cols(&[emb, context])?;
        let dec = self.dec_lstm.step_input(g, p, input, state.dec)?;
        let s = g.concat_cols(&[dec.h, context])?;
        let mut class_logits = None;
        let mut gate = None;
        let mut lm_state = None;
        let logp = match &self.head {
            Head::Flat(out) => {
                let logits = out.forward(g, p, s)?;
                g.log_softmax(logits)
            }
            Head::Hier { class, token } => {
                let cl = class.forward(g, p, s)?;
                class_logits = Some(cl);
                let tok = token.forward(g, p, s)?;
                self.hier_logprobs(g, cl, tok)?
            }
            Head::Cold(cf) => {
                let lm = self.lm.as_ref().expect("cold fusion has a model");
                let lp = b.lm.as_ref().expect("cold fusion binds the model");
                let prev_lm = state.lm.expect("cold fusion state");
                let next = lm.advance(g, lp, prev_lm, prev)?;
                lm_state = Some(next);
                let (logp, gt) = cold_fusion_head(g, p, cf, s, next.h)?;
                gate = Some(gt);
                logp
            }
        };
        Ok(StepOutput {
            state: DecoderState { dec, att, lm: lm_state },
            logp,
            att,
            context,
            class_logits,
            gate,
        })
    }

    /// log P(y) = log P(class) + log P(y | class), concatenated in id order.
    pub fn hier_logprobs(&self, g: &mut Graph, class_logits: Var, token_logits: Var) -> Result<Var> {
        hier_softmax(g, class_logits, token_logits, &self.blocks)
    }

    /// Teacher-forced attention pass over `[<sos>, y...]`; rows are the
    /// distributions for `[y..., <eos>]`.
    pub fn teacher_forced(&self, g: &mut Graph, b: &Bound, enc: &EncoderOutput, units: &[usize]) -> Result<(Var, Vec<Var>)> {
        let mut state = self.initial_state(g, enc);
        let mut rows = Vec::with_capacity(units.len() + 1);
        let mut class_rows = Vec::new();
        let mut prev = SOS_EOS_ID;
        for step in 0..=units.len() {
            let out = self.decode_step(g, b, enc, &state, prev)?;
            rows.push(out.logp);
            if let Some(cl) = out.class_logits {
                class_rows.push(cl);
            }
            state = out.state;
            if step < units.len() {
                prev = units[step];
            }
        }
        Ok((g.concat_rows(&rows)?, class_rows))
    }

    /// Per-utterance losses: CTC NLL (None when infeasible), smoothed
    /// attention cross-entropy summed over steps, and mean LID cross-entropy.
    fn utterance_losses(
        &self,
        g: &mut Graph,
        b: &Bound,
        features: Var,
        units: &[usize],
        opts: &LossOptions,
    ) -> Result<(Option<Var>, Option<Var>, Option<Var>)> {
        let enc = self.encode(g, b, features)?;
        let ctc = if opts.lambda > 0.0 {
            let lp = self.ctc_logprobs(g, b, &enc)?;
            match ctc_loss_node(g, lp, units, BLANK_ID) {
                Ok(v) => Some(v),
                Err(CtcError::Infeasible { .. }) => None,
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };
        if opts.lambda >= 1.0 {
            return Ok((ctc, None, None));
        }
        let (rows, class_rows) = self.teacher_forced(g, b, &enc, units)?;
        let mut targets = units.to_vec();
        targets.push(SOS_EOS_ID);
        let att = smoothed_cross_entropy(g, rows, &targets, opts.label_smoothing)?;
        let ld = if opts.with_lid {
            if class_rows.is_empty() {
                return Err(ModelError::Config("language-ID loss needs the hierarchical head".into()));
            }
            let logits = g.concat_rows(&class_rows)?;
            let tags: Vec<usize> = targets.iter().map(|&u| self.unit_block[u]).collect();
            Some(lid_loss(g, logits, &tags)?)
        } else {
            None
        };
        Ok((ctc, Some(att), ld))
    }

    /// λ·L_CTC + (1−λ)·(L_att [+ L_ld]) averaged over the batch.
    pub fn mtl_loss(&self, g: &mut Graph, b: &Bound, batch: &[(Var, &[usize])], opts: &LossOptions) -> Result<LossParts> {
        if !(0.0..=1.0).contains(&opts.lambda) {
            return Err(ModelError::Config(format!("lambda {} outside [0, 1]", opts.lambda)));
        }
        if batch.is_empty() {
            return Err(ModelError::Empty("batch"));
        }
        let mut ctc_terms = Vec::new();
        let mut att_terms = Vec::new();
        let mut ld_terms = Vec::new();
        let mut skipped = 0;
        for &(features, units) in batch {
            let (c, a, l) = self.utterance_losses(g, b, features, units, opts)?;
            match c {
                Some(c) => ctc_terms.push(c),
                None if opts.lambda > 0.0 => skipped += 1,
                None => {}
            }
            att_terms.extend(a);
            ld_terms.extend(l);
        }
        let mean = |g: &mut Graph, terms: &[Var]| -> Result<Option<Var>> {
            if terms.is_empty() {
                return Ok(None);
            }
            let all = g.concat_cols(terms)?;
            let s = g.sum(all);
            Ok(Some(g.scale(s, 1.0 / terms.len() as f64)))
        };
        let ctc = mean(g, &ctc_terms)?;
        let att = mean(g, &att_terms)?;
        let ld = mean(g, &ld_terms)?;
        let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.scalar_value(v));
        let parts = (value(g, ctc), value(g, att), value(g, ld));

        let mut terms = Vec::new();
        if let Some(c) = ctc {
            terms.push(g.scale(c, opts.lambda));
        }
        if let Some(a) = att {
            terms.push(g.scale(a, 1.0 - opts.lambda));
        }
        if let Some(l) = ld {
            terms.push(g.scale(l, 1.0 - opts.lambda));
        }
        let total = match terms.len() {
            0 => g.constant(Tensor::scalar(0.0)),
            1 => terms[0],
            _ => {
                let all = g.concat_cols(&terms)?;
                g.sum(all)
            }
        };
        Ok(LossParts {
            total,
            ctc: parts.0,
            att: parts.1,
            ld: parts.2,
            ctc_skipped: skipped,
        })
    }

    /// Writes `model.json`, `model.ckpt` and, for cold fusion, `lm.ckpt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = ModelMeta {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            blocks: self.blocks.iter().map(|r| (r.start, r.end)).collect(),
            lm: self.lm.as_ref().map(|lm| lm.config().clone()),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("model.json"), json + "\n")?;
        self.params.save(&dir.join("model.ckpt"))?;
        if let Some(lm) = &self.lm {
            lm.params.save(&dir.join("lm.ckpt"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("model.json"))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let lm = match meta.lm {
            Some(cfg) => {
                let mut lm = RnnLm::new(cfg, meta.vocab_size)?;
                lm.params.load_values(&dir.join("lm.ckpt"))?;
                Some(lm)
            }
            None => None,
        };
        let blocks = meta.blocks.into_iter().map(|(s, e)| s..e).collect();
        let mut model = AsrModel::with_blocks(meta.config, meta.vocab_size, blocks, lm)?;
        model.params.load_values(&dir.join("model.ckpt"))?;
        Ok(model)
    }
}

/// Class-factored log distribution over contiguous unit blocks.
pub fn hier_softmax(g: &mut Graph, class_logits: Var, token_logits: Var, blocks: &[Range<usize>]) -> Result<Var> {
    if g.value(class_logits).cols() != blocks.len() {
        return Err(ModelError::LengthMismatch {
            what: "class logits",
            left: g.value(class_logits).cols(),
            right: blocks.len(),
        });
    }
    let class_lp = g.log_softmax(class_logits);
    let mut parts = Vec::with_capacity(blocks.len());
    for (k, r) in blocks.iter().enumerate() {
        let within = g.slice_cols(token_logits, r.start, r.len())?;
        let within = g.log_softmax(within);
        let cls = g.slice_cols(class_lp, k, 1)?;
        parts.push(g.add_broadcast(within, cls)?);
    }
    Ok(g.concat_cols(&parts)?)
}

/// Returns the output log distribution and the gate activations.
fn cold_fusion_head(g: &mut Graph, p: &[Var], cf: &ColdHead, s: Var, lm_h: Var) -> Result<(Var, Var)> {
    let mut s_lm = lm_h;
    for layer in &cf.lm_feat {
        let y = layer.forward(g, p, s_lm)?;
        s_lm = g.tanh(y);
    }
    let ed = cf.ed.forward(g, p, s)?;
    let s_ed = g.sigmoid(ed);
    let both = g.concat_cols(&[s_ed, s_lm])?;
    let gate_in = cf.gate.forward(g, p, both)?;
    let gate = g.sigmoid(gate_in);
    let gated = g.mul(gate, s_lm)?;
    let mut r = g.concat_cols(&[s_ed, gated])?;
    for layer in &cf.fused {
        let y = layer.forward(g, p, r)?;
        r = g.tanh(y);
    }
    let logits = cf.out.forward(g, p, r)?;
    Ok((g.log_softmax(logits), gate))
}

/// Sum over rows of `−Σ_k q_k log p_k` with `q = (1−ε)·onehot + ε/V`.
pub fn smoothed_cross_entropy(g: &mut Graph, logp_rows: Var, targets: &[usize], epsilon: f64) -> Result<Var> {
    let (rows, v) = (g.value(logp_rows).rows(), g.value(logp_rows).cols());
    if rows != targets.len() {
        return Err(ModelError::LengthMismatch { what: "targets", left: targets.len(), right: rows });
    }
    let mut q = vec![epsilon / v as f64; rows * v];
    for (r, &t) in targets.iter().enumerate() {
        q[r * v + t] += 1.0 - epsilon;
    }
    let q = g.constant(Tensor::matrix(rows, v, q)?);
    let weighted = g.mul(logp_rows, q)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0))
}

/// Mean over steps of `−log P(class_t)` from class logits `[steps, classes]`.
pub fn lid_loss(g: &mut Graph, class_logits: Var, targets: &[usize]) -> Result<Var> {
    let (rows, c) = (g.value(class_logits).rows(), g.value(class_logits).cols());
    if rows != targets.len() {
        return Err(ModelError::LengthMismatch { what: "language tags", left: targets.len(), right: rows });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(ModelError::LengthMismatch { what: "language tag index", left: bad, right: c });
    }
    let lp = g.log_softmax(class_logits);
    let mut mask = vec![0.0; rows * c];
    for (r, &t) in targets.iter().enumerate() {
        mask[r * c + t] = -1.0 / rows as f64;
    }
    let mask = g.constant(Tensor::matrix(rows, c, mask)?);
    let picked = g.mul(lp, mask)?;
    Ok(g.sum(picked))
}
