//! Joint CTC/attention beam search with language-model fusion, and an
//! exhaustive-search reference.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{CtcError, CtcPrefixScorer, CtcPrefixState, LogProbs};
use crate::model::{AsrModel, Bound, DecoderState, EncoderOutput, HeadMode, LstmState, ModelError, RnnLm};
use crate::subword::{MixedVocab, BLANK_ID, SOS_EOS_ID};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("exhaustive search over {0} sequences exceeds the 10^6 limit")]
    TooLarge(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    None,
    Shallow,
    Cold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub ctc_weight: f64,
    pub lm_weight: f64,
    /// Output length cap as a multiple of the encoder output length.
    pub max_len_ratio: f64,
    pub fusion: Fusion,
    /// Stop once recent finished hypotheses trail the best by more than this
    /// (log domain, negative). `None` disables end detection.
    pub end_detect: Option<f64>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            ctc_weight: 0.5,
            lm_weight: 0.3,
            max_len_ratio: 1.0,
            fusion: Fusion::None,
            end_detect: Some(1e-10f64.ln()),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(DecodeError::Config("beam must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(DecodeError::Config(format!("ctc weight {} outside [0, 1]", self.ctc_weight)));
        }
        if !self.lm_weight.is_finite() || !(self.max_len_ratio >= 0.0) {
            return Err(DecodeError::Config("lm weight and length ratio must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// β actually applied during search; cold fusion carries no decode-time LM term.
    pub fn effective_lm_weight(&self) -> f64 {
        match self.fusion {
            Fusion::Shallow => self.lm_weight,
            Fusion::None | Fusion::Cold => 0.0,
        }
    }
}

/// (1−w)·att + w·ctc + β·lm with all terms log probabilities.
pub fn shallow_fuse(att: f64, ctc: f64, lm: f64, cfg: &DecodeConfig) -> f64 {
    let w = cfg.ctc_weight;
    let beta = cfg.effective_lm_weight();
    let mut s = (1.0 - w) * att;
    if w > 0.0 {
        s += w * ctc;
    }
    if beta != 0.0 {
        s += beta * lm;
    }
    s
}

/// An autoregressive model: consumes the previous unit, yields the next-unit
/// log distribution.
pub trait StepScorer {
    type State: Clone;
    fn initial(&mut self) -> Result<Self::State>;
    fn step(&mut self, state: &Self::State, prev: usize) -> Result<(Self::State, Vec<f64>)>;
}

/// Scorer that assigns log probability 0 to everything.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullScorer {
    pub vocab_size: usize,
}

impl StepScorer for NullScorer {
    type State = ();
    fn initial(&mut self) -> Result<()> {
        Ok(())
    }
    fn step(&mut self, _: &(), _: usize) -> Result<((), Vec<f64>)> {
        Ok(((), vec![0.0; self.vocab_size]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub blank: usize,
    pub eos: usize,
}

impl Default for Specials {
    fn default() -> Self {
        Specials {
            blank: BLANK_ID,
            eos: SOS_EOS_ID,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub units: Vec<usize>,
    pub score: f64,
    pub att: f64,
    pub ctc: f64,
    pub lm: f64,
    /// False when the length budget ran out before `<eos>`.
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NBest {
    pub hyps: Vec<Hypothesis>,
}

impl NBest {
    pub fn best(&self) -> &Hypothesis {
        &self.hyps[0]
    }

    pub fn complete(&self) -> bool {
        self.hyps.first().is_some_and(|h| h.finished)
    }
}

#[derive(Clone)]
struct Live<A, L> {
    units: Vec<usize>,
    att: f64,
    ctc: f64,
    lm: f64,
    score: f64,
    att_state: A,
    lm_state: Option<L>,
    ctc_state: Option<CtcPrefixState>,
}

struct Candidate {
    score: f64,
    parent: usize,
    unit: usize,
    att: f64,
    ctc: f64,
    lm: f64,
    ctc_state: Option<CtcPrefixState>,
}

fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.parent.cmp(&b.parent))
        .then(a.unit.cmp(&b.unit))
}

/// Length-synchronous beam search. `ctc` must be present when the CTC weight
/// is positive and `lm` under shallow fusion with a non-zero weight.
pub fn beam_search_with<A: StepScorer, L: StepScorer>(
    att: &mut A,
    ctc: Option<LogProbs>,
    mut lm: Option<&mut L>,
    max_len: usize,
    specials: Specials,
    cfg: &DecodeConfig,
) -> Result<NBest> {
    cfg.validate()?;
    let w = cfg.ctc_weight;
    let beta = cfg.effective_lm_weight();
    let ctc_scorer = match (w > 0.0, ctc) {
        (true, Some(lp)) => Some(CtcPrefixScorer::new(lp)),
        (true, None) => return Err(DecodeError::Config("ctc weight is positive but no CTC posteriors given".into())),
        (false, _) => None,
    };
    if beta != 0.0 && lm.is_none() {
        return Err(DecodeError::Config("shallow fusion needs a language model".into()));
    }
    let use_lm = beta != 0.0;

    let mut live = vec![Live {
        units: Vec::new(),
        att: 0.0,
        ctc: 0.0,
        lm: 0.0,
        score: 0.0,
        att_state: att.initial()?,
        lm_state: match (use_lm, lm.as_deref_mut()) {
            (true, Some(l)) => Some(l.initial()?),
            _ => None,
        },
        ctc_state: ctc_scorer.as_ref().map(|s| s.initial()),
    }];
    let mut finished: Vec<(Hypothesis, usize)> = Vec::new();
    let mut last_live: Vec<Hypothesis> = Vec::new();

    for step in 0..=max_len {
        let mut cands = Vec::new();
        let mut att_states = Vec::with_capacity(live.len());
        let mut lm_states = Vec::with_capacity(live.len());
        for (pi, h) in live.iter().enumerate() {
            let prev = h.units.last().copied().unwrap_or(specials.eos);
            let (a_state, a_lp) = att.step(&h.att_state, prev)?;
            let (l_state, l_lp) = match (&h.lm_state, lm.as_deref_mut()) {
                (Some(s), Some(l)) => {
                    let (ns, lp) = l.step(s, prev)?;
                    (Some(ns), Some(lp))
                }
                _ => (None, None),
            };
            for (unit, &alp) in a_lp.iter().enumerate() {
                if unit == specials.blank || (step == max_len && unit != specials.eos) {
                    continue;
                }
                let a = h.att + alp;
                let l = h.lm + l_lp.as_ref().map_or(0.0, |v| v[unit]);
                let (c, c_state) = match (&ctc_scorer, &h.ctc_state) {
                    (Some(sc), Some(st)) if unit == specials.eos => (sc.final_score(st), None),
                    (Some(sc), Some(st)) => {
                        let ns = sc.extend(st, unit);
                        (ns.score, Some(ns))
                    }
                    _ => (0.0, None),
                };
                let score = shallow_fuse(a, c, l, cfg);
                if score.is_finite() {
                    cands.push(Candidate {
                        score,
                        parent: pi,
                        unit,
                        att: a,
                        ctc: c,
                        lm: l,
                        ctc_state: c_state,
                    });
                }
            }
            att_states.push(a_state);
            lm_states.push(l_state);
        }
        cands.sort_by(rank_order);
        cands.truncate(cfg.beam);

        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let parent = &live[c.parent];
            if c.unit == specials.eos {
                finished.push((
                    Hypothesis {
                        units: parent.units.clone(),
                        score: c.score,
                        att: c.att,
                        ctc: c.ctc,
                        lm: c.lm,
                        finished: true,
                    },
                    step,
                ));
            } else {
                let mut units = parent.units.clone();
                units.push(c.unit);
                next.push(Live {
                    units,
                    att: c.att,
                    ctc: c.ctc,
                    lm: c.lm,
                    score: c.score,
                    att_state: att_states[c.parent].clone(),
                    lm_state: lm_states[c.parent].clone(),
                    ctc_state: c.ctc_state,
                });
            }
        }
        if !next.is_empty() {
            last_live = next
                .iter()
                .map(|h| Hypothesis {
                    units: h.units.clone(),
                    score: h.score,
                    att: h.att,
                    ctc: h.ctc,
                    lm: h.lm,
                    finished: false,
                })
                .collect();
        }
        live = next;
        if live.is_empty() {
            break;
        }
        let best_done = finished.iter().map(|(h, _)| h.score).fold(f64::NEG_INFINITY, f64::max);
        if beta >= 0.0 && best_done >= live[0].score {
            break;
        }
        if let Some(margin) = cfg.end_detect {
            if end_detected(&finished, step, best_done, margin) {
                break;
            }
        }
    }

    let mut hyps: Vec<Hypothesis> = finished.into_iter().map(|(h, _)| h).collect();
    hyps.sort_by(|a, b| b.score.total_cmp(&a.score));
    if hyps.is_empty() {
        hyps = last_live;
    }
    if hyps.is_empty() {
        hyps.push(Hypothesis {
            units: Vec::new(),
            score: f64::NEG_INFINITY,
            att: f64::NEG_INFINITY,
            ctc: f64::NEG_INFINITY,
            lm: 0.0,
            finished: false,
        });
    }
    Ok(NBest { hyps })
}

/// True when each of the last three steps finished only hypotheses trailing
/// the best finished score by more than `margin`.
fn end_detected(finished: &[(Hypothesis, usize)], step: usize, best: f64, margin: f64) -> bool {
    const WINDOW: usize = 3;
    if finished.is_empty() || step + 1 < WINDOW {
        return false;
    }
    (0..WINDOW).all(|m| {
        let at = step - m;
        let scores: Vec<f64> = finished.iter().filter(|(_, s)| *s == at).map(|(h, _)| h.score).collect();
        !scores.is_empty() && scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - best < margin
    })
}

/// Scores every sequence of length ≤ `max_len` over the non-special units.
pub fn exhaustive_search_with<A: StepScorer, L: StepScorer>(
    att: &mut A,
    ctc: Option<LogProbs>,
    mut lm: Option<&mut L>,
    vocab_size: usize,
    max_len: usize,
    specials: Specials,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    cfg.validate()?;
    let units: Vec<usize> = (0..vocab_size).filter(|&u| u != specials.blank && u != specials.eos).collect();
    let n = units.len() as f64;
    let count: f64 = (0..=max_len).map(|l| n.powi(l as i32)).sum();
    if count > 1e6 {
        return Err(DecodeError::TooLarge(count));
    }
    let w = cfg.ctc_weight;
    let beta = cfg.effective_lm_weight();
    let ctc_scorer = match (w > 0.0, ctc) {
        (true, Some(lp)) => Some(CtcPrefixScorer::new(lp)),
        (true, None) => return Err(DecodeError::Config("ctc weight is positive but no CTC posteriors given".into())),
        (false, _) => None,
    };
    if beta != 0.0 && lm.is_none() {
        return Err(DecodeError::Config("shallow fusion needs a language model".into()));
    }

    struct Node<A, L> {
        prefix: Vec<usize>,
        att: f64,
        lm: f64,
        att_state: A,
        lm_state: Option<L>,
        ctc_state: Option<CtcPrefixState>,
    }
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![Node {
        prefix: Vec::new(),
        att: 0.0,
        lm: 0.0,
        att_state: att.initial()?,
        lm_state: match (beta != 0.0, lm.as_deref_mut()) {
            (true, Some(l)) => Some(l.initial()?),
            _ => None,
        },
        ctc_state: ctc_scorer.as_ref().map(|s| s.initial()),
    }];
    while let Some(node) = stack.pop() {
        let prev = node.prefix.last().copied().unwrap_or(specials.eos);
        let (a_state, a_lp) = att.step(&node.att_state, prev)?;
        let (l_state, l_lp) = match (&node.lm_state, lm.as_deref_mut()) {
            (Some(s), Some(l)) => {
                let (ns, lp) = l.step(s, prev)?;
                (Some(ns), Some(lp))
            }
            _ => (None, None),
        };
        let a = node.att + a_lp[specials.eos];
        let l = node.lm + l_lp.as_ref().map_or(0.0, |v| v[specials.eos]);
        let c = match (&ctc_scorer, &node.ctc_state) {
            (Some(sc), Some(st)) => sc.final_score(st),
            _ => 0.0,
        };
        let hyp = Hypothesis {
            units: node.prefix.clone(),
            score: shallow_fuse(a, c, l, cfg),
            att: a,
            ctc: c,
            lm: l,
            finished: true,
        };
        if best.as_ref().is_none_or(|b| hyp.score > b.score) {
            best = Some(hyp);
        }
        if node.prefix.len() < max_len {
            for &u in units.iter().rev() {
                let mut prefix = node.prefix.clone();
                prefix.push(u);
                stack.push(Node {
                    prefix,
                    att: node.att + a_lp[u],
                    lm: node.lm + l_lp.as_ref().map_or(0.0, |v| v[u]),
                    att_state: a_state.clone(),
                    lm_state: l_state.clone(),
                    ctc_state: match (&ctc_scorer, &node.ctc_state) {
                        (Some(sc), Some(st)) => Some(sc.extend(st, u)),
                        _ => None,
                    },
                });
            }
        }
    }
    Ok(best.expect("the empty sequence is always scored"))
}

/// Attention decoder of a trained model over one encoded utterance.
pub struct AttentionScorer<'m> {
    model: &'m AsrModel,
    graph: Graph,
    bound: Bound,
    enc: EncoderOutput,
}

impl<'m> AttentionScorer<'m> {
    /// Encodes `features` and returns the scorer plus CTC log posteriors `[T', V]`.
    pub fn new(model: &'m AsrModel, features: &Tensor) -> Result<(Self, Tensor)> {
        let mut graph = Graph::new();
        let bound = model.bind(&mut graph, false);
        let x = graph.constant(features.clone());
        let enc = model.encode(&mut graph, &bound, x)?;
        let lp = model.ctc_logprobs(&mut graph, &bound, &enc)?;
        let ctc = graph.value(lp).clone();
        Ok((AttentionScorer { model, graph, bound, enc }, ctc))
    }

    pub fn encoder_len(&self) -> usize {
        self.enc.len
    }
}

impl StepScorer for AttentionScorer<'_> {
    type State = DecoderState;

    fn initial(&mut self) -> Result<DecoderState> {
        Ok(self.model.initial_state(&mut self.graph, &self.enc))
    }

    fn step(&mut self, state: &DecoderState, prev: usize) -> Result<(DecoderState, Vec<f64>)> {
        let out = self.model.decode_step(&mut self.graph, &self.bound, &self.enc, state, prev)?;
        Ok((out.state, self.graph.value(out.logp).data().to_vec()))
    }
}

/// External LM as a step scorer.
pub struct LmScorer<'m> {
    lm: &'m RnnLm,
    graph: Graph,
    params: Vec<Var>,
}

impl<'m> LmScorer<'m> {
    pub fn new(lm: &'m RnnLm) -> Self {
        let mut graph = Graph::new();
        let params = lm.params.bind(&mut graph, false);
        LmScorer { lm, graph, params }
    }
}

impl StepScorer for LmScorer<'_> {
    type State = LstmState;

    fn initial(&mut self) -> Result<LstmState> {
        Ok(self.lm.zero_state(&mut self.graph))
    }

    fn step(&mut self, state: &LstmState, prev: usize) -> Result<(LstmState, Vec<f64>)> {
        let (s, lp) = self.lm.lm_step(&mut self.graph, &self.params, *state, prev)?;
        Ok((s, self.graph.value(lp).data().to_vec()))
    }
}

fn check_fusion(model: &AsrModel, lm: Option<&RnnLm>, cfg: &DecodeConfig) -> Result<()> {
    match cfg.fusion {
        Fusion::Cold if model.config().head != HeadMode::ColdFusion => {
            Err(DecodeError::Config("cold-fusion decoding needs a cold-fusion model".into()))
        }
        Fusion::Shallow if lm.is_none() && cfg.lm_weight != 0.0 => {
            Err(DecodeError::Config("shallow fusion needs a language model".into()))
        }
        _ => Ok(()),
    }
}

/// Output length cap for an encoder of `enc_len` frames.
pub fn max_output_len(enc_len: usize, cfg: &DecodeConfig) -> usize {
    (cfg.max_len_ratio * enc_len as f64).floor() as usize
}

pub fn beam_search(model: &AsrModel, features: &Tensor, lm: Option<&RnnLm>, cfg: &DecodeConfig) -> Result<NBest> {
    check_fusion(model, lm, cfg)?;
    let (mut att, ctc) = AttentionScorer::new(model, features)?;
    let max_len = max_output_len(att.encoder_len(), cfg);
    let lp = LogProbs::new(ctc.data(), ctc.cols(), BLANK_ID)?;
    let mut lm_scorer = lm.filter(|_| cfg.effective_lm_weight() != 0.0).map(LmScorer::new);
    beam_search_with(&mut att, Some(lp), lm_scorer.as_mut(), max_len, Specials::default(), cfg)
}

pub fn exhaustive_search(model: &AsrModel, features: &Tensor, lm: Option<&RnnLm>, max_len: usize, cfg: &DecodeConfig) -> Result<Hypothesis> {
    check_fusion(model, lm, cfg)?;
    let (mut att, ctc) = AttentionScorer::new(model, features)?;
    let lp = LogProbs::new(ctc.data(), ctc.cols(), BLANK_ID)?;
    let mut lm_scorer = lm.filter(|_| cfg.effective_lm_weight() != 0.0).map(LmScorer::new);
    exhaustive_search_with(&mut att, Some(lp), lm_scorer.as_mut(), model.vocab_size(), max_len, Specials::default(), cfg)
}

/// Column header of [`nbest_tsv`].
pub const NBEST_HEADER: &str = "id\trank\tscore\tatt\tctc\tlm\tstatus\tunits";

/// One line per hypothesis; units are space-separated vocabulary entries.
pub fn nbest_tsv(id: &str, nbest: &NBest, vocab: &MixedVocab) -> String {
    let mut out = String::new();
    for (rank, h) in nbest.hyps.iter().enumerate() {
        let units: Vec<&str> = h.units.iter().map(|&u| vocab.unit(u)).collect();
        out.push_str(&format!(
            "{id}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
            rank + 1,
            h.score,
            h.att,
            h.ctc,
            h.lm,
            if h.finished { "final" } else { "partial" },
            units.join(" ")
        ));
    }
    out
}
