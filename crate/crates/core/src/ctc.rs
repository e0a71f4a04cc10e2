//! Connectionist temporal classification in the log domain.
//!
//! Log-probabilities are passed as a row-major `T × K` slice where column
//! `blank` is the blank symbol.

use thiserror::Error;

use crate::tensor::{log_add, log_sum_exp, Graph, TensorError, Var};

const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("log-probability buffer of length {len} is not a multiple of {classes} classes")]
    Shape { len: usize, classes: usize },
    #[error("label {0} is the blank or out of range")]
    BadLabel(usize),
    #[error("brute force over {0} alignments exceeds the 10^7 limit")]
    TooLarge(f64),
    #[error("{frames} frames cannot emit {needed} labels")]
    Infeasible { frames: usize, needed: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CtcError>;

/// Row-major `T × K` log-probabilities.
#[derive(Debug, Clone, Copy)]
pub struct LogProbs<'a> {
    data: &'a [f64],
    classes: usize,
    blank: usize,
}

impl<'a> LogProbs<'a> {
    pub fn new(data: &'a [f64], classes: usize, blank: usize) -> Result<Self> {
        if classes == 0 || data.len() % classes != 0 || blank >= classes {
            return Err(CtcError::Shape {
                len: data.len(),
                classes,
            });
        }
        Ok(LogProbs { data, classes, blank })
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    #[inline]
    pub fn at(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.classes + k]
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&l| l == self.blank || l >= self.classes) {
            Some(&l) => Err(CtcError::BadLabel(l)),
            None => Ok(()),
        }
    }
}

/// Frames needed to emit `labels`: one per label plus one blank between repeats.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward and backward tables over the blank-interleaved label sequence.
/// `beta[t][s]` includes the emission at `t`.
#[derive(Debug, Clone)]
pub struct CtcLattice {
    pub extended: Vec<usize>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

impl CtcLattice {
    pub fn new(lp: &LogProbs, labels: &[usize]) -> Result<Self> {
        lp.check_labels(labels)?;
        let t_len = lp.frames();
        let mut ext = Vec::with_capacity(2 * labels.len() + 1);
        ext.push(lp.blank);
        for &l in labels {
            ext.push(l);
            ext.push(lp.blank);
        }
        let s_len = ext.len();
        let skip = |s: usize| s >= 2 && ext[s] != lp.blank && ext[s] != ext[s - 2];

        let mut alpha = vec![vec![NEG_INF; s_len]; t_len];
        let mut beta = vec![vec![NEG_INF; s_len]; t_len];
        if t_len == 0 {
            let ll = if labels.is_empty() { 0.0 } else { NEG_INF };
            return Ok(CtcLattice {
                extended: ext,
                alpha,
                beta,
                log_likelihood: ll,
            });
        }

        alpha[0][0] = lp.at(0, ext[0]);
        if s_len > 1 {
            alpha[0][1] = lp.at(0, ext[1]);
        }
        for t in 1..t_len {
            for s in 0..s_len {
                let mut a = alpha[t - 1][s];
                if s >= 1 {
                    a = log_add(a, alpha[t - 1][s - 1]);
                }
                if skip(s) {
                    a = log_add(a, alpha[t - 1][s - 2]);
                }
                alpha[t][s] = if a == NEG_INF { NEG_INF } else { a + lp.at(t, ext[s]) };
            }
        }

        let last = t_len - 1;
        beta[last][s_len - 1] = lp.at(last, ext[s_len - 1]);
        if s_len > 1 {
            beta[last][s_len - 2] = lp.at(last, ext[s_len - 2]);
        }
        for t in (0..last).rev() {
            for s in 0..s_len {
                let mut b = beta[t + 1][s];
                if s + 1 < s_len {
                    b = log_add(b, beta[t + 1][s + 1]);
                }
                if s + 2 < s_len && skip(s + 2) {
                    b = log_add(b, beta[t + 1][s + 2]);
                }
                beta[t][s] = if b == NEG_INF { NEG_INF } else { b + lp.at(t, ext[s]) };
            }
        }

        let mut ll = alpha[last][s_len - 1];
        if s_len > 1 {
            ll = log_add(ll, alpha[last][s_len - 2]);
        }
        Ok(CtcLattice {
            extended: ext,
            alpha,
            beta,
            log_likelihood: ll,
        })
    }

    /// Total log-likelihood recovered at frame `t` from `α·β/y`.
    pub fn log_likelihood_at(&self, lp: &LogProbs, t: usize) -> f64 {
        let terms: Vec<f64> = (0..self.extended.len())
            .map(|s| {
                let (a, b) = (self.alpha[t][s], self.beta[t][s]);
                if a == NEG_INF || b == NEG_INF {
                    NEG_INF
                } else {
                    a + b - lp.at(t, self.extended[s])
                }
            })
            .collect();
        log_sum_exp(&terms)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcLoss {
    /// `−log p(labels | logprobs)`; `+∞` when infeasible.
    pub nll: f64,
    /// `∂nll/∂logprobs`, row-major `T × K`; zero when infeasible.
    pub grad: Vec<f64>,
    pub feasible: bool,
}

pub fn ctc_loss(lp: &LogProbs, labels: &[usize]) -> Result<CtcLoss> {
    lp.check_labels(labels)?;
    let (t_len, k) = (lp.frames(), lp.classes());
    if t_len < min_frames(labels) {
        return Ok(CtcLoss {
            nll: f64::INFINITY,
            grad: vec![0.0; t_len * k],
            feasible: false,
        });
    }
    let lat = CtcLattice::new(lp, labels)?;
    let ll = lat.log_likelihood;
    let mut grad = vec![0.0; t_len * k];
    for t in 0..t_len {
        let mut occ = vec![NEG_INF; k];
        for (s, &sym) in lat.extended.iter().enumerate() {
            let (a, b) = (lat.alpha[t][s], lat.beta[t][s]);
            if a != NEG_INF && b != NEG_INF {
                occ[sym] = log_add(occ[sym], a + b - lp.at(t, sym));
            }
        }
        for (j, o) in occ.iter().enumerate() {
            if *o != NEG_INF {
                grad[t * k + j] = -(o - ll).exp();
            }
        }
    }
    Ok(CtcLoss {
        nll: -ll,
        grad,
        feasible: true,
    })
}

/// Records the CTC loss of a `T × K` log-probability node as a scalar on the tape.
pub fn ctc_loss_node(graph: &mut Graph, logprobs: Var, labels: &[usize], blank: usize) -> Result<Var> {
    let t = graph.value(logprobs);
    let lp = LogProbs::new(t.data(), t.cols(), blank)?;
    let out = ctc_loss(&lp, labels)?;
    if !out.feasible {
        return Err(CtcError::Infeasible {
            frames: lp.frames(),
            needed: min_frames(labels),
        });
    }
    Ok(graph.external_scalar(out.nll, &[logprobs], vec![out.grad])?)
}

/// Collapses an alignment: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

fn for_each_alignment(lp: &LogProbs, mut f: impl FnMut(&[usize], f64)) -> Result<()> {
    let (t_len, k) = (lp.frames(), lp.classes());
    let total = (k as f64).powi(t_len as i32);
    if total > 1e7 {
        return Err(CtcError::TooLarge(total));
    }
    let mut path = vec![0usize; t_len];
    loop {
        let score: f64 = path.iter().enumerate().map(|(t, &s)| lp.at(t, s)).sum();
        f(&path, score);
        let mut i = 0;
        loop {
            if i == t_len {
                return Ok(());
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Negative log-likelihood by enumerating every alignment.
pub fn ctc_brute_force(lp: &LogProbs, labels: &[usize]) -> Result<f64> {
    lp.check_labels(labels)?;
    let mut ll = NEG_INF;
    for_each_alignment(lp, |path, score| {
        if collapse(path, lp.blank()) == labels {
            ll = log_add(ll, score);
        }
    })?;
    Ok(-ll)
}

/// Log-probability that the collapsed output starts with `prefix`, by enumeration.
pub fn ctc_prefix_brute_force(lp: &LogProbs, prefix: &[usize]) -> Result<f64> {
    let mut ll = NEG_INF;
    for_each_alignment(lp, |path, score| {
        if collapse(path, lp.blank()).starts_with(prefix) {
            ll = log_add(ll, score);
        }
    })?;
    Ok(ll)
}

/// Per-prefix forward variables for incremental prefix scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPrefixState {
    /// Prefix emitted with its last label at frame `t` (non-blank ending).
    r_nonblank: Vec<f64>,
    /// Prefix emitted and followed by a blank at frame `t`.
    r_blank: Vec<f64>,
    last: Option<usize>,
    /// `log P(output starts with prefix)`.
    pub score: f64,
}

/// Incremental CTC prefix scores for joint CTC/attention decoding.
#[derive(Debug, Clone)]
pub struct CtcPrefixScorer<'a> {
    lp: LogProbs<'a>,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(lp: LogProbs<'a>) -> Self {
        CtcPrefixScorer { lp }
    }

    pub fn initial(&self) -> CtcPrefixState {
        let t_len = self.lp.frames();
        let mut r_blank = vec![NEG_INF; t_len];
        let mut acc = 0.0;
        for (t, r) in r_blank.iter_mut().enumerate() {
            acc += self.lp.at(t, self.lp.blank());
            *r = acc;
        }
        CtcPrefixState {
            r_nonblank: vec![NEG_INF; t_len],
            r_blank,
            last: None,
            score: 0.0,
        }
    }

    /// State of `prefix + [label]` given the state of `prefix`.
    pub fn extend(&self, parent: &CtcPrefixState, label: usize) -> CtcPrefixState {
        let t_len = self.lp.frames();
        let blank = self.lp.blank();
        let mut r_n = vec![NEG_INF; t_len];
        let mut r_b = vec![NEG_INF; t_len];
        if t_len == 0 {
            return CtcPrefixState {
                r_nonblank: r_n,
                r_blank: r_b,
                last: Some(label),
                score: NEG_INF,
            };
        }
        if parent.last.is_none() {
            r_n[0] = self.lp.at(0, label);
        }
        let mut psi = r_n[0];
        for t in 1..t_len {
            let phi = if parent.last == Some(label) {
                parent.r_blank[t - 1]
            } else {
                log_add(parent.r_blank[t - 1], parent.r_nonblank[t - 1])
            };
            let emit = self.lp.at(t, label);
            r_n[t] = log_add(r_n[t - 1], phi) + emit;
            r_b[t] = log_add(r_n[t - 1], r_b[t - 1]) + self.lp.at(t, blank);
            if phi != NEG_INF {
                psi = log_add(psi, phi + emit);
            }
        }
        CtcPrefixState {
            r_nonblank: r_n,
            r_blank: r_b,
            last: Some(label),
            score: psi,
        }
    }

    /// `log P(output == prefix)`: the score of ending the hypothesis here.
    pub fn final_score(&self, state: &CtcPrefixState) -> f64 {
        match self.lp.frames() {
            0 => {
                if state.last.is_none() {
                    0.0
                } else {
                    NEG_INF
                }
            }
            t => log_add(state.r_nonblank[t - 1], state.r_blank[t - 1]),
        }
    }
}
