//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use cswitch::corpus::{Lexicon, Transcript};
use cswitch::ctc::ctc_loss_node;
use cswitch::decode::{DecodeError, StepScorer};
use cswitch::model::{hier_softmax, lid_loss, smoothed_cross_entropy, AsrModel, HeadMode, LmConfig, LossOptions, ModelConfig, RnnLm};
use cswitch::subword::{MixedVocab, VocabMode};
use cswitch::tensor::{relative_error, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - z).collect()
}

/// `t × k` matrix of normalized log-probabilities, row-major.
pub fn random_logprobs(rng: &mut ChaCha8Rng, t: usize, k: usize) -> Vec<f64> {
    (0..t)
        .flat_map(|_| {
            let row: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            log_softmax(&row)
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// CTC log-likelihood by walking every frame-level path and collapsing it.
pub fn ctc_enumerate(lp: &[f64], t: usize, k: usize, blank: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0; t];
    'outer: loop {
        let mut out = Vec::new();
        for (i, &p) in path.iter().enumerate() {
            if p != blank && (i == 0 || path[i - 1] != p) {
                out.push(p);
            }
        }
        if out == labels {
            total += path.iter().enumerate().map(|(i, &p)| lp[i * k + p]).sum::<f64>().exp();
        }
        for d in path.iter_mut() {
            *d += 1;
            if *d < k {
                continue 'outer;
            }
            *d = 0;
        }
        break;
    }
    total.ln()
}

/// `(sub, del, ins)` of the alignment that minimizes (errors, insertions,
/// deletions) lexicographically, by memoized recursion from the front.
pub fn edit_oracle<T: PartialEq>(r: &[T], h: &[T]) -> (usize, usize, usize) {
    fn go<T: PartialEq>(r: &[T], h: &[T], i: usize, j: usize, memo: &mut HashMap<(usize, usize), (usize, usize, usize)>) -> (usize, usize, usize) {
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if i == r.len() {
            let n = h.len() - j;
            (n, n, 0)
        } else if j == h.len() {
            let n = r.len() - i;
            (n, 0, n)
        } else {
            let (c, a, b) = go(r, h, i + 1, j + 1, memo);
            let diag = (c + usize::from(r[i] != h[j]), a, b);
            let (c, a, b) = go(r, h, i + 1, j, memo);
            let del = (c + 1, a, b + 1);
            let (c, a, b) = go(r, h, i, j + 1, memo);
            let ins = (c + 1, a + 1, b);
            diag.min(del).min(ins)
        };
        memo.insert((i, j), v);
        v
    }
    let (cost, ins, del) = go(r, h, 0, 0, &mut HashMap::new());
    (cost - ins - del, del, ins)
}

/// Textbook BPE on space-separated symbol strings.
pub struct ReferenceBpe {
    pub merges: Vec<(String, String)>,
}

impl ReferenceBpe {
    fn split(word: &str) -> Vec<String> {
        let mut s: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        s.push("</w>".into());
        s
    }

    fn merge(symbols: &[String], a: &str, b: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut k = 0;
        while k < symbols.len() {
            if k + 1 < symbols.len() && symbols[k] == a && symbols[k + 1] == b {
                out.push(format!("{a}{b}"));
                k += 2;
            } else {
                out.push(symbols[k].clone());
                k += 1;
            }
        }
        out
    }

    pub fn learn(counts: &[(&str, u64)], num_merges: usize) -> Self {
        let mut vocab: Vec<(Vec<String>, u64)> = counts.iter().map(|(w, c)| (Self::split(w), *c)).collect();
        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut stats: HashMap<(String, String), u64> = HashMap::new();
            for (syms, c) in &vocab {
                for k in 0..syms.len().saturating_sub(1) {
                    *stats.entry((syms[k].clone(), syms[k + 1].clone())).or_insert(0) += c;
                }
            }
            let mut best: Option<((String, String), u64)> = None;
            for (pair, c) in stats {
                let better = match &best {
                    None => true,
                    Some((bp, bc)) => c > *bc || (c == *bc && pair < *bp),
                };
                if better {
                    best = Some((pair, c));
                }
            }
            let Some(((a, b), _)) = best else { break };
            for (syms, _) in &mut vocab {
                *syms = Self::merge(syms, &a, &b);
            }
            merges.push((a, b));
        }
        ReferenceBpe { merges }
    }

    /// Applies the merges in learned order, each over the whole word.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut syms = Self::split(word);
        for (a, b) in &self.merges {
            syms = Self::merge(&syms, a, b);
        }
        syms
    }
}

/// Autoregressive scorer whose next-unit distribution is a fixed pseudo-random
/// function of the prefix.
pub struct TableScorer {
    pub vocab: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl TableScorer {
    pub fn distribution(&self, prefix: &[usize]) -> Vec<f64> {
        let mut key = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for &u in prefix {
            key = key.rotate_left(7) ^ (u as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        }
        let mut r = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..self.vocab).map(|_| r.random_range(-1.0..1.0) * self.temperature).collect();
        log_softmax(&logits)
    }
}

impl StepScorer for TableScorer {
    /// Every unit fed so far, starting with the start symbol.
    type State = Vec<usize>;

    fn initial(&mut self) -> Result<Vec<usize>, DecodeError> {
        Ok(Vec::new())
    }

    fn step(&mut self, hist: &Vec<usize>, prev: usize) -> Result<(Vec<usize>, Vec<f64>), DecodeError> {
        let mut h = hist.clone();
        h.push(prev);
        let d = self.distribution(&h[1..]);
        Ok((h, d))
    }
}

/// Scorer driven by an explicit map from prefix to log distribution; missing
/// prefixes fall back to `default`.
pub struct MapScorer {
    pub table: BTreeMap<Vec<usize>, Vec<f64>>,
    pub default: Vec<f64>,
    pub sos: usize,
}

impl StepScorer for MapScorer {
    type State = Vec<usize>;

    fn initial(&mut self) -> Result<Vec<usize>, DecodeError> {
        Ok(vec![])
    }

    fn step(&mut self, hist: &Vec<usize>, prev: usize) -> Result<(Vec<usize>, Vec<f64>), DecodeError> {
        let mut h = hist.clone();
        h.push(prev);
        let prefix: Vec<usize> = h[1..].to_vec();
        let d = self.table.get(&prefix).cloned().unwrap_or_else(|| self.default.clone());
        Ok((h, d))
    }
}

pub fn toy_vocab() -> MixedVocab {
    let lex = Lexicon::bundled();
    let ts: Vec<Transcript> = ["我 go", "你 no 我", "lah 你"].iter().map(|s| Transcript::parse(s, &lex)).collect();
    MixedVocab::build(&ts, VocabMode::Char, None).unwrap()
}

pub fn small_config(head: HeadMode, seed: u64) -> ModelConfig {
    ModelConfig {
        input_dim: 4,
        enc_layers: 1,
        enc_units: 5,
        subsample: vec![2],
        embed_dim: 3,
        dec_units: 5,
        att_dim: 4,
        att_channels: 2,
        att_width: 3,
        head,
        cf_lm_dim: 3,
        cf_hidden: 4,
        init_scale: 0.8,
        seed,
        ..ModelConfig::default()
    }
}

pub type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> OpCase {
    OpCase { name, inputs, f: Box::new(f) }
}

/// One instance of every tape op plus the loss nodes built on top of them.
pub fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut m = |r: usize, c: usize| random_tensor(rng, r, c, -1.0, 1.0);
    vec![
        case("matmul", vec![m(2, 3), m(3, 4)], |g, x| g.matmul(x[0], x[1]).unwrap()),
        case("add", vec![m(2, 3), m(2, 3)], |g, x| g.add(x[0], x[1]).unwrap()),
        case("sub", vec![m(2, 3), m(2, 3)], |g, x| g.sub(x[0], x[1]).unwrap()),
        case("mul", vec![m(2, 3), m(2, 3)], |g, x| g.mul(x[0], x[1]).unwrap()),
        case("add_broadcast_row", vec![m(3, 4), m(1, 4)], |g, x| g.add_broadcast(x[0], x[1]).unwrap()),
        case("add_broadcast_scalar", vec![m(3, 2), m(1, 1)], |g, x| g.add_broadcast(x[0], x[1]).unwrap()),
        case("scale", vec![m(2, 3)], |g, x| g.scale(x[0], -2.5)),
        case("sigmoid", vec![m(2, 3)], |g, x| g.sigmoid(x[0])),
        case("tanh", vec![m(2, 3)], |g, x| g.tanh(x[0])),
        case("exp", vec![m(2, 3)], |g, x| g.exp(x[0])),
        case("log_softmax", vec![m(3, 5)], |g, x| g.log_softmax(x[0])),
        case("softmax", vec![m(3, 5)], |g, x| g.softmax(x[0])),
        case("concat_cols", vec![m(2, 3), m(2, 2)], |g, x| g.concat_cols(&[x[0], x[1]]).unwrap()),
        case("concat_rows", vec![m(2, 3), m(1, 3)], |g, x| g.concat_rows(&[x[0], x[1]]).unwrap()),
        case("gather_rows", vec![m(4, 3)], |g, x| g.gather_rows(x[0], &[3, 0, 3, 1]).unwrap()),
        case("slice_rows", vec![m(5, 2)], |g, x| g.slice_rows(x[0], 1, 3).unwrap()),
        case("slice_cols", vec![m(3, 5)], |g, x| g.slice_cols(x[0], 1, 3).unwrap()),
        case("transpose", vec![m(2, 3)], |g, x| g.transpose(x[0])),
        case("sum", vec![m(3, 3)], |g, x| g.sum(x[0])),
        case("unfold_row", vec![m(1, 6)], |g, x| g.unfold(x[0], 3).unwrap()),
        case("unfold_col", vec![m(5, 1)], |g, x| g.unfold(x[0], 5).unwrap()),
        case("ctc_loss", vec![m(5, 4)], |g, x| {
            let lp = g.log_softmax(x[0]);
            ctc_loss_node(g, lp, &[1, 2, 2], 0).unwrap()
        }),
        case("lid_loss", vec![m(4, 3)], |g, x| lid_loss(g, x[0], &[0, 2, 1, 1]).unwrap()),
        case("smoothed_cross_entropy", vec![m(4, 5)], |g, x| {
            let lp = g.log_softmax(x[0]);
            smoothed_cross_entropy(g, lp, &[1, 4, 0, 2], 0.1).unwrap()
        }),
        case("hier_softmax", vec![m(1, 2), m(1, 5)], |g, x| hier_softmax(g, x[0], x[1], &[0..2, 2..5]).unwrap()),
        case("five_op_graph", vec![m(2, 3), m(3, 4), m(2, 4)], |g, x| {
            let a = g.matmul(x[0], x[1]).unwrap();
            let b = g.tanh(a);
            let c = g.mul(b, x[2]).unwrap();
            g.log_softmax(c)
        }),
    ]
}

/// Scalar readout `Σ w ∘ f(x)` with fixed random weights.
fn readout(g: &mut Graph, out: Var) -> Var {
    if g.value(out).numel() == 1 {
        return out;
    }
    let shape = g.shape(out).to_vec();
    let mut r = rng(shape.iter().product::<usize>() as u64);
    let w: Vec<f64> = (0..shape.iter().product()).map(|_| r.random_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(shape, w).unwrap());
    let y = g.mul(out, w).unwrap();
    g.sum(y)
}

fn eval_case(c: &OpCase, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (c.f)(&mut g, &xs);
    let y = readout(&mut g, out);
    g.scalar_value(y)
}

/// Worst over inputs of `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`,
/// numeric by central differences.
pub fn op_grad_error(c: &OpCase, step: f64) -> f64 {
    let mut g = Graph::new();
    let xs: Vec<Var> = c.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (c.f)(&mut g, &xs);
    let y = readout(&mut g, out);
    g.backward(y).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let analytic = g.grad(*x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; c.inputs[i].numel()]);
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|k| {
                let mut plus = c.inputs.clone();
                plus[i].data_mut()[k] += step;
                let mut minus = c.inputs.clone();
                minus[i].data_mut()[k] -= step;
                (eval_case(c, &plus) - eval_case(c, &minus)) / (2.0 * step)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let d = norm(&diff);
        if d > 0.0 {
            worst = worst.max(d / norm(&analytic).max(norm(&numeric)).max(1e-7));
        }
    }
    worst
}

fn toy_batch(rng: &mut ChaCha8Rng, dim: usize) -> Vec<(Tensor, Vec<usize>)> {
    [(6, vec![6, 8]), (5, vec![7])]
        .into_iter()
        .map(|(t, units)| (random_tensor(rng, t, dim, -1.0, 1.0), units))
        .collect()
}

fn objective(model: &AsrModel, batch: &[(Tensor, Vec<usize>)], opts: &LossOptions) -> f64 {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let feats: Vec<_> = batch.iter().map(|(f, u)| (g.constant(f.clone()), u.as_slice())).collect();
    let parts = model.mtl_loss(&mut g, &b, &feats, opts).unwrap();
    g.scalar_value(parts.total)
}

pub fn toy_model(head: HeadMode) -> AsrModel {
    let vocab = toy_vocab();
    let config = ModelConfig {
        input_dim: 3,
        enc_layers: 1,
        enc_units: 3,
        subsample: vec![2],
        embed_dim: 2,
        dec_units: 3,
        att_dim: 3,
        att_channels: 2,
        att_width: 3,
        head,
        cf_lm_dim: 2,
        cf_hidden: 3,
        init_scale: 0.5,
        seed: 4,
        ..ModelConfig::default()
    };
    let lm = (head == HeadMode::ColdFusion).then(|| {
        RnnLm::new(LmConfig { embed_dim: 2, units: 3, init_scale: 0.5, seed: 5 }, vocab.len()).unwrap()
    });
    AsrModel::new(config, &vocab, lm).unwrap()
}

/// Worst relative error of the full training objective's parameter gradients
/// against a fourth-order central difference, on a two-utterance batch.
pub fn objective_grad_error(head: HeadMode, opts: LossOptions) -> f64 {
    let mut model = toy_model(head);
    let batch = toy_batch(&mut rng(17), 3);

    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let feats: Vec<_> = batch.iter().map(|(f, u)| (g.constant(f.clone()), u.as_slice())).collect();
    let parts = model.mtl_loss(&mut g, &b, &feats, &opts).unwrap();
    assert_eq!(parts.ctc_skipped, 0);
    g.backward(parts.total).unwrap();
    let analytic: Vec<Vec<f64>> = b
        .params
        .iter()
        .map(|&p| g.grad(p).map_or(vec![0.0; g.value(p).numel()], <[f64]>::to_vec))
        .collect();

    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let orig = model.params.tensor(pi).data()[k];
            let mut at = |x: f64| {
                model.params.tensor_mut(pi).data_mut()[k] = x;
                objective(&model, &batch, &opts)
            };
            let numeric = (-at(orig + 2.0 * h) + 8.0 * at(orig + h) - 8.0 * at(orig - h) + at(orig - 2.0 * h)) / (12.0 * h);
            model.params.tensor_mut(pi).data_mut()[k] = orig;
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}
