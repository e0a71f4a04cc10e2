mod common;

use std::collections::BTreeMap;

use common::{random_logprobs, random_tensor, rng, small_config, toy_vocab, MapScorer, TableScorer};
use cswitch::ctc::LogProbs;
use cswitch::decode::{
    beam_search, beam_search_with, exhaustive_search_with, shallow_fuse, DecodeConfig, Fusion, NBest, NullScorer,
    Specials,
};
use cswitch::model::{AsrModel, HeadMode, LmConfig, RnnLm};
use proptest::prelude::*;

const BLANK: usize = 0;
const A: usize = 1;
const B: usize = 2;
const EOS: usize = 3;
const SPECIALS: Specials = Specials { blank: BLANK, eos: EOS };

fn dist(a: f64, b: f64, eos: f64) -> Vec<f64> {
    vec![1e-9f64.ln(), a.ln(), b.ln(), eos.ln()]
}

fn attention_only(beam: usize) -> DecodeConfig {
    DecodeConfig { beam, ctc_weight: 0.0, end_detect: None, ..DecodeConfig::default() }
}

fn search(scorer: &mut MapScorer, beam: usize, max_len: usize) -> NBest {
    beam_search_with(scorer, None, None::<&mut NullScorer>, max_len, SPECIALS, &attention_only(beam)).unwrap()
}

/// P(a)=0.6, P(b)=0.4 first; after `a` everything is a third; after `b` the
/// end symbol has 0.9.
fn greedy_trap() -> MapScorer {
    let mut table = BTreeMap::new();
    table.insert(vec![], dist(0.6, 0.4, 1e-9));
    table.insert(vec![A], dist(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0));
    table.insert(vec![B], dist(0.05, 0.05, 0.9));
    MapScorer { table, default: dist(0.01, 0.01, 0.98), sos: EOS }
}

#[test]
fn wider_beam_escapes_greedy_trap() {
    let narrow = search(&mut greedy_trap(), 1, 3);
    let wide = search(&mut greedy_trap(), 2, 3);
    assert_eq!(narrow.best().units[0], A);
    assert_eq!(wide.best().units, vec![B]);
    assert!((wide.best().score - (0.4f64 * 0.9).ln()).abs() < 1e-12);
    let exact = exhaustive_search_with(&mut greedy_trap(), None, None::<&mut NullScorer>, 4, 3, SPECIALS, &attention_only(1)).unwrap();
    assert_eq!(exact.units, wide.best().units);
}

#[test]
fn exhaustive_edge_cases() {
    let single = Specials { blank: 0, eos: 2 };
    let mut table = BTreeMap::new();
    table.insert(vec![], vec![1e-9f64.ln(), 0.9f64.ln(), 0.1f64.ln()]);
    let mut scorer = MapScorer { table, default: vec![1e-9f64.ln(), 0.01f64.ln(), 0.99f64.ln()], sos: 2 };
    let cfg = attention_only(1);
    let h = exhaustive_search_with(&mut scorer, None, None::<&mut NullScorer>, 3, 1, single, &cfg).unwrap();
    assert_eq!(h.units, vec![1]);
    let h = exhaustive_search_with(&mut greedy_trap(), None, None::<&mut NullScorer>, 4, 0, SPECIALS, &cfg).unwrap();
    assert!(h.units.is_empty());
    assert!((h.score - 1e-9f64.ln()).abs() < 1e-12);
}

#[test]
fn exhausted_budget_is_flagged() {
    let mut scorer = MapScorer { table: BTreeMap::new(), default: dist(0.5, 0.5, 0.0), sos: EOS };
    let n = search(&mut scorer, 1, 2);
    assert!(!n.complete());
    assert_eq!(n.best().units, vec![A, A]);
}

#[test]
fn shallow_fusion_arithmetic() {
    let cfg = DecodeConfig { ctc_weight: 0.0, lm_weight: 1.0, fusion: Fusion::Shallow, ..DecodeConfig::default() };
    let first = shallow_fuse(-1.0, 0.0, -4.0, &cfg);
    let second = shallow_fuse(-3.0, 0.0, -0.5, &cfg);
    assert_eq!((first, second), (-5.0, -3.5));
    assert!(second > first);
    let off = DecodeConfig { lm_weight: 0.0, ..cfg.clone() };
    assert_eq!(shallow_fuse(-1.0, 0.0, -4.0, &off), -1.0);
    let cold = DecodeConfig { fusion: Fusion::Cold, ..cfg };
    assert_eq!(cold.effective_lm_weight(), 0.0);
    assert_eq!(shallow_fuse(-1.0, 0.0, -4.0, &cold), -1.0);
}

fn same(a: &NBest, b: &NBest) -> bool {
    a.hyps.len() == b.hyps.len()
        && a.hyps.iter().zip(&b.hyps).all(|(x, y)| x.units == y.units && x.score.to_bits() == y.score.to_bits())
}

#[test]
fn model_decoding_is_deterministic() {
    let vocab = toy_vocab();
    let m = AsrModel::new(small_config(HeadMode::Hierarchical, 3), &vocab, None).unwrap();
    let feats = random_tensor(&mut rng(3), 12, 4, -1.0, 1.0);
    let cfg = DecodeConfig { beam: 3, ..DecodeConfig::default() };
    assert!(same(&beam_search(&m, &feats, None, &cfg).unwrap(), &beam_search(&m, &feats, None, &cfg).unwrap()));
}

#[test]
fn cold_fusion_adds_no_decode_time_lm_term() {
    let vocab = toy_vocab();
    let lm = RnnLm::new(LmConfig { embed_dim: 3, units: 4, init_scale: 0.8, seed: 1 }, vocab.len()).unwrap();
    let m = AsrModel::new(small_config(HeadMode::ColdFusion, 4), &vocab, Some(lm.clone())).unwrap();
    let feats = random_tensor(&mut rng(4), 12, 4, -1.0, 1.0);
    let cfg = DecodeConfig { beam: 3, fusion: Fusion::Cold, lm_weight: 0.7, ..DecodeConfig::default() };
    let with = beam_search(&m, &feats, Some(&lm), &cfg).unwrap();
    let without = beam_search(&m, &feats, None, &cfg).unwrap();
    assert!(same(&with, &without));
    assert!(with.hyps.iter().all(|h| h.lm == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beam_never_beats_the_oracle(seed in 0u64..10_000, beam in 1usize..5, k in 3usize..5, w in 0.0f64..1.0) {
        let specials = Specials { blank: 0, eos: k - 1 };
        let ctc = random_logprobs(&mut rng(seed), 5, k);
        let lp = || LogProbs::new(&ctc, k, 0).unwrap();
        let cfg = DecodeConfig { beam, ctc_weight: w, end_detect: None, ..DecodeConfig::default() };
        let mut scorer = TableScorer { vocab: k, seed, temperature: 2.0 };
        let best = exhaustive_search_with(&mut scorer, Some(lp()), None::<&mut NullScorer>, k, 3, specials, &cfg).unwrap();
        let n = beam_search_with(&mut scorer, Some(lp()), None::<&mut NullScorer>, 3, specials, &cfg).unwrap();
        for h in n.hyps.iter().filter(|h| h.finished) {
            prop_assert!(h.score <= best.score + 1e-12);
        }
        let wide = DecodeConfig { beam: 64, ..cfg };
        let n = beam_search_with(&mut scorer, Some(lp()), None::<&mut NullScorer>, 3, specials, &wide).unwrap();
        prop_assert_eq!(&n.best().units, &best.units);
        prop_assert!((n.best().score - best.score).abs() < 1e-12);
    }
}
