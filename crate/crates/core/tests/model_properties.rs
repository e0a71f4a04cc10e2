mod common;

use common::{random_tensor, rng, small_config, toy_vocab};
use cswitch::model::{
    hier_softmax, lid_loss, train, train_lm, AsrModel, Example, HeadMode, LmConfig, LmTrainConfig, LossOptions,
    ModelConfig, RnnLm, TrainConfig,
};
use cswitch::subword::SOS_EOS_ID;
use cswitch::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn lm(vocab: usize, seed: u64) -> RnnLm {
    RnnLm::new(LmConfig { embed_dim: 3, units: 4, init_scale: 0.8, seed }, vocab).unwrap()
}

fn model(head: HeadMode, seed: u64) -> AsrModel {
    let vocab = toy_vocab();
    let lm = (head == HeadMode::ColdFusion).then(|| lm(vocab.len(), seed + 100));
    AsrModel::new(small_config(head, seed), &vocab, lm).unwrap()
}

#[test]
fn encoder_length_follows_subsampling() {
    let vocab = toy_vocab();
    for (schedule, expected) in [(vec![2, 2], 2), (vec![1, 1], 8), (vec![1], 8), (vec![3], 3)] {
        let config = ModelConfig { enc_layers: schedule.len(), subsample: schedule.clone(), ..small_config(HeadMode::Flat, 1) };
        assert_eq!(config.output_length(8), expected, "{schedule:?}");
        let m = AsrModel::new(config, &vocab, None).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let x = g.constant(random_tensor(&mut rng(1), 8, 4, -1.0, 1.0));
        let enc = m.encode(&mut g, &b, x).unwrap();
        assert_eq!(enc.len, expected, "{schedule:?}");
        assert_eq!(g.value(enc.h).shape(), &[expected, 5]);
    }
}

#[test]
fn single_frame_gets_all_attention() {
    let m = model(HeadMode::Flat, 2);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let h = g.constant(random_tensor(&mut rng(2), 1, 5, -1.0, 1.0));
    let enc = m.encoder_output(&mut g, &b, h).unwrap();
    let dec_h = g.constant(random_tensor(&mut rng(3), 1, 5, -1.0, 1.0));
    let prev = g.constant(Tensor::full(&[1, 1], 1.0));
    let (w, _) = m.attend(&mut g, &b, &enc, dec_h, prev).unwrap();
    assert_eq!(g.value(w).data(), &[1.0]);
}

#[test]
fn zero_kernel_leaves_content_attention() {
    let mut m = model(HeadMode::Flat, 3);
    let conv = m.params.id("att.conv").unwrap();
    m.params.tensor_mut(conv).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut r = rng(4);
    let h_val = random_tensor(&mut r, 6, 5, -1.0, 1.0);
    let q_val = random_tensor(&mut r, 1, 5, -1.0, 1.0);
    let prev_val = random_tensor(&mut r, 1, 6, 0.0, 1.0);

    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let h = g.constant(h_val.clone());
    let enc = m.encoder_output(&mut g, &b, h).unwrap();
    let q = g.constant(q_val.clone());
    let prev = g.constant(prev_val);
    let (w, _) = m.attend(&mut g, &b, &enc, q, prev).unwrap();

    let p = |name: &str| m.params.get(name).unwrap();
    let (we, wd, bd, v) = (p("att.enc.w"), p("att.dec.w"), p("att.dec.b"), p("att.v.w"));
    let att_dim = we.cols();
    let query: Vec<f64> = (0..att_dim)
        .map(|j| bd.at(0, j) + (0..5).map(|k| q_val.at(0, k) * wd.at(k, j)).sum::<f64>())
        .collect();
    let energy: Vec<f64> = (0..6)
        .map(|i| {
            (0..att_dim)
                .map(|j| {
                    let key: f64 = (0..5).map(|k| h_val.at(i, k) * we.at(k, j)).sum();
                    v.at(j, 0) * (key + query[j]).tanh()
                })
                .sum()
        })
        .collect();
    let z: f64 = energy.iter().map(|e| e.exp()).sum();
    for (i, e) in energy.iter().enumerate() {
        assert!((g.value(w).data()[i] - e.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn attention_weights_normalize() {
    let m = model(HeadMode::Flat, 5);
    let mut r = rng(5);
    for _ in 0..50 {
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let x = g.constant(random_tensor(&mut r, 9, 4, -2.0, 2.0));
        let enc = m.encode(&mut g, &b, x).unwrap();
        let mut state = m.initial_state(&mut g, &enc);
        let mut prev = SOS_EOS_ID;
        for _ in 0..5 {
            let out = m.decode_step(&mut g, &b, &enc, &state, prev).unwrap();
            let w = g.value(out.att).data();
            assert!(w.iter().all(|&v| v >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            state = out.state;
            prev = r.random_range(0..m.vocab_size());
        }
    }
}

#[test]
fn hierarchical_unit_probability() {
    let mut g = Graph::new();
    let class = g.constant(Tensor::row(vec![0.4f64.ln(), 0.6f64.ln()]));
    let token = g.constant(Tensor::row(vec![0.3, -1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    let lp = hier_softmax(&mut g, class, token, &[0..3, 3..8]).unwrap();
    for &v in &g.value(lp).data()[3..] {
        assert!((v.exp() - 0.12).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn hierarchical_factorization_and_shift(
        class in prop::collection::vec(-3.0f64..3.0, 3),
        token in prop::collection::vec(-3.0f64..3.0, 7),
        shift in -50.0f64..50.0,
    ) {
        let blocks = [0..2, 2..5, 5..7];
        let mut g = Graph::new();
        let c = g.constant(Tensor::row(class.clone()));
        let t = g.constant(Tensor::row(token.clone()));
        let lp = hier_softmax(&mut g, c, t, &blocks).unwrap();
        let lp = g.value(lp).data().to_vec();
        let cz = class.iter().map(|v| v.exp()).sum::<f64>().ln();
        for (k, r) in blocks.iter().enumerate() {
            let tz = token[r.clone()].iter().map(|v| v.exp()).sum::<f64>().ln();
            for u in r.clone() {
                prop_assert!((lp[u] - ((class[k] - cz) + (token[u] - tz))).abs() < 1e-12);
            }
        }
        prop_assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);

        let shifted: Vec<f64> = class.iter().map(|v| v + shift).collect();
        let c2 = g.constant(Tensor::row(shifted));
        let lp2 = hier_softmax(&mut g, c2, t, &blocks).unwrap();
        let argmax = |xs: &[f64]| (0..xs.len()).max_by(|&a, &b| xs[a].total_cmp(&xs[b])).unwrap();
        prop_assert_eq!(argmax(&lp), argmax(g.value(lp2).data()));
    }
}

#[test]
fn closed_gate_ignores_lm_state() {
    let mut m = model(HeadMode::ColdFusion, 6);
    let gate_b = m.params.id("cf.gate.b").unwrap();
    m.params.tensor_mut(gate_b).data_mut().iter_mut().for_each(|v| *v = -1e3);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let x = g.constant(random_tensor(&mut rng(6), 8, 4, -1.0, 1.0));
    let enc = m.encode(&mut g, &b, x).unwrap();
    let state = m.initial_state(&mut g, &enc);
    let base = m.decode_step(&mut g, &b, &enc, &state, SOS_EOS_ID).unwrap();
    assert!(g.value(base.gate.unwrap()).data().iter().all(|&v| v < 1e-300));
    let mut r = rng(7);
    for _ in 0..5 {
        let mut perturbed = state;
        let h = g.constant(random_tensor(&mut r, 1, 4, -1.0, 1.0));
        let c = g.constant(random_tensor(&mut r, 1, 4, -1.0, 1.0));
        perturbed.lm = Some(cswitch::model::LstmState { h, c });
        let out = m.decode_step(&mut g, &b, &enc, &perturbed, SOS_EOS_ID).unwrap();
        assert_eq!(g.value(out.logp).data(), g.value(base.logp).data());
    }
}

#[test]
fn cold_fusion_state_dimension() {
    let m = model(HeadMode::ColdFusion, 7);
    let c = m.config();
    let gate = m.params.get("cf.gate.w").unwrap();
    assert_eq!(gate.shape(), &[c.cf_hidden + c.cf_lm_dim, c.cf_lm_dim]);
    assert_eq!(m.params.get("cf.fused.0.w").unwrap().rows(), c.cf_hidden + c.cf_lm_dim);
}

#[test]
fn lid_loss_endpoints() {
    let mut g = Graph::new();
    let perfect = g.constant(Tensor::matrix(3, 3, vec![1e3, 0.0, 0.0, 0.0, 1e3, 0.0, 0.0, 0.0, 1e3]).unwrap());
    let l = lid_loss(&mut g, perfect, &[0, 1, 2]).unwrap();
    assert_eq!(g.scalar_value(l), 0.0);
    let uniform = g.constant(Tensor::zeros(&[4, 3]));
    let l = lid_loss(&mut g, uniform, &[0, 2, 1, 1]).unwrap();
    assert!((g.scalar_value(l) - 3f64.ln()).abs() < 1e-12);
    assert!(lid_loss(&mut g, uniform, &[0, 1]).is_err());
}

fn toy_examples() -> Vec<Example> {
    let mut r = rng(8);
    [vec![6, 8], vec![7], vec![9, 6, 7]]
        .into_iter()
        .enumerate()
        .map(|(i, units)| Example { id: format!("u{i}"), features: random_tensor(&mut r, 10, 4, -1.0, 1.0), units })
        .collect()
}

fn gradients(m: &AsrModel, lambda: f64) -> Vec<(String, Vec<f64>)> {
    let mut g = Graph::new();
    let b = m.bind(&mut g, true);
    let ex = toy_examples();
    let feats: Vec<_> = ex.iter().map(|e| g.constant(e.features.clone())).collect();
    let batch: Vec<_> = feats.iter().zip(&ex).map(|(&f, e)| (f, e.units.as_slice())).collect();
    let opts = LossOptions { lambda, ..LossOptions::default() };
    let parts = m.mtl_loss(&mut g, &b, &batch, &opts).unwrap();
    g.backward(parts.total).unwrap();
    m.params
        .names()
        .iter()
        .zip(&b.params)
        .map(|(n, &p)| (n.clone(), g.grad(p).map_or_else(Vec::new, <[f64]>::to_vec)))
        .collect()
}

#[test]
fn pure_ctc_leaves_attention_untouched() {
    let m = model(HeadMode::Flat, 9);
    for (name, grad) in gradients(&m, 1.0) {
        let decoder_side = name.starts_with("att.") || name.starts_with("dec.") || name.starts_with("out");
        if decoder_side {
            assert!(grad.iter().all(|&v| v == 0.0), "{name}");
        }
        if name.starts_with("ctc.") {
            assert!(grad.iter().any(|&v| v != 0.0), "{name}");
        }
    }
    for (name, grad) in gradients(&m, 0.0) {
        if name.starts_with("ctc.") {
            assert!(grad.iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

fn trained(lambda: f64, seed: u64) -> Vec<u8> {
    let mut m = model(HeadMode::Flat, 10);
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed,
        loss: LossOptions { lambda, ..LossOptions::default() },
        ..TrainConfig::default()
    };
    train(&mut m, &toy_examples(), &[], &tc, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    std::fs::read(dir.path().join("model.ckpt")).unwrap()
}

#[test]
fn training_is_deterministic_and_lambda_matters() {
    let a = trained(0.5, 1);
    assert_eq!(a, trained(0.5, 1));
    assert_ne!(a, trained(1.0, 1));
    assert_ne!(a, trained(0.5, 2));
}

#[test]
fn lm_learns_a_bigram() {
    let mut m = lm(8, 3);
    let seqs = vec![vec![6, 7]; 8];
    let cfg = LmTrainConfig { epochs: 60, batch_size: 4, learning_rate: 0.05, ..LmTrainConfig::default() };
    let hist = train_lm(&mut m, &seqs, &cfg).unwrap();
    assert!(hist.last().unwrap() < &hist[0]);
    let p = (m.log_prob(&[6, 7]).unwrap() - m.log_prob(&[6]).unwrap()).exp();
    assert!(p > 0.9, "P(b|a) = {p}");
    assert_eq!(m.log_prob(&[]).unwrap(), 0.0);
}
