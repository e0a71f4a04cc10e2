//! End-to-end speech recognition for Mandarin-English code-switching.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and a tape-based reverse-mode autodiff graph.
//! * [`corpus`]: transcripts, manifests, label merging, statistics and a
//!   synthetic bilingual corpus generator.
//! * [`signal`]: waveform synthesis, speed modification, log-mel features.
//! * [`subword`]: BPE training and the mixed unit inventory.
//! * [`ctc`]: CTC loss, its brute-force oracle, and prefix scoring.
//! * [`model`]: the joint CTC-attention network, hierarchical output head,
//!   RNN language model and cold-fusion head, plus training.
//! * [`decode`]: joint beam search with shallow/cold fusion.
//! * [`scoring`]: mixed error rate and switch-point diagnostics.
//! * [`experiment`]: experiment configs, pipeline stages and report grids.

pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod experiment;
pub mod model;
pub mod scoring;
pub mod signal;
pub mod subword;
pub mod tensor;
