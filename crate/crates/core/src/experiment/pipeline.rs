use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::system::{MonoMix, SystemSpec, Units};
use super::{io_err, ExperimentConfig, ExperimentError, Result};
use crate::corpus::{gen_synthetic, merge_nonlinguistic, Dataset, Lexicon, Manifest, Split, SynthSpec, Utterance};
use crate::decode::{beam_search, nbest_tsv, DecodeConfig, NBEST_HEADER};
use crate::model::{train, train_lm, AsrModel, Example, ModelConfig, RnnLm, TrainConfig};
use crate::scoring::{mer, ScoreReport};
use crate::signal::{logmel_features, perturb_3way, slow_down, CmvnStats, FeatureMatrix};
use crate::subword::{english_word_counts, MixedVocab, VocabMode};
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainBpe,
    Prep,
    LmTrain,
    Train,
    Decode,
    Score,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::TrainBpe,
        Stage::Prep,
        Stage::LmTrain,
        Stage::Train,
        Stage::Decode,
        Stage::Score,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainBpe => "train-bpe",
            Stage::Prep => "prep",
            Stage::LmTrain => "lm-train",
            Stage::Train => "train",
            Stage::Decode => "decode",
            Stage::Score => "score",
        }
    }

    /// Artifact directory inside the experiment directory.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenData => "data",
            Stage::TrainBpe => "bpe",
            Stage::Prep => "prep",
            Stage::LmTrain => "lm",
            Stage::Train => "model",
            Stage::Decode => "decode",
            Stage::Score => "score",
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn stamp_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(stage.dir()).join("DONE")
}

fn stamp(dir: &Path, stage: Stage) -> Result<()> {
    write(&stamp_path(dir, stage), format!("{}\tformat {FORMAT_VERSION}\n", stage.name()))
}

fn require(dir: &Path, stage: Stage) -> Result<()> {
    let p = stamp_path(dir, stage);
    if p.is_file() {
        Ok(())
    } else {
        Err(ExperimentError::MissingStage {
            stage: stage.name(),
            artifact: p,
        })
    }
}

fn begin(dir: &Path, cfg: &ExperimentConfig) -> Result<SystemSpec> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(&dir.join("config.toml"), cfg.to_toml()?)?;
    cfg.system_spec()
}

fn mono_specs(cfg: &ExperimentConfig, mix: MonoMix) -> Vec<(&'static str, SynthSpec)> {
    let (man, eng) = mix.fractions();
    let n = cfg.data.train.utterances as f64;
    let mut out = Vec::new();
    for (name, frac, start, offset) in [("mono_man", man, 1.0, 101), ("mono_eng", eng, 0.0, 202)] {
        let count = (frac * n).round() as usize;
        if count > 0 {
            out.push((
                name,
                SynthSpec {
                    utterances: count,
                    switch_prob: 0.0,
                    start_mandarin_prob: start,
                    id_prefix: name.replace('_', "-"),
                    split: Split::Train,
                    seed: cfg.data.train.seed + offset,
                    ..cfg.data.train.clone()
                },
            ));
        }
    }
    out
}

/// Synthesizes the three splits (and monolingual pools when the system uses them).
pub fn gen_data(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let spec = begin(dir, cfg)?;
    let data = dir.join(Stage::GenData.dir());
    for split in Split::ALL {
        let corpus = gen_synthetic(cfg.data.spec(split))?;
        corpus.dataset.save(&data, "wav")?;
    }
    if let Some(mix) = spec.mono {
        for (name, s) in mono_specs(cfg, mix) {
            gen_synthetic(&s)?.dataset.save(&data.join(name), "wav")?;
        }
    }
    stamp(dir, Stage::GenData)
}

fn load_split(data: &Path, split: Split, lexicon: &Lexicon) -> Result<Dataset> {
    let path = data.join(format!("{split}.tsv"));
    let manifest = Manifest::read(split, &path)?;
    Ok(Dataset::load(&manifest, data, lexicon)?)
}

/// Training split plus any monolingual additions, before label mapping.
fn training_corpus(dir: &Path, cfg: &ExperimentConfig, spec: &SystemSpec, lexicon: &Lexicon) -> Result<(Dataset, Vec<Dataset>)> {
    let data = dir.join(Stage::GenData.dir());
    let train = load_split(&data, Split::Train, lexicon)?;
    let mut mono = Vec::new();
    if let Some(mix) = spec.mono {
        for (name, _) in mono_specs(cfg, mix) {
            let d = data.join(name);
            if !d.join("train.tsv").is_file() {
                return Err(ExperimentError::MissingStage {
                    stage: Stage::GenData.name(),
                    artifact: d.join("train.tsv"),
                });
            }
            mono.push(load_split(&d, Split::Train, lexicon)?);
        }
    }
    Ok((train, mono))
}

fn subword_count(cfg: &ExperimentConfig, spec: &SystemSpec) -> Option<usize> {
    match spec.units {
        Units::Char => None,
        Units::Subword(n) => Some(n.unwrap_or(cfg.subword_units)),
    }
}

/// Learns the English subword inventory from the training text.
pub fn train_bpe(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let spec = begin(dir, cfg)?;
    require(dir, Stage::GenData)?;
    let out = dir.join(Stage::TrainBpe.dir());
    if let Some(n) = subword_count(cfg, &spec) {
        let lexicon = Lexicon::bundled();
        let (train, mono) = training_corpus(dir, cfg, &spec, &lexicon)?;
        let counts = english_word_counts(train.utterances.iter().chain(mono.iter().flat_map(|d| &d.utterances)).map(|u| &u.transcript));
        let transcripts: Vec<_> = train.utterances.iter().map(|u| u.transcript.clone()).collect();
        let vocab = MixedVocab::build(&transcripts, VocabMode::Subword(n), Some(&counts))?;
        let table = vocab.merges().expect("subword vocabulary has merges");
        let mut tsv = String::new();
        for (w, c) in &counts {
            let _ = writeln!(tsv, "{w}\t{c}");
        }
        write(&out.join("word_counts.tsv"), tsv)?;
        write(&out.join("merges.txt"), table.to_text())?;
    }
    stamp(dir, Stage::TrainBpe)
}

fn read_word_counts(path: &Path) -> Result<BTreeMap<String, u64>> {
    let mut out = BTreeMap::new();
    for line in read(path)?.lines().filter(|l| !l.is_empty()) {
        let (w, c) = line.split_once('\t').ok_or_else(|| ExperimentError::Artifact {
            path: path.to_path_buf(),
            reason: format!("bad line {line:?}"),
        })?;
        let c = c.parse().map_err(|_| ExperimentError::Artifact {
            path: path.to_path_buf(),
            reason: format!("bad count {c:?}"),
        })?;
        out.insert(w.to_string(), c);
    }
    Ok(out)
}

fn relabel(d: &mut Dataset, label: u8, lexicon: &Lexicon) {
    if label == 2 {
        for u in &mut d.utterances {
            let t = merge_nonlinguistic(&u.transcript, lexicon);
            *u = Utterance::new(u.id.clone(), u.speaker.clone(), u.audio.clone(), t);
        }
    }
}

fn features(d: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<FeatureMatrix>> {
    d.utterances
        .iter()
        .map(|u| {
            let w = u.waveform().ok_or_else(|| crate::signal::SignalError::NoWaveform(u.id.clone()))?;
            Ok(logmel_features(w, &cfg.frontend)?)
        })
        .collect()
}

/// Label mapping, augmentation, vocabulary, features and references.
pub fn prep(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let spec = begin(dir, cfg)?;
    require(dir, Stage::GenData)?;
    let subword = subword_count(cfg, &spec);
    if subword.is_some() {
        require(dir, Stage::TrainBpe)?;
    }
    let lexicon = Lexicon::bundled();
    let data = dir.join(Stage::GenData.dir());
    let (mut train, mono) = training_corpus(dir, cfg, &spec, &lexicon)?;
    let mut dev = load_split(&data, Split::Dev, &lexicon)?;
    let mut eval = load_split(&data, Split::Eval, &lexicon)?;
    if spec.perturb {
        train = perturb_3way(&train)?;
    }
    for m in mono {
        train.utterances.extend(m.utterances);
    }
    for d in [&mut train, &mut dev, &mut eval] {
        relabel(d, cfg.label, &lexicon);
        if let Some(f) = spec.slow {
            *d = slow_down(d, f)?;
        }
    }

    let transcripts: Vec<_> = train.utterances.iter().map(|u| u.transcript.clone()).collect();
    let vocab = match subword {
        None => MixedVocab::build(&transcripts, VocabMode::Char, None)?,
        Some(n) => {
            let counts = read_word_counts(&dir.join(Stage::TrainBpe.dir()).join("word_counts.tsv"))?;
            MixedVocab::build(&transcripts, VocabMode::Subword(n), Some(&counts))?
        }
    };
    let out = dir.join(Stage::Prep.dir());
    write(&out.join("vocab.txt"), vocab.to_text())?;

    let train_feats = features(&train, cfg)?;
    let stats = CmvnStats::estimate(&train_feats)?;
    write(
        &out.join("cmvn.json"),
        serde_json::to_string_pretty(&stats).expect("plain data") + "\n",
    )?;
    for (d, feats) in [(&train, Some(train_feats)), (&dev, None), (&eval, None)] {
        let feats = match feats {
            Some(f) => f,
            None => features(d, cfg)?,
        };
        let mut entries = Vec::with_capacity(d.len());
        let mut units = String::new();
        let mut refs = String::new();
        for (u, f) in d.utterances.iter().zip(&feats) {
            let f = stats.apply(f);
            entries.push((u.id.clone(), Tensor::matrix(f.frames, f.n_mels, f.data)?));
            let ids: Vec<String> = vocab.encode(&u.transcript).ids.iter().map(usize::to_string).collect();
            let _ = writeln!(units, "{}\t{}", u.id, ids.join(" "));
            let _ = writeln!(refs, "{}\t{}", u.id, u.transcript.surface());
        }
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries)?;
        write(&out.join(format!("{}.feats", d.split)), buf)?;
        write(&out.join(format!("{}.units.tsv", d.split)), units)?;
        write(&out.join(format!("{}.ref.tsv", d.split)), refs)?;
    }
    stamp(dir, Stage::Prep)
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    read(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (a, b) = l.split_once('\t').unwrap_or((l, ""));
            Ok((a.to_string(), b.to_string()))
        })
        .collect()
}

fn load_vocab(dir: &Path) -> Result<MixedVocab> {
    Ok(MixedVocab::parse(&read(&dir.join(Stage::Prep.dir()).join("vocab.txt"))?)?)
}

fn load_examples(dir: &Path, split: Split) -> Result<Vec<Example>> {
    let prep = dir.join(Stage::Prep.dir());
    let fpath = prep.join(format!("{split}.feats"));
    let bytes = fs::read(&fpath).map_err(io_err(&fpath))?;
    let feats = read_checkpoint(&bytes[..])?;
    let upath = prep.join(format!("{split}.units.tsv"));
    let units = read_pairs(&upath)?;
    if units.len() != feats.len() {
        return Err(ExperimentError::Artifact {
            path: upath,
            reason: format!("{} unit lines for {} feature matrices", units.len(), feats.len()),
        });
    }
    feats
        .into_iter()
        .zip(units)
        .map(|((id, features), (uid, ids))| {
            if id != uid {
                return Err(ExperimentError::Artifact {
                    path: upath.clone(),
                    reason: format!("id {uid:?} where {id:?} expected"),
                });
            }
            let units = ids
                .split_whitespace()
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| ExperimentError::Artifact {
                    path: upath.clone(),
                    reason: e.to_string(),
                })?;
            Ok(Example { id, features, units })
        })
        .collect()
}

fn model_config(cfg: &ExperimentConfig, spec: &SystemSpec) -> ModelConfig {
    ModelConfig {
        input_dim: cfg.frontend.n_mels,
        head: spec.head(),
        seed: cfg.seed,
        ..cfg.model.clone()
    }
}

fn train_config(cfg: &ExperimentConfig, spec: &SystemSpec) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.seed = cfg.seed;
    t.loss.with_lid = spec.lid;
    t
}

/// Recurrent LM over the training unit sequences.
pub fn lm_train_stage(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    begin(dir, cfg)?;
    require(dir, Stage::Prep)?;
    let vocab = load_vocab(dir)?;
    let seqs: Vec<Vec<usize>> = load_examples(dir, Split::Train)?.into_iter().map(|e| e.units).collect();
    let mut lm = RnnLm::new(cfg.lm.clone(), vocab.len())?;
    let history = train_lm(&mut lm, &seqs, &cfg.lm_train)?;
    let out = dir.join(Stage::LmTrain.dir());
    lm.save(&out)?;
    let mut log = String::new();
    for (i, loss) in history.iter().enumerate() {
        let _ = writeln!(log, "{}", serde_json::json!({ "epoch": i + 1, "loss": loss }));
    }
    write(&out.join("train.jsonl"), log)?;
    stamp(dir, Stage::LmTrain)
}

fn load_lm(dir: &Path) -> Result<RnnLm> {
    require(dir, Stage::LmTrain)?;
    Ok(RnnLm::load(&dir.join(Stage::LmTrain.dir()))?)
}

/// Joint CTC/attention training with best-dev selection.
pub fn train_stage(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let spec = begin(dir, cfg)?;
    require(dir, Stage::Prep)?;
    let lm = match spec.fusion {
        crate::decode::Fusion::Cold => Some(load_lm(dir)?),
        _ => None,
    };
    let vocab = load_vocab(dir)?;
    let train_set = load_examples(dir, Split::Train)?;
    let dev = load_examples(dir, Split::Dev)?;
    let mut model = AsrModel::new(model_config(cfg, &spec), &vocab, lm)?;
    let mut log = String::new();
    let outcome = train(&mut model, &train_set, &dev, &train_config(cfg, &spec), |e| {
        log.push_str(&serde_json::to_string(e).expect("plain data"));
        log.push('\n');
    })?;
    let out = dir.join(Stage::Train.dir());
    model.save(&out)?;
    write(&out.join("train.jsonl"), log)?;
    write(
        &out.join("best.json"),
        format!("{}\n", serde_json::json!({ "best_epoch": outcome.best_epoch, "best_loss": outcome.best_loss })),
    )?;
    stamp(dir, Stage::Train)
}

fn decode_config(cfg: &ExperimentConfig, spec: &SystemSpec) -> DecodeConfig {
    DecodeConfig {
        fusion: spec.fusion,
        ..cfg.decode.clone()
    }
}

/// Beam search over dev and eval; writes n-best lists and best hypotheses.
pub fn decode_stage(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let spec = begin(dir, cfg)?;
    require(dir, Stage::Train)?;
    let vocab = load_vocab(dir)?;
    let model = AsrModel::load(&dir.join(Stage::Train.dir()))?;
    let dcfg = decode_config(cfg, &spec);
    let lm = match spec.fusion {
        crate::decode::Fusion::Shallow => Some(load_lm(dir)?),
        _ => None,
    };
    let out = dir.join(Stage::Decode.dir());
    for split in [Split::Dev, Split::Eval] {
        let mut nbest = format!("{NBEST_HEADER}\n");
        let mut hyps = String::new();
        for ex in load_examples(dir, split)? {
            let nb = beam_search(&model, &ex.features, lm.as_ref(), &dcfg)?;
            nbest.push_str(&nbest_tsv(&ex.id, &nb, &vocab));
            let _ = writeln!(hyps, "{}\t{}", ex.id, vocab.decode(&nb.best().units));
        }
        write(&out.join(format!("{split}.nbest.tsv")), nbest)?;
        write(&out.join(format!("{split}.hyp.tsv")), hyps)?;
    }
    stamp(dir, Stage::Decode)
}

fn split_summary(r: &ScoreReport) -> serde_json::Value {
    serde_json::json!({
        "with_nlsyms": r.with_nlsyms.total.mer(),
        "no_nlsyms": r.no_nlsyms.total.mer(),
        "switch_error_rate": r.with_nlsyms.switch.rate(),
        "missing": r.missing.len(),
    })
}

/// MER reports for dev and eval plus a summary used by `report`.
pub fn score_stage(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    begin(dir, cfg)?;
    require(dir, Stage::Decode)?;
    let lexicon = Lexicon::bundled();
    let out = dir.join(Stage::Score.dir());
    let mut summary = serde_json::Map::new();
    summary.insert("system".into(), cfg.system.clone().into());
    summary.insert("label".into(), cfg.label.into());
    summary.insert("seed".into(), cfg.seed.into());
    for split in [Split::Dev, Split::Eval] {
        let refs = read_pairs(&dir.join(Stage::Prep.dir()).join(format!("{split}.ref.tsv")))?;
        let hyps = read_pairs(&dir.join(Stage::Decode.dir()).join(format!("{split}.hyp.tsv")))?;
        let rep = mer(&refs, &hyps, &lexicon)?;
        write(&out.join(format!("{split}.txt")), rep.to_text())?;
        write(&out.join(format!("{split}.jsonl")), rep.to_jsonl())?;
        summary.insert(split.name().into(), split_summary(&rep));
    }
    write(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(summary)).expect("plain data") + "\n",
    )?;
    stamp(dir, Stage::Score)
}

/// Every stage in order; the LM is trained only when the system fuses one.
pub fn run_all(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let spec = cfg.system_spec()?;
    gen_data(dir, cfg)?;
    train_bpe(dir, cfg)?;
    prep(dir, cfg)?;
    if spec.needs_lm() {
        lm_train_stage(dir, cfg)?;
    }
    train_stage(dir, cfg)?;
    decode_stage(dir, cfg)?;
    score_stage(dir, cfg)
}
