//! Seeded synthetic bilingual corpora standing in for recorded code-switching speech.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Audio, CorpusError, Dataset, Manifest, Result, Split, Token, TokenKind, Transcript, UttClass, Utterance};
use crate::signal::{synth_waveform, SignatureBank, SynthAudio};

/// Single-symbol tokens of the Mandarin stand-in language.
pub const MANDARIN_CHARS: [char; 40] = [
    '我', '你', '他', '的', '了', '是', '不', '在', '有', '这', '个', '们', '来', '到', '说', '要', '就', '去', '可', '以', '讲',
    '么', '好', '看', '想', '会', '没', '吃', '饭', '做', '很', '多', '大', '小', '天', '家', '人', '学', '生', '年',
];

/// Multi-character tokens of the English stand-in language.
pub const ENGLISH_WORDS: [&str; 40] = [
    "go", "so", "then", "take", "why", "you", "want", "to", "be", "the", "head", "of", "your", "can", "do", "it", "like",
    "eat", "meet", "work", "time", "very", "good", "nice", "okay", "sure", "but", "and", "what", "how", "that", "this",
    "just", "one", "two", "buy", "car", "home", "shop", "book",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub mandarin_size: usize,
    pub english_size: usize,
    /// Probability that the next language token switches language.
    pub switch_prob: f64,
    /// Probability that an utterance starts in the Mandarin stand-in.
    pub start_mandarin_prob: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Speaking rate range in tokens per second.
    pub min_rate: f64,
    pub max_rate: f64,
    pub particle_prob: f64,
    pub nonlinguistic_prob: f64,
    pub particles: Vec<String>,
    pub nonlinguistic: Vec<String>,
    pub utterances: usize,
    pub speakers: usize,
    pub split: Split,
    pub id_prefix: String,
    pub seed: u64,
    pub audio: SynthAudio,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            mandarin_size: 20,
            english_size: 20,
            switch_prob: 0.3,
            start_mandarin_prob: 0.5,
            min_tokens: 3,
            max_tokens: 6,
            min_rate: 2.5,
            max_rate: 3.5,
            particle_prob: 0.05,
            nonlinguistic_prob: 0.03,
            particles: vec!["lah".into(), "hmm".into(), "leh".into(), "lor".into()],
            nonlinguistic: vec!["(laughing)".into(), "(cough)".into()],
            utterances: 50,
            speakers: 5,
            split: Split::Train,
            id_prefix: "syn".into(),
            seed: 7,
            audio: SynthAudio::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
        if self.mandarin_size == 0 || self.english_size == 0 {
            return bad("inventory sizes must be at least 1");
        }
        if self.mandarin_size > MANDARIN_CHARS.len() || self.english_size > ENGLISH_WORDS.len() {
            return bad("inventory size exceeds the built-in symbol lists");
        }
        for p in [self.switch_prob, self.start_mandarin_prob, self.particle_prob, self.nonlinguistic_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token length range must satisfy 1 <= min <= max");
        }
        if !(self.min_rate > 0.0 && self.min_rate <= self.max_rate) {
            return bad("rate range must satisfy 0 < min <= max");
        }
        if self.speakers == 0 {
            return bad("at least one speaker required");
        }
        if self.particle_prob > 0.0 && self.particles.is_empty()
            || self.nonlinguistic_prob > 0.0 && self.nonlinguistic.is_empty()
        {
            return bad("injection probability set without any forms to inject");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub manifest: Manifest,
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    &xs[rng.random_range(0..xs.len())]
}

/// Generates utterances whose language sequence is a two-state Markov chain.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let bank = SignatureBank::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mandarin = &MANDARIN_CHARS[..spec.mandarin_size];
    let english = &ENGLISH_WORDS[..spec.english_size];
    let mut utterances = Vec::with_capacity(spec.utterances);

    for i in 0..spec.utterances {
        let n = rng.random_range(spec.min_tokens..=spec.max_tokens);
        let mut is_man = rng.random::<f64>() < spec.start_mandarin_prob;
        let (mut has_man, mut has_eng) = (false, false);
        let mut tokens = Vec::with_capacity(n * 2);
        for k in 0..n {
            if k > 0 && rng.random::<f64>() < spec.switch_prob {
                is_man = !is_man;
            }
            if is_man {
                has_man = true;
                tokens.push(Token::new(pick(&mut rng, mandarin).to_string(), TokenKind::MandarinChar));
            } else {
                has_eng = true;
                tokens.push(Token::new(*pick(&mut rng, english), TokenKind::EnglishWord));
            }
            if rng.random::<f64>() < spec.particle_prob {
                tokens.push(Token::new(pick(&mut rng, &spec.particles).clone(), TokenKind::DiscourseParticle));
            }
            if rng.random::<f64>() < spec.nonlinguistic_prob {
                tokens.push(Token::new(pick(&mut rng, &spec.nonlinguistic).clone(), TokenKind::Nonlinguistic));
            }
        }
        let rate = rng.random_range(spec.min_rate..=spec.max_rate);
        let audio_seed: u64 = rng.random();
        let texts: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        let wave = synth_waveform(&texts, rate, audio_seed, &bank, &spec.audio)?;
        let class = match (has_man, has_eng) {
            (true, true) => UttClass::Cs,
            (true, false) => UttClass::Man,
            _ => UttClass::Eng,
        };
        utterances.push(Utterance {
            id: format!("{}-{}-{:05}", spec.id_prefix, spec.split, i),
            speaker: format!("{}-spk{:02}", spec.id_prefix, i % spec.speakers),
            audio: Audio::Wave(wave),
            transcript: Transcript::new(tokens),
            class: Some(class),
        });
    }

    let dataset = Dataset {
        split: spec.split,
        utterances,
    };
    let manifest = dataset.manifest("wav")?;
    Ok(SyntheticCorpus { dataset, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_stats, switch_counts, Lang, Lexicon};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            utterances: 12,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_inventory_rejected() {
        let spec = SynthSpec {
            mandarin_size: 0,
            ..SynthSpec::default()
        };
        assert!(matches!(gen_synthetic(&spec), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_synthetic(&small(7)).unwrap();
        let b = gen_synthetic(&small(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.manifest.to_tsv(), b.manifest.to_tsv());
        assert_ne!(a.manifest, gen_synthetic(&small(8)).unwrap().manifest);
    }

    #[test]
    fn no_switching_gives_monolingual_mandarin() {
        let spec = SynthSpec {
            switch_prob: 0.0,
            start_mandarin_prob: 1.0,
            ..small(3)
        };
        let c = gen_synthetic(&spec).unwrap();
        assert!(c.dataset.utterances.iter().all(|u| u.class == Some(UttClass::Man)));
    }

    #[test]
    fn certain_switching_alternates() {
        let spec = SynthSpec {
            switch_prob: 1.0,
            particle_prob: 0.0,
            nonlinguistic_prob: 0.0,
            ..small(4)
        };
        for u in gen_synthetic(&spec).unwrap().dataset.utterances {
            let langs: Vec<Lang> = u.transcript.tokens().iter().map(|t| t.kind.lang()).collect();
            assert!(langs.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn stored_class_matches_transcript_and_manifest_reparses() {
        let c = gen_synthetic(&small(11)).unwrap();
        let lex = Lexicon::bundled();
        for (u, r) in c.dataset.utterances.iter().zip(c.manifest.records()) {
            assert_eq!(u.class, u.transcript.class());
            assert_eq!(Transcript::parse(&r.transcript, &lex), u.transcript);
        }
    }

    #[test]
    fn switch_ratio_converges_to_switch_probability() {
        let spec = SynthSpec {
            utterances: 2200,
            min_tokens: 5,
            max_tokens: 7,
            switch_prob: 0.3,
            ..SynthSpec::default()
        };
        let c = gen_synthetic(&spec).unwrap();
        let pairs: usize = c.dataset.utterances.iter().map(|u| switch_counts(&u.transcript).pairs).sum();
        assert!(pairs >= 10_000, "{pairs}");
        let s = corpus_stats(&c.dataset).unwrap();
        assert!((s.switch_ratio - 0.3).abs() < 0.02, "{}", s.switch_ratio);
    }
}
