//! Transcripts, language tags, manifests and the synthetic bilingual corpus.

mod manifest;
mod stats;
mod synth;

pub use manifest::{Audio, Dataset, Manifest, ManifestRecord, Split, Utterance};
pub use stats::{corpus_stats, switch_counts, CorpusStats, SwitchCounts};
pub use synth::{gen_synthetic, SynthSpec, SyntheticCorpus, ENGLISH_WORDS, MANDARIN_CHARS};

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Merged label for discourse particles and hesitations.
pub const DISPAR: &str = "<dispar>";
/// Merged label for nonlinguistic signals.
pub const NLSYMS: &str = "<nlsyms>";

const BUNDLED_LEXICON: &str = include_str!("../../data/lexicon.tsv");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("audio for {id:?} not found at {path}")]
    MissingAudio { id: String, path: String },
    #[error("empty manifest")]
    Empty,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("lexicon line {line}: {reason}")]
    Lexicon { line: usize, reason: String },
    #[error(transparent)]
    Signal(#[from] crate::signal::SignalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    MandarinChar,
    EnglishWord,
    DiscourseParticle,
    Nonlinguistic,
    OtherLanguage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lang {
    Mandarin,
    English,
    Neutral,
}

impl TokenKind {
    pub fn lang(self) -> Lang {
        match self {
            TokenKind::MandarinChar => Lang::Mandarin,
            TokenKind::EnglishWord => Lang::English,
            _ => Lang::Neutral,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

impl Token {
    pub fn new(text: impl Into<String>, kind: TokenKind) -> Self {
        Token {
            text: text.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Transcript {
    tokens: Vec<Token>,
}

/// Utterance class by language content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UttClass {
    Cs,
    Man,
    Eng,
}

impl UttClass {
    pub const ALL: [UttClass; 3] = [UttClass::Eng, UttClass::Man, UttClass::Cs];

    pub fn name(self) -> &'static str {
        match self {
            UttClass::Cs => "CS",
            UttClass::Man => "MAN",
            UttClass::Eng => "ENG",
        }
    }
}

impl fmt::Display for UttClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn is_cjk(c: char) -> bool {
    matches!(c, '\u{4E00}'..='\u{9FFF}' | '\u{3400}'..='\u{4DBF}' | '\u{F900}'..='\u{FAFF}')
}

pub fn is_english_char(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '\'' || c == '-'
}

pub fn is_english_word(s: &str) -> bool {
    !s.is_empty() && s.chars().all(is_english_char)
}

fn is_bracketed(s: &str) -> bool {
    (s.starts_with('(') && s.ends_with(')') || s.starts_with('[') && s.ends_with(']')) && s.len() > 2
}

/// Discourse particles and nonlinguistic signal labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lexicon {
    particles: BTreeSet<String>,
    nonlinguistic: BTreeSet<String>,
}

impl Lexicon {
    pub fn new<I, J, S, T>(particles: I, nonlinguistic: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        Lexicon {
            particles: particles.into_iter().map(|s| s.into().to_lowercase()).collect(),
            nonlinguistic: nonlinguistic.into_iter().map(|s| s.into().to_lowercase()).collect(),
        }
    }

    /// Tab-separated `kind<TAB>surface` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Lexicon::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (kind, surface) = line.split_once('\t').ok_or_else(|| CorpusError::Lexicon {
                line: i + 1,
                reason: "expected kind<TAB>surface".into(),
            })?;
            let surface = surface.trim().to_lowercase();
            match kind.trim() {
                "particle" => lex.particles.insert(surface),
                "nonlinguistic" => lex.nonlinguistic.insert(surface),
                other => {
                    return Err(CorpusError::Lexicon {
                        line: i + 1,
                        reason: format!("unknown kind {other:?}"),
                    })
                }
            };
        }
        Ok(lex)
    }

    pub fn bundled() -> Self {
        Lexicon::parse(BUNDLED_LEXICON).expect("bundled lexicon is well formed")
    }

    pub fn particles(&self) -> impl Iterator<Item = &str> {
        self.particles.iter().map(String::as_str)
    }

    pub fn nonlinguistic(&self) -> impl Iterator<Item = &str> {
        self.nonlinguistic.iter().map(String::as_str)
    }

    pub fn is_particle(&self, s: &str) -> bool {
        s == DISPAR || self.particles.contains(&s.to_lowercase())
    }

    pub fn is_nonlinguistic(&self, s: &str) -> bool {
        s == NLSYMS || self.nonlinguistic.contains(&s.to_lowercase()) || is_bracketed(s)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Script {
    Cjk,
    Latin,
    Other,
}

fn script(c: char) -> Script {
    if is_cjk(c) {
        Script::Cjk
    } else if is_english_char(c) {
        Script::Latin
    } else {
        Script::Other
    }
}

impl Transcript {
    pub fn new(tokens: Vec<Token>) -> Self {
        Transcript { tokens }
    }

    /// Splits whitespace-separated text into kind-tagged tokens. CJK runs are
    /// split per character; Latin runs form words; anything else is tagged as
    /// another language.
    pub fn parse(text: &str, lexicon: &Lexicon) -> Self {
        let mut tokens = Vec::new();
        for piece in text.split_whitespace() {
            if lexicon.is_particle(piece) {
                tokens.push(Token::new(piece, TokenKind::DiscourseParticle));
                continue;
            }
            if lexicon.is_nonlinguistic(piece) {
                tokens.push(Token::new(piece, TokenKind::Nonlinguistic));
                continue;
            }
            let chars: Vec<char> = piece.chars().collect();
            let mut i = 0;
            while i < chars.len() {
                let s = script(chars[i]);
                if s == Script::Cjk {
                    let t = chars[i].to_string();
                    let kind = if lexicon.is_particle(&t) {
                        TokenKind::DiscourseParticle
                    } else {
                        TokenKind::MandarinChar
                    };
                    tokens.push(Token::new(t, kind));
                    i += 1;
                    continue;
                }
                let start = i;
                while i < chars.len() && script(chars[i]) == s {
                    i += 1;
                }
                let run: String = chars[start..i].iter().collect();
                let kind = match s {
                    Script::Latin if lexicon.is_particle(&run) => TokenKind::DiscourseParticle,
                    Script::Latin => TokenKind::EnglishWord,
                    _ => TokenKind::OtherLanguage,
                };
                tokens.push(Token::new(run, kind));
            }
        }
        Transcript { tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Canonical surface text: tokens joined by single spaces.
    pub fn surface(&self) -> String {
        let parts: Vec<&str> = self.tokens.iter().map(|t| t.text.as_str()).collect();
        parts.join(" ")
    }

    /// `None` when the transcript holds neither Mandarin nor English tokens.
    pub fn class(&self) -> Option<UttClass> {
        let man = self.tokens.iter().any(|t| t.kind == TokenKind::MandarinChar);
        let eng = self.tokens.iter().any(|t| t.kind == TokenKind::EnglishWord);
        match (man, eng) {
            (true, true) => Some(UttClass::Cs),
            (true, false) => Some(UttClass::Man),
            (false, true) => Some(UttClass::Eng),
            (false, false) => None,
        }
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface())
    }
}

/// Replaces particles/hesitations by [`DISPAR`] and nonlinguistic signals by
/// [`NLSYMS`] ("label 2"); all other tokens are kept.
pub fn merge_nonlinguistic(transcript: &Transcript, lexicon: &Lexicon) -> Transcript {
    let tokens = transcript
        .tokens
        .iter()
        .map(|t| match t.kind {
            TokenKind::DiscourseParticle => Token::new(DISPAR, TokenKind::DiscourseParticle),
            TokenKind::Nonlinguistic => Token::new(NLSYMS, TokenKind::Nonlinguistic),
            _ if lexicon.is_particle(&t.text) => Token::new(DISPAR, TokenKind::DiscourseParticle),
            _ if lexicon.is_nonlinguistic(&t.text) => Token::new(NLSYMS, TokenKind::Nonlinguistic),
            _ => t.clone(),
        })
        .collect();
    Transcript { tokens }
}

pub fn tag_languages(transcript: &Transcript) -> Vec<Lang> {
    transcript.tokens.iter().map(|t| t.kind.lang()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex() -> Lexicon {
        Lexicon::bundled()
    }

    #[test]
    fn particles_and_signals_merge() {
        let t = Transcript::parse("lah 我 (laughing) GO hmm", &lex());
        let m = merge_nonlinguistic(&t, &lex());
        assert_eq!(m.surface(), "<dispar> 我 <nlsyms> GO <dispar>");
        assert_eq!(m.tokens()[3].kind, TokenKind::EnglishWord);
    }

    #[test]
    fn parse_splits_cjk_and_words() {
        let t = Transcript::parse("then 你不 take-off 我go", &lex());
        let kinds: Vec<_> = t.tokens().iter().map(|t| (t.text.as_str(), t.kind)).collect();
        assert_eq!(
            kinds,
            vec![
                ("then", TokenKind::EnglishWord),
                ("你", TokenKind::MandarinChar),
                ("不", TokenKind::MandarinChar),
                ("take-off", TokenKind::EnglishWord),
                ("我", TokenKind::MandarinChar),
                ("go", TokenKind::EnglishWord),
            ]
        );
        let k = Transcript::parse("사랑 です", &lex());
        assert!(k.tokens().iter().all(|t| t.kind == TokenKind::OtherLanguage));
        assert_eq!(tag_languages(&k), vec![Lang::Neutral, Lang::Neutral]);
    }

    #[test]
    fn language_tags() {
        let t = Transcript::parse("我 GO 了", &lex());
        assert_eq!(tag_languages(&t), vec![Lang::Mandarin, Lang::English, Lang::Mandarin]);
        let d = Transcript::parse("<dispar>", &lex());
        assert_eq!(tag_languages(&d), vec![Lang::Neutral]);
        let e = Transcript::parse("why you want to be", &lex());
        assert!(tag_languages(&e).iter().all(|&l| l == Lang::English));
    }

    #[test]
    fn utterance_classes() {
        assert_eq!(Transcript::parse("我 GO", &lex()).class(), Some(UttClass::Cs));
        assert_eq!(Transcript::parse("我 lah", &lex()).class(), Some(UttClass::Man));
        assert_eq!(Transcript::parse("go", &lex()).class(), Some(UttClass::Eng));
        assert_eq!(Transcript::parse("hmm", &lex()).class(), None);
    }

    #[test]
    fn lexicon_rejects_unknown_kind() {
        assert!(Lexicon::parse("weird\tx\n").is_err());
        assert!(Lexicon::parse("particle\n").is_err());
    }

    fn arb_transcript() -> impl Strategy<Value = String> {
        let pieces = prop::sample::select(vec![
            "我", "你", "GO", "take", "lah", "hmm", "(laughing)", "<dispar>", "<nlsyms>", "了", "[noise]", "啦",
        ]);
        prop::collection::vec(pieces, 0..12).prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn merge_is_idempotent_and_length_preserving(text in arb_transcript()) {
            let l = lex();
            let t = Transcript::parse(&text, &l);
            let once = merge_nonlinguistic(&t, &l);
            let twice = merge_nonlinguistic(&once, &l);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(once.len(), t.len());
        }
    }
}
