//! BPE subwords and the mixed Mandarin/English unit inventory.

mod bpe;

pub use bpe::{apply_bpe, base_symbols, join_subwords, train_bpe, MergeTable, END_OF_WORD};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::corpus::{Lang, TokenKind, Transcript, DISPAR, NLSYMS};

#[derive(Debug, Error, PartialEq)]
pub enum SubwordError {
    #[error("cannot learn merges from an empty corpus")]
    EmptyCorpus,
    #[error("duplicate merge ({0}, {1})")]
    DuplicateMerge(String, String),
    #[error("requested {requested} English subwords but only {attainable} are attainable (at least {minimum} needed for the base symbols)")]
    Unattainable {
        requested: usize,
        attainable: usize,
        minimum: usize,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate unit {0:?}")]
    DuplicateUnit(String),
}

pub type Result<T> = std::result::Result<T, SubwordError>;

pub const BLANK: &str = "<blank>";
pub const UNK: &str = "<unk>";
pub const SPACE: &str = "<space>";
pub const SOS_EOS: &str = "<sos/eos>";

pub const BLANK_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SPACE_ID: usize = 2;
pub const DISPAR_ID: usize = 3;
pub const NLSYMS_ID: usize = 4;
pub const SOS_EOS_ID: usize = 5;

const SPECIALS: [&str; 6] = [BLANK, UNK, SPACE, DISPAR, NLSYMS, SOS_EOS];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabMode {
    /// English spelled out per character, `<space>` between adjacent English words.
    Char,
    /// English as this many BPE subwords.
    Subword(usize),
}

/// Unit inventory. Ids are grouped by class: neutral units first, then
/// Mandarin, then English, each block contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedVocab {
    units: Vec<String>,
    classes: Vec<Lang>,
    index: HashMap<String, usize>,
    merges: Option<MergeTable>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub unk_count: usize,
}

/// English words of the corpus with their counts.
pub fn english_word_counts<'a, I: IntoIterator<Item = &'a Transcript>>(corpus: I) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for t in corpus {
        for tok in t.tokens() {
            if tok.kind == TokenKind::EnglishWord {
                *counts.entry(tok.text.clone()).or_default() += 1;
            }
        }
    }
    counts
}

/// Largest number of merges BPE can perform on the given words.
pub fn attainable_merges(word_counts: &BTreeMap<String, u64>) -> usize {
    let longest: usize = word_counts.keys().map(|w| w.chars().count()).sum();
    train_bpe(word_counts, longest).map(|t| t.len()).unwrap_or(0)
}

impl MixedVocab {
    fn from_blocks(neutral: Vec<String>, mandarin: Vec<String>, english: Vec<String>, merges: Option<MergeTable>) -> Result<Self> {
        let mut units = Vec::new();
        let mut classes = Vec::new();
        for (block, lang) in [(neutral, Lang::Neutral), (mandarin, Lang::Mandarin), (english, Lang::English)] {
            for u in block {
                units.push(u);
                classes.push(lang);
            }
        }
        let mut index = HashMap::new();
        for (i, u) in units.iter().enumerate() {
            if index.insert(u.clone(), i).is_some() {
                return Err(SubwordError::DuplicateUnit(u.clone()));
            }
        }
        Ok(MixedVocab {
            units,
            classes,
            index,
            merges,
        })
    }

    /// Mandarin characters become units; English is spelled out (char mode) or
    /// segmented with BPE (subword mode). When `bpe_corpus` is `None`, merges are
    /// learned from the English words of `corpus`.
    pub fn build(corpus: &[Transcript], mode: VocabMode, bpe_corpus: Option<&BTreeMap<String, u64>>) -> Result<Self> {
        let mut neutral_extra = BTreeSet::new();
        let mut mandarin = BTreeSet::new();
        let mut letters = BTreeSet::new();
        for t in corpus {
            for tok in t.tokens() {
                match tok.kind {
                    TokenKind::MandarinChar => {
                        mandarin.insert(tok.text.clone());
                    }
                    TokenKind::EnglishWord => letters.extend(tok.text.chars().map(String::from)),
                    _ => {
                        if !SPECIALS.contains(&tok.text.as_str()) {
                            neutral_extra.insert(tok.text.clone());
                        }
                    }
                }
            }
        }
        let mut neutral: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        neutral.extend(neutral_extra);
        let mandarin: Vec<String> = mandarin.into_iter().collect();

        match mode {
            VocabMode::Char => MixedVocab::from_blocks(neutral, mandarin, letters.into_iter().collect(), None),
            VocabMode::Subword(n) => {
                let own;
                let words = match bpe_corpus {
                    Some(w) => w,
                    None => {
                        own = english_word_counts(corpus);
                        &own
                    }
                };
                let base = base_symbols(words.keys().map(String::as_str));
                let attainable = base.len() + attainable_merges(words);
                if n < base.len() || n > attainable {
                    return Err(SubwordError::Unattainable {
                        requested: n,
                        attainable,
                        minimum: base.len(),
                    });
                }
                let table = train_bpe(words, n - base.len())?;
                let mut english: Vec<String> = base.into_iter().collect();
                english.extend(table.merges().iter().map(|(l, r)| format!("{l}{r}")));
                MixedVocab::from_blocks(neutral, mandarin, english, Some(table))
            }
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn unit(&self, id: usize) -> &str {
        &self.units[id]
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn id(&self, unit: &str) -> Option<usize> {
        self.index.get(unit).copied()
    }

    pub fn class(&self, id: usize) -> Lang {
        self.classes[id]
    }

    pub fn classes(&self) -> &[Lang] {
        &self.classes
    }

    pub fn mode(&self) -> VocabMode {
        match &self.merges {
            None => VocabMode::Char,
            Some(_) => VocabMode::Subword(self.count(Lang::English)),
        }
    }

    pub fn merges(&self) -> Option<&MergeTable> {
        self.merges.as_ref()
    }

    pub fn count(&self, lang: Lang) -> usize {
        self.classes.iter().filter(|&&c| c == lang).count()
    }

    /// Contiguous id range of a class block.
    pub fn class_range(&self, lang: Lang) -> std::ops::Range<usize> {
        let start = self.classes.iter().position(|&c| c == lang).unwrap_or(self.len());
        start..start + self.count(lang)
    }

    pub fn specials() -> &'static [&'static str] {
        &SPECIALS
    }

    fn lookup(&self, unit: &str, out: &mut Encoded) {
        match self.id(unit) {
            Some(i) => out.ids.push(i),
            None => {
                out.ids.push(UNK_ID);
                out.unk_count += 1;
            }
        }
    }

    /// Units not in the inventory become `<unk>` and are counted.
    pub fn encode(&self, transcript: &Transcript) -> Encoded {
        let mut out = Encoded {
            ids: Vec::new(),
            unk_count: 0,
        };
        let mut prev_english = false;
        for tok in transcript.tokens() {
            let english = tok.kind == TokenKind::EnglishWord;
            if english {
                match &self.merges {
                    None => {
                        if prev_english {
                            out.ids.push(SPACE_ID);
                        }
                        for c in tok.text.chars() {
                            self.lookup(&c.to_string(), &mut out);
                        }
                    }
                    Some(table) => {
                        for u in apply_bpe(&tok.text, table) {
                            self.lookup(&u, &mut out);
                        }
                    }
                }
            } else {
                self.lookup(&tok.text, &mut out);
            }
            prev_english = english;
        }
        out
    }

    /// Surface text of a unit sequence; `<blank>` and `<sos/eos>` are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let subword = self.merges.is_some();
        let mut words: Vec<String> = Vec::new();
        let mut current = String::new();
        let flush = |current: &mut String, words: &mut Vec<String>| {
            if !current.is_empty() {
                words.push(std::mem::take(current));
            }
        };
        for &id in ids {
            if id == BLANK_ID || id == SOS_EOS_ID || id >= self.len() {
                continue;
            }
            let u = &self.units[id];
            if self.classes[id] == Lang::English {
                if subword {
                    current.push_str(&u.replace(END_OF_WORD, ""));
                    if u.ends_with(END_OF_WORD) {
                        flush(&mut current, &mut words);
                    }
                } else {
                    current.push_str(u);
                }
            } else if id == SPACE_ID {
                flush(&mut current, &mut words);
            } else {
                flush(&mut current, &mut words);
                words.push(u.clone());
            }
        }
        flush(&mut current, &mut words);
        words.join(" ")
    }

    /// Header `#mode<TAB>char|subword`, then `id<TAB>unit<TAB>class` lines, then
    /// `#merge<TAB>rank<TAB>left<TAB>right` lines in subword mode.
    pub fn to_text(&self) -> String {
        let mut s = format!("#mode\t{}\n", if self.merges.is_some() { "subword" } else { "char" });
        for (i, (u, c)) in self.units.iter().zip(&self.classes).enumerate() {
            let class = match c {
                Lang::Mandarin => "MANDARIN",
                Lang::English => "ENGLISH",
                Lang::Neutral => "NEUTRAL",
            };
            s.push_str(&format!("{i}\t{u}\t{class}\n"));
        }
        if let Some(t) = &self.merges {
            for line in t.to_text().lines() {
                s.push_str(&format!("#merge\t{line}\n"));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, reason: &str| SubwordError::Parse {
            line: line + 1,
            reason: reason.to_string(),
        };
        let mut subword = None;
        let mut blocks: [Vec<String>; 3] = Default::default();
        let mut merge_text = String::new();
        let mut seen = 0;
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["#mode", m] => subword = Some(*m == "subword"),
                ["#merge", rest @ ..] => {
                    merge_text.push_str(&rest.join("\t"));
                    merge_text.push('\n');
                }
                [id, unit, class] => {
                    if id.parse::<usize>().ok() != Some(seen) {
                        return Err(err(i, "unit ids must be consecutive"));
                    }
                    seen += 1;
                    let b = match *class {
                        "NEUTRAL" => 0,
                        "MANDARIN" => 1,
                        "ENGLISH" => 2,
                        _ => return Err(err(i, "unknown class")),
                    };
                    if blocks[b + 1..].iter().any(|x| !x.is_empty()) {
                        return Err(err(i, "class blocks must be contiguous"));
                    }
                    blocks[b].push(unit.to_string());
                }
                [""] => {}
                _ => return Err(err(i, "malformed line")),
            }
        }
        let subword = subword.ok_or_else(|| err(0, "missing #mode header"))?;
        let merges = if subword {
            Some(MergeTable::parse(&merge_text)?)
        } else {
            None
        };
        let [n, m, e] = blocks;
        if n.iter().take(SPECIALS.len()).map(String::as_str).ne(SPECIALS.iter().copied()) {
            return Err(err(1, "special units must lead the inventory"));
        }
        MixedVocab::from_blocks(n, m, e, merges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Lexicon;
    use std::collections::BTreeSet;

    fn t(s: &str) -> Transcript {
        Transcript::parse(s, &Lexicon::bundled())
    }

    #[test]
    fn char_mode_inventory() {
        let v = MixedVocab::build(&[t("我 GO")], VocabMode::Char, None).unwrap();
        let units: BTreeSet<&str> = v.units().iter().map(String::as_str).collect();
        let mut expected: BTreeSet<&str> = ["我", "G", "O"].into_iter().collect();
        expected.extend(SPECIALS);
        assert_eq!(units, expected);
        assert_eq!(v.class(v.id("我").unwrap()), Lang::Mandarin);
        assert_eq!(v.class(v.id("G").unwrap()), Lang::English);
        assert_eq!(v.class(SPACE_ID), Lang::Neutral);
    }

    #[test]
    fn char_mode_space_only_between_english_words() {
        let v = MixedVocab::build(&[t("我 GO 了 take initiative")], VocabMode::Char, None).unwrap();
        let e = v.encode(&t("我 GO 了"));
        let units: Vec<&str> = e.ids.iter().map(|&i| v.unit(i)).collect();
        assert_eq!(units, vec!["我", "G", "O", "了"]);
        let e2 = v.encode(&t("take initiative"));
        assert_eq!(e2.ids.iter().filter(|&&i| i == SPACE_ID).count(), 1);
        assert_eq!(v.decode(&e2.ids), "take initiative");
    }

    #[test]
    fn classes_partition_and_blocks_contiguous() {
        let v = MixedVocab::build(&[t("我 GO lah (laughing) 你 so")], VocabMode::Char, None).unwrap();
        let total: usize = [Lang::Neutral, Lang::Mandarin, Lang::English].iter().map(|&l| v.count(l)).sum();
        assert_eq!(total, v.len());
        for l in [Lang::Neutral, Lang::Mandarin, Lang::English] {
            assert!(v.class_range(l).all(|i| v.class(i) == l));
        }
        assert_eq!(v.class(v.id("lah").unwrap()), Lang::Neutral);
    }

    #[test]
    fn subword_size_accounting() {
        let corpus: Vec<Transcript> = ["我 low 你", "lower 了", "lowest newest", "low 好"].iter().map(|s| t(s)).collect();
        let words = english_word_counts(&corpus);
        let base = base_symbols(words.keys().map(String::as_str)).len();
        let n = base + 4;
        let v = MixedVocab::build(&corpus, VocabMode::Subword(n), None).unwrap();
        assert_eq!(v.count(Lang::English), n);
        assert_eq!(v.len(), v.count(Lang::Mandarin) + n + v.count(Lang::Neutral));
        assert_eq!(v.count(Lang::Neutral), SPECIALS.len());
        assert_eq!(v.mode(), VocabMode::Subword(n));
        match MixedVocab::build(&corpus, VocabMode::Subword(10_000), None) {
            Err(SubwordError::Unattainable { attainable, .. }) => assert!(attainable < 10_000),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_units_become_unk() {
        let v = MixedVocab::build(&[t("我 go")], VocabMode::Char, None).unwrap();
        let e = v.encode(&t("你 gx"));
        assert_eq!(e.unk_count, 2);
        assert_eq!(e.ids, vec![UNK_ID, v.id("g").unwrap(), UNK_ID]);
        assert!(v.encode(&t("")).ids.is_empty());
    }

    #[test]
    fn text_round_trip_both_modes() {
        let corpus = vec![t("我 low lower lah 你 lowest")];
        for mode in [VocabMode::Char, VocabMode::Subword(12)] {
            let v = MixedVocab::build(&corpus, mode, None).unwrap();
            let back = MixedVocab::parse(&v.to_text()).unwrap();
            assert_eq!(back, v);
        }
    }
}
