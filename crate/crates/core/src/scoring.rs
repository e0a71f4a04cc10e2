//! Mixed error rate: Mandarin characters and English words scored jointly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{is_cjk, Lexicon, Transcript, UttClass, DISPAR, NLSYMS};

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("hypothesis {0:?} has no reference")]
    UnknownHypothesis(String),
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
}

pub type Result<T> = std::result::Result<T, ScoringError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    EnglishWord,
    MandarinChar,
    /// Word-level token in neither language.
    OtherWord,
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScoreUnit {
    pub text: String,
    pub class: Granularity,
}

impl ScoreUnit {
    fn new(text: impl Into<String>, class: Granularity) -> Self {
        ScoreUnit { text: text.into(), class }
    }
}

fn is_special(word: &str, lexicon: &Lexicon) -> bool {
    word == DISPAR
        || word == NLSYMS
        || (word.starts_with('<') && word.ends_with('>'))
        || lexicon.is_particle(word)
        || lexicon.is_nonlinguistic(word)
}

/// Mandarin per character, everything else per whitespace-delimited word
/// (English case-folded). Tags, bracketed noises and lexicon particles are
/// special units, dropped when `strip_specials` is set.
pub fn tokenize_mixed(text: &str, strip_specials: bool, lexicon: &Lexicon) -> Vec<ScoreUnit> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let folded = word.to_lowercase();
        if is_special(word, lexicon) || is_special(&folded, lexicon) {
            if !strip_specials {
                out.push(ScoreUnit::new(word, Granularity::Special));
            }
            continue;
        }
        let mut run = String::new();
        let flush = |run: &mut String, out: &mut Vec<ScoreUnit>| {
            if !run.is_empty() {
                let w = std::mem::take(run).to_lowercase();
                let class = if w.chars().all(|c| c.is_ascii_alphabetic() || c == '\'' || c == '-') {
                    Granularity::EnglishWord
                } else {
                    Granularity::OtherWord
                };
                out.push(ScoreUnit::new(w, class));
            }
        };
        for c in word.chars() {
            if is_cjk(c) {
                flush(&mut run, &mut out);
                let s = c.to_string();
                if lexicon.is_particle(&s) {
                    if !strip_specials {
                        out.push(ScoreUnit::new(s, Granularity::Special));
                    }
                } else {
                    out.push(ScoreUnit::new(s, Granularity::MandarinChar));
                }
            } else {
                run.push(c);
            }
        }
        flush(&mut run, &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AlignOp {
    Match { r: usize, h: usize },
    Sub { r: usize, h: usize },
    Del { r: usize },
    Ins { h: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EditResult {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    pub alignment: Vec<AlignOp>,
}

impl EditResult {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }
}

/// Unit-cost Levenshtein alignment. Among minimum-cost alignments the one
/// with fewest insertions, then fewest deletions, is chosen.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditResult {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    // (cost, insertions, deletions)
    let mut dp = vec![(0usize, 0usize, 0usize); (n + 1) * w];
    for j in 1..=m {
        dp[j] = (j, j, 0);
    }
    for i in 1..=n {
        dp[i * w] = (i, 0, i);
        for j in 1..=m {
            let same = reference[i - 1] == hyp[j - 1];
            let d = dp[(i - 1) * w + j - 1];
            let diag = (d.0 + usize::from(!same), d.1, d.2);
            let u = dp[(i - 1) * w + j];
            let del = (u.0 + 1, u.1, u.2 + 1);
            let l = dp[i * w + j - 1];
            let ins = (l.0 + 1, l.1 + 1, l.2);
            dp[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            let d = dp[(i - 1) * w + j - 1];
            if (d.0 + usize::from(!same), d.1, d.2) == here {
                ops.push(if same { AlignOp::Match { r: i - 1, h: j - 1 } } else { AlignOp::Sub { r: i - 1, h: j - 1 } });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 {
            let u = dp[(i - 1) * w + j];
            if (u.0 + 1, u.1, u.2 + 1) == here {
                ops.push(AlignOp::Del { r: i - 1 });
                i -= 1;
                continue;
            }
        }
        ops.push(AlignOp::Ins { h: j - 1 });
        j -= 1;
    }
    ops.reverse();
    let (cost, ins, del) = dp[n * w + m];
    EditResult {
        sub: cost - ins - del,
        del,
        ins,
        alignment: ops,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SwitchStats {
    pub points: usize,
    pub errors: usize,
}

impl SwitchStats {
    pub fn rate(&self) -> Option<f64> {
        (self.points > 0).then(|| 100.0 * self.errors as f64 / self.points as f64)
    }

    fn add(&mut self, o: SwitchStats) {
        self.points += o.points;
        self.errors += o.errors;
    }
}

/// Reference positions `(i, i+1)` whose units are Mandarin and English in
/// either order.
pub fn switch_points(reference: &[ScoreUnit]) -> Vec<usize> {
    use Granularity::{EnglishWord, MandarinChar};
    reference
        .windows(2)
        .enumerate()
        .filter(|(_, w)| matches!((w[0].class, w[1].class), (MandarinChar, EnglishWord) | (EnglishWord, MandarinChar)))
        .map(|(i, _)| i)
        .collect()
}

/// A switch point is correct when both flanking reference units are matched.
pub fn switch_point_report(reference: &[ScoreUnit], alignment: &[AlignOp]) -> SwitchStats {
    let mut matched = vec![false; reference.len()];
    for op in alignment {
        if let AlignOp::Match { r, .. } = *op {
            matched[r] = true;
        }
    }
    let points = switch_points(reference);
    SwitchStats {
        points: points.len(),
        errors: points.iter().filter(|&&i| !(matched[i] && matched[i + 1])).count(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    pub n: usize,
    pub utterances: usize,
}

impl Counts {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }

    /// 100·(S+D+I)/N; `None` for an empty reference set.
    pub fn mer(&self) -> Option<f64> {
        (self.n > 0).then(|| 100.0 * self.errors() as f64 / self.n as f64)
    }

    fn add(&mut self, e: &EditResult, n: usize) {
        self.sub += e.sub;
        self.del += e.del;
        self.ins += e.ins;
        self.n += n;
        self.utterances += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UttScore {
    pub id: String,
    pub class: Option<UttClass>,
    pub edits: EditResult,
    pub n: usize,
    pub missing: bool,
}

/// Scores under one tokenization variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantReport {
    pub strip_specials: bool,
    pub total: Counts,
    pub by_class: BTreeMap<UttClass, Counts>,
    pub switch: SwitchStats,
    pub utterances: Vec<UttScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub with_nlsyms: VariantReport,
    pub no_nlsyms: VariantReport,
    /// Reference ids without a hypothesis (scored as all deletions).
    pub missing: Vec<String>,
}

fn score_variant(refs: &[(String, String)], hyps: &HashMap<&str, &str>, strip: bool, lexicon: &Lexicon) -> VariantReport {
    let mut total = Counts::default();
    let mut by_class: BTreeMap<UttClass, Counts> = UttClass::ALL.iter().map(|&c| (c, Counts::default())).collect();
    let mut switch = SwitchStats::default();
    let mut utterances = Vec::with_capacity(refs.len());
    for (id, text) in refs {
        let r = tokenize_mixed(text, strip, lexicon);
        let hyp_text = hyps.get(id.as_str()).copied();
        let h = tokenize_mixed(hyp_text.unwrap_or(""), strip, lexicon);
        let edits = edit_distance(&r, &h);
        let class = Transcript::parse(text, lexicon).class();
        total.add(&edits, r.len());
        if let Some(c) = class {
            by_class.get_mut(&c).expect("all classes present").add(&edits, r.len());
        }
        switch.add(switch_point_report(&r, &edits.alignment));
        utterances.push(UttScore {
            id: id.clone(),
            class,
            n: r.len(),
            edits,
            missing: hyp_text.is_none(),
        });
    }
    VariantReport {
        strip_specials: strip,
        total,
        by_class,
        switch,
        utterances,
    }
}

/// Corpus-level MER with pooled counts, per-class rows and both tokenization
/// variants.
pub fn mer(refs: &[(String, String)], hyps: &[(String, String)], lexicon: &Lexicon) -> Result<ScoreReport> {
    let mut ref_ids = HashMap::new();
    for (id, _) in refs {
        if ref_ids.insert(id.as_str(), ()).is_some() {
            return Err(ScoringError::DuplicateId(id.clone()));
        }
    }
    let mut hyp_map = HashMap::new();
    for (id, text) in hyps {
        if !ref_ids.contains_key(id.as_str()) {
            return Err(ScoringError::UnknownHypothesis(id.clone()));
        }
        if hyp_map.insert(id.as_str(), text.as_str()).is_some() {
            return Err(ScoringError::DuplicateId(id.clone()));
        }
    }
    let missing = refs.iter().filter(|(id, _)| !hyp_map.contains_key(id.as_str())).map(|(id, _)| id.clone()).collect();
    Ok(ScoreReport {
        with_nlsyms: score_variant(refs, &hyp_map, false, lexicon),
        no_nlsyms: score_variant(refs, &hyp_map, true, lexicon),
        missing,
    })
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

#[derive(Serialize)]
struct Row<'a> {
    variant: &'a str,
    subset: &'a str,
    utterances: usize,
    n: usize,
    sub: usize,
    del: usize,
    ins: usize,
    mer: Option<f64>,
}

impl ScoreReport {
    fn rows(&self) -> Vec<Row<'_>> {
        let mut rows = Vec::new();
        for (name, v) in [("with-nlsyms", &self.with_nlsyms), ("no-nlsyms", &self.no_nlsyms)] {
            let mut push = |subset, c: &Counts| {
                rows.push(Row {
                    variant: name,
                    subset,
                    utterances: c.utterances,
                    n: c.n,
                    sub: c.sub,
                    del: c.del,
                    ins: c.ins,
                    mer: c.mer(),
                })
            };
            push("ALL", &v.total);
            for (class, c) in &v.by_class {
                push(class.name(), c);
            }
        }
        rows
    }

    /// Aligned columns, one row per variant and subset.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:<6} {:>6} {:>7} {:>6} {:>6} {:>6} {:>8}", "variant", "subset", "utts", "units", "sub", "del", "ins", "MER%");
        for r in self.rows() {
            let _ = writeln!(
                out,
                "{:<12} {:<6} {:>6} {:>7} {:>6} {:>6} {:>6} {:>8}",
                r.variant,
                r.subset,
                r.utterances,
                r.n,
                r.sub,
                r.del,
                r.ins,
                fmt_rate(r.mer)
            );
        }
        for (name, v) in [("with-nlsyms", &self.with_nlsyms), ("no-nlsyms", &self.no_nlsyms)] {
            let _ = writeln!(
                out,
                "switch points ({name}): {} of {} wrong, error rate {}%",
                v.switch.errors,
                v.switch.points,
                fmt_rate(v.switch.rate())
            );
        }
        if !self.missing.is_empty() {
            let _ = writeln!(out, "missing hypotheses ({}): {}", self.missing.len(), self.missing.join(" "));
        }
        out
    }

    /// One JSON object per row, plus one per switch-point summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.rows() {
            out.push_str(&serde_json::to_string(&r).expect("plain data"));
            out.push('\n');
        }
        for (name, v) in [("with-nlsyms", &self.with_nlsyms), ("no-nlsyms", &self.no_nlsyms)] {
            let line = serde_json::json!({
                "variant": name,
                "subset": "switch-points",
                "points": v.switch.points,
                "errors": v.switch.errors,
                "rate": v.switch.rate(),
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}
