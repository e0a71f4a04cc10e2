use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{Result, SubwordError};

/// Marker appended to every word before merging.
pub const END_OF_WORD: &str = "</w>";

/// Merges in rank order; index = rank.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::new();
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(SubwordError::DuplicateMerge(m.0.clone(), m.1.clone()));
            }
        }
        Ok(MergeTable { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.ranks.get(&(left.to_string(), right.to_string())).copied()
    }

    /// One `rank<TAB>left<TAB>right` line per merge.
    pub fn to_text(&self) -> String {
        self.merges
            .iter()
            .enumerate()
            .map(|(i, (l, r))| format!("{i}\t{l}\t{r}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || f[0].parse::<usize>().ok() != Some(merges.len()) {
                return Err(SubwordError::Parse {
                    line: i + 1,
                    reason: "expected rank<TAB>left<TAB>right with consecutive ranks".into(),
                });
            }
            merges.push((f[1].to_string(), f[2].to_string()));
        }
        MergeTable::from_merges(merges)
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut s: Vec<String> = word.chars().map(String::from).collect();
    s.push(END_OF_WORD.to_string());
    s
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Characters of the corpus plus the end-of-word marker.
pub fn base_symbols<'a, I: IntoIterator<Item = &'a str>>(words: I) -> BTreeSet<String> {
    let mut set: BTreeSet<String> = words.into_iter().flat_map(|w| w.chars().map(String::from)).collect();
    set.insert(END_OF_WORD.to_string());
    set
}

/// Standard BPE. Each step merges the most frequent adjacent pair, ties going to
/// the lexicographically smallest `(left, right)`. Stops early when no pair is left.
pub fn train_bpe(word_counts: &BTreeMap<String, u64>, num_merges: usize) -> Result<MergeTable> {
    if word_counts.is_empty() && num_merges > 0 {
        return Err(SubwordError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, u64)> = word_counts
        .iter()
        .map(|(w, &c)| (initial_symbols(w), c))
        .collect();
    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
        let Some((best, _)) = counts.iter().fold(None, |acc: Option<(&(&str, &str), u64)>, (k, &v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((k, v)),
        }) else {
            break;
        };
        let (l, r) = (best.0.to_string(), best.1.to_string());
        for (syms, _) in &mut words {
            *syms = merge_pair(syms, &l, &r);
        }
        merges.push((l, r));
    }
    MergeTable::from_merges(merges)
}

/// Repeatedly merges the lowest-ranked adjacent pair present in the word.
pub fn apply_bpe(word: &str, table: &MergeTable) -> Vec<String> {
    let mut syms = initial_symbols(word);
    loop {
        let best = syms
            .windows(2)
            .filter_map(|w| table.rank(&w[0], &w[1]).map(|r| (r, w[0].clone(), w[1].clone())))
            .min_by_key(|(r, _, _)| *r);
        match best {
            Some((_, l, r)) => syms = merge_pair(&syms, &l, &r),
            None => return syms,
        }
    }
}

/// Concatenates subwords and removes end-of-word markers.
pub fn join_subwords<S: AsRef<str>>(units: &[S]) -> String {
    units.iter().map(|u| u.as_ref().replace(END_OF_WORD, "")).collect()
}
