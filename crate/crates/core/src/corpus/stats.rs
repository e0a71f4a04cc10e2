use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, Lang, Result, Transcript, UttClass};

/// Adjacent-pair counts over language-bearing tokens; neutral tokens are skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SwitchCounts {
    pub pairs: usize,
    pub man_to_eng: usize,
    pub eng_to_man: usize,
}

impl SwitchCounts {
    pub fn switches(&self) -> usize {
        self.man_to_eng + self.eng_to_man
    }

    fn add(&mut self, o: SwitchCounts) {
        self.pairs += o.pairs;
        self.man_to_eng += o.man_to_eng;
        self.eng_to_man += o.eng_to_man;
    }
}

pub fn switch_counts(t: &Transcript) -> SwitchCounts {
    let langs: Vec<Lang> = t
        .tokens()
        .iter()
        .map(|tok| tok.kind.lang())
        .filter(|&l| l != Lang::Neutral)
        .collect();
    let mut c = SwitchCounts::default();
    for w in langs.windows(2) {
        c.pairs += 1;
        match (w[0], w[1]) {
            (Lang::Mandarin, Lang::English) => c.man_to_eng += 1,
            (Lang::English, Lang::Mandarin) => c.eng_to_man += 1,
            _ => {}
        }
    }
    c
}

/// Per-split statistics with the columns of a corpus summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub split: String,
    pub speakers: usize,
    pub utterances: usize,
    pub hours: f64,
    /// Percentages over all utterances.
    pub cs_pct: f64,
    pub man_pct: f64,
    pub eng_pct: f64,
    /// Fractions of counted adjacent pairs.
    pub switch_ratio: f64,
    pub man_to_eng_ratio: f64,
    pub eng_to_man_ratio: f64,
    pub counted_pairs: usize,
}

pub fn corpus_stats(data: &Dataset) -> Result<CorpusStats> {
    if data.is_empty() {
        return Err(CorpusError::Empty);
    }
    let speakers: BTreeSet<&str> = data.utterances.iter().map(|u| u.speaker.as_str()).collect();
    let n = data.len() as f64;
    let pct = |c: UttClass| 100.0 * data.utterances.iter().filter(|u| u.class == Some(c)).count() as f64 / n;
    let mut sc = SwitchCounts::default();
    for u in &data.utterances {
        sc.add(switch_counts(&u.transcript));
    }
    let ratio = |k: usize| if sc.pairs == 0 { 0.0 } else { k as f64 / sc.pairs as f64 };
    Ok(CorpusStats {
        split: data.split.to_string(),
        speakers: speakers.len(),
        utterances: data.len(),
        hours: data.utterances.iter().map(|u| u.duration_secs()).sum::<f64>() / 3600.0,
        cs_pct: pct(UttClass::Cs),
        man_pct: pct(UttClass::Man),
        eng_pct: pct(UttClass::Eng),
        switch_ratio: ratio(sc.switches()),
        man_to_eng_ratio: ratio(sc.man_to_eng),
        eng_to_man_ratio: ratio(sc.eng_to_man),
        counted_pairs: sc.pairs,
    })
}

impl CorpusStats {
    pub const HEADER: &'static str = "Sets     #spk    #utt     #hrs      CS     MAN     ENG  switch    M->E    E->M";
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<6} {:>6} {:>7} {:>8.4} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            self.split,
            self.speakers,
            self.utterances,
            self.hours,
            self.cs_pct,
            self.man_pct,
            self.eng_pct,
            100.0 * self.switch_ratio,
            100.0 * self.man_to_eng_ratio,
            100.0 * self.eng_to_man_ratio,
        )
    }
}
