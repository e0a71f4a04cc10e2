use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Lexicon, Result, Transcript, UttClass};
use crate::signal::{read_wav, write_wav, FeatureMatrix, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub audio_path: String,
    pub speaker: String,
    pub transcript: String,
}

/// One split's utterance list. Serialized as TSV: `id, audio path, speaker, transcript`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub split: Split,
    records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(split: Split, records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Manifest { split, records })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.id, r.audio_path, r.speaker, r.transcript));
        }
        out
    }

    pub fn parse_tsv(split: Split, text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(CorpusError::Parse {
                    line: i + 1,
                    reason: format!("expected 4 tab-separated fields, got {}", fields.len()),
                });
            }
            records.push(ManifestRecord {
                id: fields[0].to_string(),
                audio_path: fields[1].to_string(),
                speaker: fields[2].to_string(),
                transcript: fields[3].to_string(),
            });
        }
        Manifest::new(split, records)
    }

    pub fn read(split: Split, path: &Path) -> Result<Self> {
        Manifest::parse_tsv(split, &std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// Audio paths are resolved relative to `base`.
    pub fn check_audio(&self, base: &Path) -> Result<()> {
        for r in &self.records {
            let p = base.join(&r.audio_path);
            if !p.is_file() {
                return Err(CorpusError::MissingAudio {
                    id: r.id.clone(),
                    path: p.display().to_string(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Audio {
    Wave(Waveform),
    Features(FeatureMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub audio: Audio,
    pub transcript: Transcript,
    pub class: Option<UttClass>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, speaker: impl Into<String>, audio: Audio, transcript: Transcript) -> Self {
        let class = transcript.class();
        Utterance {
            id: id.into(),
            speaker: speaker.into(),
            audio,
            transcript,
            class,
        }
    }

    pub fn waveform(&self) -> Option<&Waveform> {
        match &self.audio {
            Audio::Wave(w) => Some(w),
            Audio::Features(_) => None,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        match &self.audio {
            Audio::Wave(w) => w.duration_secs(),
            Audio::Features(f) => f.duration_secs(),
        }
    }
}

/// A split held in memory with its audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Manifest whose audio paths are `<audio_dir>/<id>.wav`.
    pub fn manifest(&self, audio_dir: &str) -> Result<Manifest> {
        let records = self
            .utterances
            .iter()
            .map(|u| ManifestRecord {
                id: u.id.clone(),
                audio_path: format!("{audio_dir}/{}.wav", u.id),
                speaker: u.speaker.clone(),
                transcript: u.transcript.surface(),
            })
            .collect();
        Manifest::new(self.split, records)
    }

    /// Writes the manifest to `dir/<split>.tsv` and waveforms under `dir/<audio_dir>/`.
    pub fn save(&self, dir: &Path, audio_dir: &str) -> Result<PathBuf> {
        let adir = dir.join(audio_dir);
        std::fs::create_dir_all(&adir)?;
        for u in &self.utterances {
            if let Some(w) = u.waveform() {
                write_wav(&adir.join(format!("{}.wav", u.id)), w)?;
            }
        }
        let path = dir.join(format!("{}.tsv", self.split));
        self.manifest(audio_dir)?.write(&path)?;
        Ok(path)
    }

    pub fn load(manifest: &Manifest, base: &Path, lexicon: &Lexicon) -> Result<Self> {
        manifest.check_audio(base)?;
        let mut utterances = Vec::with_capacity(manifest.len());
        for r in manifest.records() {
            let w = read_wav(&base.join(&r.audio_path))?;
            utterances.push(Utterance::new(
                r.id.clone(),
                r.speaker.clone(),
                Audio::Wave(w),
                Transcript::parse(&r.transcript, lexicon),
            ));
        }
        Ok(Dataset {
            split: manifest.split,
            utterances,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            audio_path: format!("wav/{id}.wav"),
            speaker: "s1".into(),
            transcript: "我 GO 了".into(),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(matches!(
            Manifest::new(Split::Train, vec![rec("a"), rec("a")]),
            Err(CorpusError::DuplicateId(_))
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let m = Manifest::new(Split::Dev, vec![rec("a"), rec("b")]).unwrap();
        let back = Manifest::parse_tsv(Split::Dev, &m.to_tsv()).unwrap();
        assert_eq!(m, back);
        assert!(Manifest::parse_tsv(Split::Dev, "a\tb\tc\n").is_err());
    }

    #[test]
    fn missing_audio_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(Split::Dev, vec![rec("a")]).unwrap();
        assert!(matches!(m.check_audio(dir.path()), Err(CorpusError::MissingAudio { .. })));
    }
}
