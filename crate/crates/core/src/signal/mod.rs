//! Waveforms, speed modification, log-mel features and synthetic audio.

mod features;
mod synth;
mod wav;

pub use features::{hz_to_mel, logmel_features, mel_filterbank, mel_to_hz, CmvnStats, FeatureMatrix, FrontendConfig, LOG_FLOOR};
pub use synth::{synth_waveform, SignatureBank, SynthAudio};
pub use wav::{read_wav, write_wav};

use thiserror::Error;

use crate::corpus::{Audio, Dataset, Split, Utterance};

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("speed factor {0} outside [0.5, 2.0]")]
    FactorOutOfRange(f64),
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("waveform of {samples} samples is shorter than one {frame}-sample frame")]
    TooShort { samples: usize, frame: usize },
    #[error("no spectral signature for token {0:?}")]
    UnknownToken(String),
    #[error("speed perturbation applies to the train split only, got {0}")]
    NotTrainSplit(Split),
    #[error("utterance {0:?} has no waveform")]
    NoWaveform(String),
    #[error("wav: {0}")]
    Wav(String),
    #[error("invalid feature configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SignalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(SignalError::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(SignalError::InvalidWaveform(format!("non-finite sample at {i}")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Plain resampling by linear interpolation: output sample `i` reads the input
/// at position `i·factor`. Factors below 1 slow speech down and lower pitch.
pub fn resample_speed(w: &Waveform, factor: f64) -> Result<Waveform> {
    if !(0.5..=2.0).contains(&factor) || !factor.is_finite() {
        return Err(SignalError::FactorOutOfRange(factor));
    }
    if factor == 1.0 {
        return Ok(w.clone());
    }
    let n = w.samples.len();
    let out_len = (n as f64 / factor).round() as usize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * factor;
        let j = pos.floor() as usize;
        let frac = pos - j as f64;
        let v = if j + 1 < n {
            w.samples[j] * (1.0 - frac) + w.samples[j + 1] * frac
        } else {
            w.samples[n - 1]
        };
        out.push(v);
    }
    Waveform::new(out, w.sample_rate)
}

pub const PERTURB_FACTORS: [f64; 3] = [0.9, 1.0, 1.1];

pub fn speed_suffix(factor: f64) -> String {
    format!("-sp{factor:.1}")
}

/// Three copies of every training utterance at speeds 0.9, 1.0 and 1.1.
pub fn perturb_3way(data: &Dataset) -> Result<Dataset> {
    if data.split != Split::Train {
        return Err(SignalError::NotTrainSplit(data.split));
    }
    let mut utterances = Vec::with_capacity(3 * data.len());
    for u in &data.utterances {
        let w = u.waveform().ok_or_else(|| SignalError::NoWaveform(u.id.clone()))?;
        for f in PERTURB_FACTORS {
            utterances.push(Utterance {
                id: format!("{}{}", u.id, speed_suffix(f)),
                speaker: u.speaker.clone(),
                audio: Audio::Wave(resample_speed(w, f)?),
                transcript: u.transcript.clone(),
                class: u.class,
            });
        }
    }
    Ok(Dataset {
        split: data.split,
        utterances,
    })
}

/// Applies one speed factor to every utterance, keeping ids.
pub fn slow_down(data: &Dataset, factor: f64) -> Result<Dataset> {
    let utterances = data
        .utterances
        .iter()
        .map(|u| {
            let w = u.waveform().ok_or_else(|| SignalError::NoWaveform(u.id.clone()))?;
            Ok(Utterance {
                audio: Audio::Wave(resample_speed(w, factor)?),
                ..u.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        split: data.split,
        utterances,
    })
}
