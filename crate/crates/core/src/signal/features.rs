use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{Result, SignalError, Waveform};

/// Energy floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;
const PRE_EMPHASIS: f64 = 0.97;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            n_mels: 40,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
        }
    }
}

/// Frames × mel bands of natural-log energies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub n_mels: usize,
    pub data: Vec<f64>,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

/// Per-band mean and standard deviation pooled over many utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CmvnStats {
    pub fn estimate<'a, I: IntoIterator<Item = &'a FeatureMatrix>>(feats: I) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for f in feats {
            if sum.is_empty() {
                sum = vec![0.0; f.n_mels];
                sq = vec![0.0; f.n_mels];
            }
            if f.n_mels != sum.len() {
                return Err(SignalError::InvalidConfig(format!(
                    "band count {} differs from {}",
                    f.n_mels,
                    sum.len()
                )));
            }
            for t in 0..f.frames {
                for (m, v) in f.row(t).iter().enumerate() {
                    sum[m] += v;
                    sq[m] += v * v;
                }
            }
            n += f.frames;
        }
        if n == 0 {
            return Err(SignalError::InvalidConfig("no frames to estimate statistics".into()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / nf - m * m).max(0.0).sqrt().max(1e-5))
            .collect();
        Ok(CmvnStats { mean, std })
    }

    pub fn apply(&self, f: &FeatureMatrix) -> FeatureMatrix {
        let mut out = f.clone();
        for row in out.data.chunks_mut(f.n_mels) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

impl FeatureMatrix {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn duration_secs(&self) -> f64 {
        if self.frames == 0 {
            return 0.0;
        }
        ((self.frames - 1) as f64 * self.frame_shift_ms + self.frame_length_ms) / 1000.0
    }

    /// Per-utterance mean and variance normalisation of every band.
    pub fn normalized(&self) -> FeatureMatrix {
        let mut out = self.clone();
        let t = self.frames as f64;
        for m in 0..self.n_mels {
            let mean = (0..self.frames).map(|i| self.data[i * self.n_mels + m]).sum::<f64>() / t;
            let var = (0..self.frames)
                .map(|i| (self.data[i * self.n_mels + m] - mean).powi(2))
                .sum::<f64>()
                / t;
            let sd = var.sqrt().max(1e-5);
            for i in 0..self.frames {
                let v = &mut out.data[i * self.n_mels + m];
                *v = (*v - mean) / sd;
            }
        }
        out
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on `[0, sample_rate/2]`, equally spaced in mel.
/// Returns `(filters[n_mels][n_bins], centre frequencies in Hz)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n_bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let filters = (0..n_mels)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    (filters, edges[1..=n_mels].to_vec())
}

fn samples_for(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

pub fn logmel_features(w: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let sr = w.sample_rate();
    let frame = samples_for(cfg.frame_length_ms, sr).max(1);
    let shift = samples_for(cfg.frame_shift_ms, sr).max(1);
    let x = w.samples();
    if x.len() < frame {
        return Err(SignalError::TooShort {
            samples: x.len(),
            frame,
        });
    }
    let frames = 1 + (x.len() - frame) / shift;

    let mut emph = Vec::with_capacity(x.len());
    emph.push(x[0]);
    for i in 1..x.len() {
        emph.push(x[i] - PRE_EMPHASIS * x[i - 1]);
    }

    let n_fft = frame.next_power_of_two();
    let window: Vec<f64> = (0..frame)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / frame as f64).cos())
        .collect();
    let (filters, _) = mel_filterbank(cfg.n_mels, n_fft, sr);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut mag = vec![0.0; n_fft / 2 + 1];
    let mut data = Vec::with_capacity(frames * cfg.n_mels);

    for t in 0..frames {
        let seg = &emph[t * shift..t * shift + frame];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < frame {
                Complex::new(seg[i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, m) in mag.iter_mut().enumerate() {
            *m = buf[k].norm();
        }
        for f in &filters {
            let e: f64 = f.iter().zip(&mag).map(|(a, b)| a * b).sum();
            data.push(e.max(LOG_FLOOR).ln());
        }
    }

    Ok(FeatureMatrix {
        frames,
        n_mels: cfg.n_mels,
        data,
        frame_length_ms: cfg.frame_length_ms,
        frame_shift_ms: cfg.frame_shift_ms,
    })
}
