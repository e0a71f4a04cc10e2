use std::collections::HashMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Result, SignalError, Waveform};
use crate::corpus::{Lexicon, DISPAR, MANDARIN_CHARS, NLSYMS};

const GRID_SIZE: usize = 40;
const GRID_LO_HZ: f64 = 200.0;
const GRID_HI_HZ: f64 = 7000.0;
const CHORD_SEED: u64 = 0x5eed_c0de;
const CROSSFADE_SECS: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthAudio {
    pub sample_rate: u32,
    pub snr_db: f64,
    /// Peak amplitude of each chord component.
    pub amplitude: f64,
}

impl Default for SynthAudio {
    fn default() -> Self {
        SynthAudio {
            sample_rate: 16000,
            snr_db: 30.0,
            amplitude: 0.15,
        }
    }
}

/// Maps acoustic symbols to three-tone chords. Distinct symbols get distinct chords.
#[derive(Debug, Clone)]
pub struct SignatureBank {
    chords: HashMap<String, [f64; 3]>,
}

impl SignatureBank {
    pub fn new<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let grid: Vec<f64> = (0..GRID_SIZE)
            .map(|i| GRID_LO_HZ * (GRID_HI_HZ / GRID_LO_HZ).powf(i as f64 / (GRID_SIZE - 1) as f64))
            .collect();
        let mut combos = Vec::new();
        for a in 0..GRID_SIZE {
            for b in a + 2..GRID_SIZE {
                for c in b + 2..GRID_SIZE {
                    combos.push([a, b, c]);
                }
            }
        }
        combos.shuffle(&mut ChaCha8Rng::seed_from_u64(CHORD_SEED));
        let mut chords = HashMap::new();
        let mut next = 0;
        for s in symbols {
            let s = s.into();
            if chords.contains_key(&s) {
                continue;
            }
            let [a, b, c] = combos[next];
            next += 1;
            chords.insert(s, [grid[a], grid[b], grid[c]]);
        }
        SignatureBank { chords }
    }

    /// Synthetic Mandarin stand-ins, ASCII letters, apostrophe and hyphen, the
    /// bundled particle and nonlinguistic labels, and the two merged labels.
    pub fn standard() -> Self {
        let lex = Lexicon::bundled();
        let mut symbols: Vec<String> = MANDARIN_CHARS.iter().map(|c| c.to_string()).collect();
        symbols.extend(('a'..='z').chain('A'..='Z').chain(['\'', '-']).map(String::from));
        symbols.extend(lex.particles().map(String::from));
        symbols.extend(lex.nonlinguistic().map(String::from));
        symbols.extend([DISPAR.to_string(), NLSYMS.to_string()]);
        SignatureBank::new(symbols)
    }

    pub fn chord(&self, symbol: &str) -> Option<[f64; 3]> {
        self.chords.get(symbol).copied()
    }

    /// Whole-token chord, or one chord per character for spelled-out words.
    fn segments(&self, token: &str) -> Result<Vec<[f64; 3]>> {
        if let Some(c) = self.chord(token) {
            return Ok(vec![c]);
        }
        token
            .chars()
            .map(|ch| {
                self.chord(&ch.to_string())
                    .ok_or_else(|| SignalError::UnknownToken(token.to_string()))
            })
            .collect()
    }
}

/// Renders tokens as consecutive chord segments of `1/rate` seconds each, with
/// raised-cosine ramps at token boundaries and additive Gaussian noise.
pub fn synth_waveform<S: AsRef<str>>(
    tokens: &[S],
    rate: f64,
    seed: u64,
    bank: &SignatureBank,
    audio: &SynthAudio,
) -> Result<Waveform> {
    let sr = audio.sample_rate as f64;
    let token_len = (sr / rate).round() as usize;
    let fade = ((CROSSFADE_SECS * sr).round() as usize).min(token_len / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(tokens.len() * token_len);

    for tok in tokens {
        let segs = bank.segments(tok.as_ref())?;
        let start = out.len();
        for (k, chord) in segs.iter().enumerate() {
            let a = k * token_len / segs.len();
            let b = (k + 1) * token_len / segs.len();
            let phases: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>() * 2.0 * PI);
            for i in a..b {
                let t = i as f64 / sr;
                let v: f64 = chord
                    .iter()
                    .zip(phases)
                    .map(|(f, p)| (2.0 * PI * f * t + p).sin())
                    .sum();
                out.push(audio.amplitude * v);
            }
        }
        for i in 0..fade {
            let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
            out[start + i] *= g;
            out[start + token_len - 1 - i] *= g;
        }
    }

    if !out.is_empty() && audio.snr_db.is_finite() {
        let power = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
        let sd = (power / 10f64.powf(audio.snr_db / 10.0)).sqrt();
        if sd > 0.0 {
            let normal = Normal::new(0.0, sd).expect("finite positive deviation");
            for v in &mut out {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Waveform::new(out, audio.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_tokens_empty_waveform() {
        let w = synth_waveform::<&str>(&[], 3.0, 1, &SignatureBank::standard(), &SynthAudio::default()).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let bank = SignatureBank::standard();
        let toks = ["我", "go", "lah"];
        let a = synth_waveform(&toks, 3.0, 9, &bank, &SynthAudio::default()).unwrap();
        let b = synth_waveform(&toks, 3.0, 9, &bank, &SynthAudio::default()).unwrap();
        let c = synth_waveform(&toks, 3.0, 10, &bank, &SynthAudio::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn doubling_rate_halves_duration() {
        let bank = SignatureBank::standard();
        let toks = ["我", "go", "你", "take", "了"];
        let cfg = SynthAudio::default();
        let slow = synth_waveform(&toks, 2.0, 1, &bank, &cfg).unwrap();
        let fast = synth_waveform(&toks, 4.0, 1, &bank, &cfg).unwrap();
        let xf = CROSSFADE_SECS;
        assert!((slow.duration_secs() / 2.0 - fast.duration_secs()).abs() <= xf);
    }

    #[test]
    fn unknown_token_rejected() {
        let err = synth_waveform(&["ж"], 3.0, 1, &SignatureBank::standard(), &SynthAudio::default());
        assert!(matches!(err, Err(SignalError::UnknownToken(_))));
    }

    #[test]
    fn chords_are_distinct() {
        let bank = SignatureBank::standard();
        let mut seen: Vec<[u64; 3]> = bank.chords.values().map(|c| c.map(f64::to_bits)).collect();
        let n = seen.len();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), n);
    }
}
