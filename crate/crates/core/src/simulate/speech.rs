//! Deterministic toy "speech": each word is a fixed sequence of vowel-like
//! formant patterns, voiced at a speaker-specific pitch and spectral tilt.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const TOY_LEXICON: [&str; 26] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
    "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu",
];

/// Formant centres a word segment can use, in Hz.
const FORMANTS: [f64; 10] = [350.0, 500.0, 700.0, 950.0, 1250.0, 1600.0, 2000.0, 2500.0, 3000.0, 3500.0];
const SEGMENTS_PER_WORD: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub speaker_id: String,
    pub f0_hz: f64,
    /// dB per kHz applied to the harmonic amplitudes.
    pub tilt_db_per_khz: f64,
}

/// `k` voices with pitches spread over 90..260 Hz and varied tilts.
pub fn speaker_pool<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<Voice> {
    let mut slots: Vec<usize> = (0..k).collect();
    slots.shuffle(rng);
    slots
        .into_iter()
        .enumerate()
        .map(|(i, slot)| {
            let step = 170.0 / k.max(1) as f64;
            Voice {
                speaker_id: format!("spk{i:02}"),
                f0_hz: 90.0 + step * (slot as f64 + rng.random_range(0.2..0.8)),
                tilt_db_per_khz: rng.random_range(-9.0..-2.0),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySynth {
    pub sample_rate: u32,
    pub word_s: f64,
    pub gap_s: f64,
    pub amplitude: f64,
}

impl Default for ToySynth {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            word_s: 0.24,
            gap_s: 0.06,
            amplitude: 0.3,
        }
    }
}

fn word_pattern(word: &str) -> [usize; SEGMENTS_PER_WORD] {
    // Lexicon words get distinct patterns (7919 is coprime to 10^3); other
    // words fall back to FNV-1a, which is stable across runs and platforms.
    let mut h: u64 = match TOY_LEXICON.iter().position(|w| *w == word) {
        Some(i) => (i as u64 * 7919 + 123) % 1000,
        None => {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in word.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            h
        }
    };
    let mut out = [0; SEGMENTS_PER_WORD];
    for slot in out.iter_mut() {
        *slot = (h % FORMANTS.len() as u64) as usize;
        h /= FORMANTS.len() as u64;
    }
    out
}

impl ToySynth {
    pub fn word_samples(&self) -> usize {
        (self.word_s * self.sample_rate as f64).round() as usize
    }

    pub fn gap_samples(&self) -> usize {
        (self.gap_s * self.sample_rate as f64).round() as usize
    }

    /// Duration in seconds of `n_words` words.
    pub fn duration_s(&self, n_words: usize) -> f64 {
        self.samples_for(n_words) as f64 / self.sample_rate as f64
    }

    fn samples_for(&self, n_words: usize) -> usize {
        n_words * self.word_samples() + n_words.saturating_sub(1) * self.gap_samples()
    }

    pub fn synthesize(&self, words: &[String], voice: &Voice) -> Vec<f64> {
        let fs = self.sample_rate as f64;
        let nyquist = fs / 2.0;
        let word_len = self.word_samples();
        let seg_len = word_len / SEGMENTS_PER_WORD;
        let ramp = ((0.01 * fs) as usize).max(1);
        let n_harm = ((nyquist * 0.9) / voice.f0_hz).floor() as usize;
        let tilt = |f: f64| 10f64.powf(voice.tilt_db_per_khz * f / 1000.0 / 20.0);
        let weights = |formant: f64| -> Vec<f64> {
            (1..=n_harm)
                .map(|k| {
                    let f = k as f64 * voice.f0_hz;
                    let res = (-0.5 * ((f - formant) / 180.0).powi(2)).exp();
                    let res2 = 0.5 * (-0.5 * ((f - 2.3 * formant) / 250.0).powi(2)).exp();
                    (res + res2) * tilt(f)
                })
                .collect()
        };
        let mut out = vec![0.0; self.samples_for(words.len())];
        let mut phase_t = 0usize;
        for (wi, word) in words.iter().enumerate() {
            let start = wi * (word_len + self.gap_samples());
            let pattern = word_pattern(word);
            let seg_weights: Vec<Vec<f64>> = pattern.iter().map(|&p| weights(FORMANTS[p])).collect();
            let norm: f64 = seg_weights
                .iter()
                .map(|w| w.iter().map(|x| x * x).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
                .max(1e-12);
            for n in 0..word_len {
                let seg = (n / seg_len.max(1)).min(SEGMENTS_PER_WORD - 1);
                let pos = n - seg * seg_len;
                // Crossfade into the next segment over the last `ramp` samples.
                let (w_cur, w_next) = if seg + 1 < SEGMENTS_PER_WORD && pos + ramp > seg_len {
                    let a = (pos + ramp - seg_len) as f64 / ramp as f64;
                    (1.0 - 0.5 * a, 0.5 * a)
                } else if seg > 0 && pos < ramp {
                    let a = (ramp - pos) as f64 / ramp as f64;
                    (1.0 - 0.5 * a, 0.5 * a)
                } else {
                    (1.0, 0.0)
                };
                let other = if seg + 1 < SEGMENTS_PER_WORD && pos + ramp > seg_len {
                    seg + 1
                } else {
                    seg.saturating_sub(1)
                };
                let env = {
                    let edge = n.min(word_len - 1 - n);
                    if edge < ramp {
                        0.5 * (1.0 - (std::f64::consts::PI * edge as f64 / ramp as f64).cos())
                    } else {
                        1.0
                    }
                };
                let t = (phase_t + n) as f64 / fs;
                let mut v = 0.0;
                for k in 0..n_harm {
                    let a = w_cur * seg_weights[seg][k] + w_next * seg_weights[other][k];
                    if a > 1e-6 {
                        v += a * (TAU * (k + 1) as f64 * voice.f0_hz * t).sin();
                    }
                }
                out[start + n] = self.amplitude * env * v / norm;
            }
            phase_t += word_len + self.gap_samples();
        }
        out
    }
}

/// `n` words drawn uniformly from `lexicon`.
pub fn sample_sentence<R: Rng + ?Sized>(rng: &mut R, lexicon: &[&str], n: usize) -> Vec<String> {
    (0..n)
        .map(|_| lexicon[rng.random_range(0..lexicon.len())].to_string())
        .collect()
}
