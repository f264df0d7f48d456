//! Synthetic labelled corpus: each class is a harmonic voice with its own
//! formant envelope, spectral tilt and pitch range. Pitch varies freely
//! within the range and glides within syllables, so like speech a voice is
//! not a low-rank spectrogram.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RoomError;
use crate::signal::{read_wav, write_wav, SampleFormat, Waveform};

const FORMANT_SETS: [[(f64, f64); 3]; 6] = [
    [(730.0, 90.0), (1090.0, 110.0), (2440.0, 170.0)],
    [(270.0, 60.0), (2290.0, 100.0), (3010.0, 120.0)],
    [(570.0, 80.0), (840.0, 100.0), (2410.0, 150.0)],
    [(440.0, 70.0), (1020.0, 100.0), (2240.0, 140.0)],
    [(660.0, 90.0), (1720.0, 110.0), (2410.0, 160.0)],
    [(300.0, 60.0), (870.0, 90.0), (2240.0, 140.0)],
];

/// Top of a class's pitch range relative to its base pitch.
const PITCH_SPAN: f64 = 1.35;
/// Largest relative pitch change over one syllable.
const MAX_GLIDE: f64 = 0.1;

const TARGET_RMS: f64 = 0.1;
const NOISE_RMS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct VoiceTemplate {
    /// Lowest and highest syllable-onset pitch in Hz.
    pub f0_range: (f64, f64),
    /// (center, bandwidth) pairs in Hz.
    pub formants: Vec<(f64, f64)>,
    pub tilt: f64,
}

impl VoiceTemplate {
    /// Relative amplitude of a harmonic at `freq`.
    pub fn envelope(&self, freq: f64) -> f64 {
        let resonance: f64 = self
            .formants
            .iter()
            .map(|&(center, bw)| 1.0 / (1.0 + ((freq - center) / bw).powi(2)))
            .sum();
        (resonance + 0.02) * (1000.0 / (freq + 1000.0)).powf(self.tilt)
    }
}

/// The voice for `class`. Independent of any seed, so training and test data
/// share their classes.
pub fn voice_template(class: usize) -> VoiceTemplate {
    let cycle = class / FORMANT_SETS.len();
    let stretch = 1.0 + 0.07 * cycle as f64;
    let base = 100.0 * 1.3f64.powi((class % FORMANT_SETS.len()) as i32) * (1.0 + 0.04 * cycle as f64);
    VoiceTemplate {
        f0_range: (base, base * PITCH_SPAN),
        formants: FORMANT_SETS[class % FORMANT_SETS.len()]
            .iter()
            .map(|&(f, b)| (f * stretch, b * stretch))
            .collect(),
        tilt: 0.5 + 0.25 * (class % 3) as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub classes: usize,
    pub utterances_per_class: usize,
    /// Seconds per utterance.
    pub duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            utterances_per_class: 40,
            duration: 4.0,
            sample_rate: 16_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWaveform {
    pub label: usize,
    pub samples: Vec<f64>,
}

/// Class-major list of utterances, deterministic in `config.seed`.
pub fn toy_corpus(config: &ToyCorpusConfig) -> Result<Vec<LabeledWaveform>, RoomError> {
    if config.classes == 0 || config.sample_rate == 0 || !(config.duration > 0.0) {
        return Err(RoomError::Invalid(
            "corpus needs at least one class, a positive duration and sample rate".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.classes * config.utterances_per_class);
    for class in 0..config.classes {
        for _ in 0..config.utterances_per_class {
            out.push(LabeledWaveform {
                label: class,
                samples: toy_utterance(class, config.duration, config.sample_rate, &mut rng),
            });
        }
    }
    Ok(out)
}

/// One utterance of `class`: voiced syllables of 0.2 to 0.45 s separated by
/// short gaps, over a faint white noise floor.
pub fn toy_utterance<R: Rng>(class: usize, duration: f64, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    let voice = voice_template(class);
    let fs = f64::from(sample_rate);
    let len = (duration * fs).round() as usize;
    let mut out = vec![0.0; len];
    let mut pos = (rng.gen_range(0.0..0.1) * fs) as usize;
    while pos < len {
        let syl_len = ((rng.gen_range(0.2..0.45) * fs) as usize).min(len - pos);
        let f0 = rng.gen_range(voice.f0_range.0..voice.f0_range.1);
        let glide = rng.gen_range(-MAX_GLIDE..MAX_GLIDE) / syl_len as f64;
        let peak = rng.gen_range(0.5..1.0);
        let attack = rng.gen_range(0.02..0.06) * fs;
        let decay_rate = rng.gen_range(1.0..4.0) / fs;
        let release = 0.04 * fs;
        let envelope: Vec<f64> = (0..syl_len)
            .map(|n| {
                let t = n as f64;
                let rise = if t < attack { 0.5 - 0.5 * (PI * t / attack).cos() } else { 1.0 };
                let left = (syl_len - n) as f64;
                let fall = if left < release { 0.5 - 0.5 * (PI * left / release).cos() } else { 1.0 };
                peak * rise * fall * (-decay_rate * t).exp()
            })
            .collect();
        let pitch: Vec<f64> = (0..syl_len).map(|n| f0 * (1.0 + glide * n as f64)).collect();
        let top = f0 * (1.0 + MAX_GLIDE);
        let mut harmonic = 1;
        while harmonic as f64 * top < 0.45 * fs {
            let h = harmonic as f64;
            let mut phase = rng.gen_range(0.0..2.0 * PI);
            for ((slot, &e), &p) in out[pos..pos + syl_len].iter_mut().zip(&envelope).zip(&pitch) {
                let freq = h * p;
                *slot += voice.envelope(freq) * e * phase.cos();
                phase = (phase + 2.0 * PI * freq / fs) % (2.0 * PI);
            }
            harmonic += 1;
        }
        pos += syl_len + (rng.gen_range(0.03..0.15) * fs) as usize;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    let scale = if rms > 0.0 { TARGET_RMS / rms } else { 0.0 };
    // Uniform noise on [-a, a] has RMS a / sqrt(3).
    let a = NOISE_RMS * 3f64.sqrt();
    for v in out.iter_mut() {
        *v = *v * scale + rng.gen_range(-a..a);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub file: String,
    pub label: usize,
}

/// Index file of an exported corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub sample_rate: u32,
    pub classes: usize,
    pub utterances: Vec<CorpusEntry>,
}

/// Writes `corpus.json` plus `class<c>/utt<k>.wav` (float32) under `dir`.
pub fn save_corpus(dir: &Path, corpus: &[LabeledWaveform], sample_rate: u32) -> Result<CorpusIndex, RoomError> {
    fs::create_dir_all(dir)?;
    let classes = corpus.iter().map(|u| u.label + 1).max().unwrap_or(0);
    let mut counts = vec![0usize; classes];
    let mut utterances = Vec::with_capacity(corpus.len());
    for utt in corpus {
        let k = counts[utt.label];
        counts[utt.label] += 1;
        let rel = format!("class{}/utt{:04}.wav", utt.label, k);
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().expect("file has a parent"))?;
        write_wav(&path, &Waveform::mono(utt.samples.clone(), sample_rate)?, SampleFormat::Float32)?;
        utterances.push(CorpusEntry {
            file: rel,
            label: utt.label,
        });
    }
    let index = CorpusIndex {
        sample_rate,
        classes,
        utterances,
    };
    fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusIndex, Vec<LabeledWaveform>), RoomError> {
    let index: CorpusIndex = serde_json::from_str(&fs::read_to_string(dir.join("corpus.json"))?)?;
    let mut out = Vec::with_capacity(index.utterances.len());
    for entry in &index.utterances {
        let wav = read_wav(&dir.join(&entry.file))?;
        if wav.sample_rate() != index.sample_rate {
            return Err(RoomError::Invalid(format!("{} has the wrong sample rate", entry.file)));
        }
        out.push(LabeledWaveform {
            label: entry.label,
            samples: wav.into_channels().swap_remove(0),
        });
    }
    Ok((index, out))
}
