//! Waveform containers, WAV I/O and the STFT analysis/synthesis pair.

mod multi;
mod stft;
mod wav;

pub use multi::MultiSpectrogram;
pub use stft::{hamming_periodic, istft, stft, Spectrogram, StftConfig};
pub use wav::{read_wav, write_wav, SampleFormat};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("empty signal")]
    EmptySignal,
    #[error("window length {0} must be even and non-zero")]
    OddWindow(usize),
    #[error("frame shift {shift} must satisfy 0 < shift <= window length {window}")]
    BadShift { shift: usize, window: usize },
    #[error("spectrogram has {bins} bins but window length {window} implies {expected}")]
    BinMismatch {
        bins: usize,
        window: usize,
        expected: usize,
    },
    #[error("requested length {requested} exceeds the {covered} samples covered by the spectrogram")]
    LengthTooLong { requested: usize, covered: usize },
    #[error("channels have unequal lengths")]
    RaggedChannels,
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedFormat(String),
    #[error("WAV error: {0}")]
    Wav(#[from] hound::Error),
}

/// Multichannel time-domain signal. Every channel has the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self, SignalError> {
        if sample_rate == 0 {
            return Err(SignalError::ZeroSampleRate);
        }
        if let Some(first) = channels.first() {
            if channels.iter().any(|c| c.len() != first.len()) {
                return Err(SignalError::RaggedChannels);
            }
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }
}
