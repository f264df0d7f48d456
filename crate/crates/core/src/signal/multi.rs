use ndarray::{Array2, Array3, ArrayView3, Axis};
use num_complex::Complex64;

use super::{istft, stft, SignalError, Spectrogram, StftConfig, Waveform};

/// Channel-stacked STFT laid out `(bin, frame, channel)` so that each
/// frequency's `N x I` observation block is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSpectrogram {
    data: Array3<Complex64>,
    config: StftConfig,
    sample_rate: u32,
}

impl MultiSpectrogram {
    pub fn new(data: Array3<Complex64>, config: StftConfig, sample_rate: u32) -> Result<Self, SignalError> {
        config.validate()?;
        let (bins, frames, channels) = data.dim();
        if bins != config.num_bins() {
            return Err(SignalError::BinMismatch {
                bins,
                window: config.window_length,
                expected: config.num_bins(),
            });
        }
        if frames == 0 || channels == 0 {
            return Err(SignalError::EmptySignal);
        }
        Ok(Self {
            data,
            config,
            sample_rate,
        })
    }

    pub fn analyze(wave: &Waveform, config: StftConfig) -> Result<Self, SignalError> {
        if wave.num_channels() == 0 {
            return Err(SignalError::EmptySignal);
        }
        let specs = wave
            .channels()
            .iter()
            .map(|ch| stft(ch, config, wave.sample_rate()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_channels(&specs)
    }

    pub fn from_channels(specs: &[Spectrogram]) -> Result<Self, SignalError> {
        let first = specs.first().ok_or(SignalError::EmptySignal)?;
        let (bins, frames) = first.values().dim();
        let mut data = Array3::zeros((bins, frames, specs.len()));
        for (i, s) in specs.iter().enumerate() {
            if s.values().dim() != (bins, frames) || s.config() != first.config() {
                return Err(SignalError::RaggedChannels);
            }
            data.index_axis_mut(Axis(2), i).assign(&s.values());
        }
        Self::new(data, first.config(), first.sample_rate())
    }

    pub fn channel(&self, i: usize) -> Spectrogram {
        Spectrogram::new(
            self.data.index_axis(Axis(2), i).to_owned(),
            self.config,
            self.sample_rate,
        )
        .expect("validated on construction")
    }

    pub fn synthesize(&self, length: usize) -> Result<Waveform, SignalError> {
        let channels = (0..self.num_channels())
            .map(|i| istft(&self.channel(i), length))
            .collect::<Result<Vec<_>, _>>()?;
        Waveform::new(channels, self.sample_rate)
    }

    pub fn data(&self) -> ArrayView3<'_, Complex64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<Complex64> {
        self.data
    }

    /// Copy with the same STFT settings and new coefficients.
    pub fn with_data(&self, data: Array3<Complex64>) -> Result<Self, SignalError> {
        Self::new(data, self.config, self.sample_rate)
    }

    pub fn power(&self, channel: usize) -> Array2<f64> {
        self.data.index_axis(Axis(2), channel).mapv(|v| v.norm_sqr())
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_bins(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_channels(&self) -> usize {
        self.data.dim().2
    }
}
