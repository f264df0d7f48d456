use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use super::SignalError;

/// Analysis parameters shared by [`stft`] and [`istft`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub frame_shift: usize,
}

impl StftConfig {
    pub fn new(window_length: usize, frame_shift: usize) -> Result<Self, SignalError> {
        let cfg = Self {
            window_length,
            frame_shift,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Window and shift given in milliseconds at `sample_rate`.
    pub fn from_ms(sample_rate: u32, window_ms: f64, shift_ms: f64) -> Result<Self, SignalError> {
        let to_samples = |ms: f64| (ms * f64::from(sample_rate) / 1000.0).round() as usize;
        Self::new(to_samples(window_ms), to_samples(shift_ms))
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.window_length == 0 || self.window_length % 2 != 0 {
            return Err(SignalError::OddWindow(self.window_length));
        }
        if self.frame_shift == 0 || self.frame_shift > self.window_length {
            return Err(SignalError::BadShift {
                shift: self.frame_shift,
                window: self.window_length,
            });
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    /// Zeros prepended before the first frame so the first sample is covered
    /// by as many frames as any interior sample.
    pub fn front_padding(&self) -> usize {
        self.window_length - self.frame_shift
    }

    pub fn num_frames(&self, signal_len: usize) -> usize {
        signal_len.div_ceil(self.frame_shift).max(1)
    }
}

/// One-sided STFT of a single channel, `F x N` (bins by frames).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Array2<Complex64>,
    config: StftConfig,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn new(
        values: Array2<Complex64>,
        config: StftConfig,
        sample_rate: u32,
    ) -> Result<Self, SignalError> {
        config.validate()?;
        let bins = values.nrows();
        if bins != config.num_bins() {
            return Err(SignalError::BinMismatch {
                bins,
                window: config.window_length,
                expected: config.num_bins(),
            });
        }
        if values.ncols() == 0 {
            return Err(SignalError::EmptySignal);
        }
        Ok(Self {
            values,
            config,
            sample_rate,
        })
    }

    pub fn values(&self) -> ArrayView2<'_, Complex64> {
        self.values.view()
    }

    pub fn values_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<Complex64> {
        self.values
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn window_length(&self) -> usize {
        self.config.window_length
    }

    pub fn frame_shift(&self) -> usize {
        self.config.frame_shift
    }
}

/// Periodic Hamming window (the DFT-even variant).
pub fn hamming_periodic(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

pub fn stft(
    signal: &[f64],
    config: StftConfig,
    sample_rate: u32,
) -> Result<Spectrogram, SignalError> {
    config.validate()?;
    if signal.is_empty() {
        return Err(SignalError::EmptySignal);
    }
    let win = config.window_length;
    let hop = config.frame_shift;
    if signal.len() < win {
        log::warn!(
            "signal of {} samples is shorter than one {}-sample window; zero-padding",
            signal.len(),
            win
        );
    }
    let pad = config.front_padding();
    let frames = config.num_frames(signal.len());
    let window = hamming_periodic(win);

    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(win);
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();

    let mut values = Array2::<Complex64>::zeros((config.num_bins(), frames));
    for n in 0..frames {
        let start = n * hop;
        for (t, slot) in input.iter_mut().enumerate() {
            let padded = start + t;
            *slot = if padded >= pad && padded - pad < signal.len() {
                signal[padded - pad] * window[t]
            } else {
                0.0
            };
        }
        fft.process_with_scratch(&mut input, &mut output, &mut scratch)
            .expect("buffer sizes come from the planner");
        values.column_mut(n).assign(&ndarray::ArrayView1::from(&output[..]));
    }
    Spectrogram::new(values, config, sample_rate)
}

/// Weighted overlap-add synthesis: each frame is windowed again and the sum
/// is divided by the accumulated squared window, which inverts [`stft`]
/// exactly for any shift up to the window length.
pub fn istft(spec: &Spectrogram, original_length: usize) -> Result<Vec<f64>, SignalError> {
    let config = spec.config();
    config.validate()?;
    let win = config.window_length;
    let hop = config.frame_shift;
    if spec.num_bins() != config.num_bins() {
        return Err(SignalError::BinMismatch {
            bins: spec.num_bins(),
            window: win,
            expected: config.num_bins(),
        });
    }
    let frames = spec.num_frames();
    let pad = config.front_padding();
    let covered = frames * hop;
    if original_length > covered {
        return Err(SignalError::LengthTooLong {
            requested: original_length,
            covered,
        });
    }
    let window = hamming_periodic(win);
    let total = (frames - 1) * hop + win;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];

    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(win);
    let mut input = ifft.make_input_vec();
    let mut output = ifft.make_output_vec();
    let mut scratch = ifft.make_scratch_vec();
    let last = input.len() - 1;
    let scale = 1.0 / win as f64;

    for n in 0..frames {
        for (slot, v) in input.iter_mut().zip(spec.values().column(n)) {
            *slot = *v;
        }
        input[0].im = 0.0;
        input[last].im = 0.0;
        ifft.process_with_scratch(&mut input, &mut output, &mut scratch)
            .expect("buffer sizes come from the planner");
        let start = n * hop;
        for t in 0..win {
            acc[start + t] += output[t] * scale * window[t];
            norm[start + t] += window[t] * window[t];
        }
    }

    Ok((pad..pad + original_length)
        .map(|i| acc[i] / norm[i])
        .collect())
}
