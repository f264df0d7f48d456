use std::path::Path;

use hound::{SampleFormat as HoundFormat, WavReader, WavSpec, WavWriter};

use super::{SignalError, Waveform};

/// Sample encodings accepted by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, SignalError> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels);
    if channels == 0 {
        return Err(SignalError::UnsupportedFormat("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (HoundFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        (HoundFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / f64::from(1u32 << (bits - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) * scale))
                .collect::<Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(SignalError::UnsupportedFormat(format!(
                "{bits}-bit {fmt:?}"
            )))
        }
    };
    let mut data = vec![Vec::with_capacity(interleaved.len() / channels); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (ch, &v) in data.iter_mut().zip(frame) {
            ch.push(v);
        }
    }
    Waveform::new(data, spec.sample_rate)
}

/// Writes `wave` to `path`. PCM output is clipped to [-1, 1].
pub fn write_wav(
    path: impl AsRef<Path>,
    wave: &Waveform,
    format: SampleFormat,
) -> Result<(), SignalError> {
    let channels = u16::try_from(wave.num_channels())
        .map_err(|_| SignalError::UnsupportedFormat("too many channels".into()))?;
    if channels == 0 {
        return Err(SignalError::UnsupportedFormat("zero channels".into()));
    }
    let (bits, sample_format) = match format {
        SampleFormat::Pcm16 => (16, HoundFormat::Int),
        SampleFormat::Float32 => (32, HoundFormat::Float),
    };
    let spec = WavSpec {
        channels,
        sample_rate: wave.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for t in 0..wave.len() {
        for ch in wave.channels() {
            match format {
                SampleFormat::Pcm16 => {
                    let v = (ch[t].clamp(-1.0, 1.0) * 32767.0).round() as i16;
                    writer.write_sample(v)?;
                }
                SampleFormat::Float32 => writer.write_sample(ch[t] as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let a: Vec<f64> = (0..100).map(|i| f64::from((i as f32 * 0.37).sin())).collect();
        let b: Vec<f64> = a.iter().map(|v| -v * 0.5).collect();
        let wave = Waveform::new(vec![a, b], 16_000).unwrap();
        write_wav(&path, &wave, SampleFormat::Float32).unwrap();
        assert_eq!(read_wav(&path).unwrap(), wave);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let a: Vec<f64> = (0..200).map(|i| (i as f64 * 0.1).sin() * 0.9).collect();
        let wave = Waveform::mono(a.clone(), 8000).unwrap();
        write_wav(&path, &wave, SampleFormat::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 8000);
        for (x, y) in back.channel(0).iter().zip(&a) {
            assert!((x - y).abs() < 1.0 / 16_000.0);
        }
    }

    #[test]
    fn malformed_header_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFX0000WAVEjunk").unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(matches!(err, SignalError::Wav(_)), "{err}");
    }
}
