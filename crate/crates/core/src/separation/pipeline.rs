use serde::{Deserialize, Serialize};

use super::{
    fmvae_separate, ilrma_separate, DemixingStack, FmvaeConfig, IlrmaConfig, SeparationError, SeparationTrace,
    StepCounts, Timing, DEFAULT_VARIANCE_FLOOR,
};
use crate::models::NeuralBundle;
use crate::signal::{MultiSpectrogram, StftConfig, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ilrma,
    Fmvae,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ilrma" => Ok(Method::Ilrma),
            "fmvae" => Ok(Method::Fmvae),
            other => Err(format!("unknown method `{other}` (expected ilrma or fmvae)")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Ilrma => "ilrma",
            Method::Fmvae => "fmvae",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub method: Method,
    pub stft: StftConfig,
    /// Iterations when ILRMA is the whole method.
    pub ilrma_iterations: usize,
    /// ILRMA iterations that initialize the neural method.
    pub init_iterations: usize,
    pub fmvae_iterations: usize,
    pub nmf_rank: usize,
    /// Floor on decoder variances relative to their mean.
    #[serde(default = "default_floor")]
    pub variance_floor: f64,
    pub seed: u64,
    /// Microphone the estimates are projected back to.
    pub reference_channel: usize,
    pub timing: Timing,
}

fn default_floor() -> f64 {
    DEFAULT_VARIANCE_FLOOR
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: Method::Ilrma,
            stft: StftConfig {
                window_length: 4096,
                frame_shift: 2048,
            },
            ilrma_iterations: 100,
            init_iterations: 30,
            fmvae_iterations: 40,
            nmf_rank: 2,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            seed: 0,
            reference_channel: 0,
            timing: Timing::WallClock,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// One channel per separated source, as heard at the reference microphone.
    pub estimates: Waveform,
    /// Trace of the requested method.
    pub trace: SeparationTrace,
    /// ILRMA run that initialized the neural method.
    pub init_trace: Option<SeparationTrace>,
    pub steps: Option<StepCounts>,
}

/// Separates a multichannel recording end to end: STFT, optimization,
/// back-projection and resynthesis.
pub fn separate(
    mixture: &Waveform,
    bundle: Option<&NeuralBundle>,
    config: &PipelineConfig,
) -> Result<PipelineOutput, SeparationError> {
    let channels = mixture.num_channels();
    if config.reference_channel >= channels {
        return Err(SeparationError::Shape(format!(
            "reference channel {} out of {channels}",
            config.reference_channel
        )));
    }
    let spec = MultiSpectrogram::analyze(mixture, config.stft).map_err(|e| SeparationError::Shape(e.to_string()))?;
    let x = spec.data();
    let ilrma = |iterations| IlrmaConfig {
        iterations,
        rank: config.nmf_rank,
        seed: config.seed,
        timing: config.timing,
    };
    let (mut demixing, trace, init_trace, steps): (DemixingStack, _, _, _) = match config.method {
        Method::Ilrma => {
            let out = ilrma_separate(x, &ilrma(config.ilrma_iterations))?;
            (out.demixing, out.trace, None, None)
        }
        Method::Fmvae => {
            let bundle = bundle.ok_or_else(|| SeparationError::Shape("the neural method needs a model".into()))?;
            let mut init = ilrma_separate(x, &ilrma(config.init_iterations))?;
            init.demixing.reference_channel = config.reference_channel;
            let out = fmvae_separate(
                x,
                bundle,
                init.demixing,
                &FmvaeConfig {
                    iterations: config.fmvae_iterations,
                    num_classes: None,
                    rescale: true,
                    variance_floor: config.variance_floor,
                    timing: config.timing,
                },
            )?;
            (out.demixing, out.trace, Some(init.trace), Some(out.steps))
        }
    };
    demixing.reference_channel = config.reference_channel;
    let y = demixing.apply(x)?;
    let images = demixing.back_project(y.view())?;
    let estimates = spec
        .with_data(images)
        .and_then(|s| s.synthesize(mixture.len()))
        .map_err(|e| SeparationError::Shape(e.to_string()))?;
    Ok(PipelineOutput {
        estimates,
        trace,
        init_trace,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mixture() -> Waveform {
        let fs = 8000;
        let a: Vec<f64> = (0..8000).map(|t| (t as f64 * 0.07).sin() * (t as f64 * 0.001).cos()).collect();
        let b: Vec<f64> = (0..8000).map(|t| ((t * 7919) % 113) as f64 / 113.0 - 0.5).collect();
        let ch0 = a.iter().zip(&b).map(|(x, y)| x + 0.6 * y).collect();
        let ch1 = a.iter().zip(&b).map(|(x, y)| 0.5 * x + y).collect();
        Waveform::new(vec![ch0, ch1], fs).unwrap()
    }

    fn config(method: Method) -> PipelineConfig {
        PipelineConfig {
            method,
            stft: StftConfig::new(256, 128).unwrap(),
            ilrma_iterations: 5,
            init_iterations: 3,
            fmvae_iterations: 2,
            timing: Timing::Disabled,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn ilrma_pipeline_shapes() {
        let out = separate(&mixture(), None, &config(Method::Ilrma)).unwrap();
        assert_eq!(out.estimates.num_channels(), 2);
        assert_eq!(out.estimates.len(), 8000);
        assert_eq!(out.trace.iterations(), 5);
        assert!(out.init_trace.is_none());
    }

    #[test]
    fn fmvae_pipeline_runs_init_then_neural_steps() {
        let arch = Architecture {
            freq_bins: 129,
            num_classes: 3,
            latent_channels: 4,
            hidden: [16, 8],
            ..Architecture::default()
        };
        let bundle = NeuralBundle::random(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = separate(&mixture(), Some(&bundle), &config(Method::Fmvae)).unwrap();
        assert_eq!(out.init_trace.as_ref().unwrap().iterations(), 3);
        assert_eq!(out.trace.iterations(), 2);
        assert_eq!(out.steps.unwrap().ip, 4);
        assert!(separate(&mixture(), None, &config(Method::Fmvae)).is_err());
    }

    #[test]
    fn estimates_sum_to_reference_mixture() {
        // Back-projected images of a full-rank demixing add up to the
        // reference channel.
        let mix = mixture();
        let out = separate(&mix, None, &config(Method::Ilrma)).unwrap();
        for t in 0..mix.len() {
            let s = out.estimates.channel(0)[t] + out.estimates.channel(1)[t];
            assert!((s - mix.channel(0)[t]).abs() < 1e-8);
        }
    }

    #[test]
    fn method_names() {
        assert_eq!("fmvae".parse::<Method>().unwrap(), Method::Fmvae);
        assert!("mvae".parse::<Method>().is_err());
        assert_eq!(Method::Ilrma.to_string(), "ilrma");
    }
}
