use ndarray::{Array2, ArrayView2, ArrayView3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{neg_log_likelihood, update_gain, DemixingStack, SeparationError, SeparationTrace, Timing};
use crate::models::{NeuralBundle, SourceModelState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmvaeConfig {
    pub iterations: usize,
    /// Class count the caller expects the bundle to provide.
    pub num_classes: Option<usize>,
    /// Rescale the demixing filters to the reference microphone before
    /// every sweep. Both the initializer and the projection step leave each
    /// filter's scale per frequency arbitrary; the projection step in
    /// particular imprints the decoder's own spectral envelope on the
    /// estimates, so without rescaling a wrong class guess reinforces
    /// itself. The likelihood is invariant to this rescaling.
    pub rescale: bool,
    /// Lower bound on the decoder variances as a fraction of their mean.
    /// Projection weights each cell by `1/sigma^2`, so a decoder that
    /// extrapolates to near-zero variances lets a few cells dominate the
    /// update and the separation collapses. Zero disables the floor.
    pub variance_floor: f64,
    pub timing: Timing,
}

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;

impl Default for FmvaeConfig {
    fn default() -> Self {
        Self {
            iterations: 40,
            num_classes: None,
            rescale: true,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            timing: Timing::WallClock,
        }
    }
}

/// How often each building block ran. The fast algorithm is made of these
/// five forward computations and nothing else.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounts {
    pub classifier: usize,
    pub encoder: usize,
    pub decoder: usize,
    pub gain: usize,
    pub ip: usize,
}

#[derive(Debug, Clone)]
pub struct FmvaeOutput {
    pub demixing: DemixingStack,
    pub states: Vec<SourceModelState>,
    pub trace: SeparationTrace,
    pub steps: StepCounts,
}

/// Fast neural-source-model separation starting from `init`.
///
/// Each iteration visits the sources in order and, for source `j`:
/// (a) sets `c_j` to the classifier posterior of `|y_j|^2`,
/// (b) sets `z_j` to the encoder mean given `(|y_j|^2, c_j)`,
/// (c) refreshes `sigma^2` from the decoder and the gain `g_j` in closed form,
/// (d) updates `w_j` in every bin by iterative projection.
pub fn fmvae_separate(
    x: ArrayView3<'_, Complex64>,
    bundle: &NeuralBundle,
    init: DemixingStack,
    config: &FmvaeConfig,
) -> Result<FmvaeOutput, SeparationError> {
    if let Some(expected) = config.num_classes {
        if expected != bundle.num_classes {
            return Err(SeparationError::ClassMismatch {
                expected,
                found: bundle.num_classes,
            });
        }
    }
    let (bins, frames, channels) = x.dim();
    if bins != bundle.freq_bins {
        return Err(SeparationError::Shape(format!(
            "observations have {bins} bins, model expects {}",
            bundle.freq_bins
        )));
    }
    let mut demixing = init;
    if config.rescale {
        demixing.rescale_to_reference()?;
    }
    let mut steps = StepCounts::default();
    let mut states: Vec<SourceModelState> = Vec::with_capacity(channels);
    let mut variances: Vec<Array2<f64>> = Vec::with_capacity(channels);
    // Starting point for the trace: decoder model fitted once without a
    // demixing update.
    for j in 0..channels {
        let power = demixing.source_power(x, j)?;
        let state = refresh_source(bundle, power.view(), frames, config.variance_floor)?;
        variances.push(state.variance.clone());
        states.push(state);
    }
    let initial = neg_log_likelihood(&demixing, &variances, x)?;
    let mut trace = SeparationTrace::new("fmvae", None, initial);

    for _ in 0..config.iterations {
        let started = config.timing.start();
        if config.rescale {
            demixing.rescale_to_reference()?;
        }
        for j in 0..channels {
            let power = demixing.source_power(x, j)?;
            let state = refresh_source(bundle, power.view(), frames, config.variance_floor)?;
            steps.classifier += 1;
            steps.encoder += 1;
            steps.decoder += 1;
            steps.gain += 1;
            variances[j] = state.variance.clone();
            states[j] = state;
            demixing.ip_update(x, variances[j].view(), j)?;
            steps.ip += 1;
        }
        let nll = neg_log_likelihood(&demixing, &variances, x)?;
        let posteriors = states.iter().map(|s| s.class_posterior.clone()).collect();
        trace.push(nll, started, posteriors);
    }
    Ok(FmvaeOutput {
        demixing,
        states,
        trace,
        steps,
    })
}

/// Steps (a) to (c) for one source.
fn refresh_source(
    bundle: &NeuralBundle,
    power: ArrayView2<'_, f64>,
    frames: usize,
    floor: f64,
) -> Result<SourceModelState, SeparationError> {
    let input = bundle.prepare_input(power)?;
    let class_posterior = bundle.classify_prepared(input.view())?;
    let latent = bundle.encode_prepared(input.view(), &class_posterior)?.mean;
    let mut sigma2 = bundle.decode(latent.view(), &class_posterior, frames)?;
    if floor > 0.0 {
        let bound = floor * sigma2.mean().unwrap_or(0.0);
        sigma2.mapv_inplace(|v| v.max(bound));
    }
    let gain = update_gain(power, sigma2.view())?;
    Ok(SourceModelState {
        variance: sigma2 * gain,
        latent,
        class_posterior,
        gain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, InputTransform};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const BINS: usize = 17;
    const FRAMES: usize = 16;

    fn bundle() -> NeuralBundle {
        let arch = Architecture {
            freq_bins: BINS,
            num_classes: 3,
            latent_channels: 4,
            hidden: [16, 8],
            input: InputTransform::LogPower { floor: 1e-8 },
            ..Architecture::default()
        };
        NeuralBundle::random(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn observations(bins: usize) -> Array3<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Array3::from_shape_fn((bins, FRAMES, 2), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn untimed(iterations: usize) -> FmvaeConfig {
        FmvaeConfig {
            iterations,
            timing: Timing::Disabled,
            ..FmvaeConfig::default()
        }
    }

    #[test]
    fn every_block_runs_once_per_source_and_iteration() {
        let x = observations(BINS);
        let out = fmvae_separate(x.view(), &bundle(), DemixingStack::identity(BINS, 2), &untimed(3)).unwrap();
        let n = 3 * 2;
        assert_eq!(
            out.steps,
            StepCounts { classifier: n, encoder: n, decoder: n, gain: n, ip: n }
        );
        assert_eq!(out.trace.iterations(), 3);
        assert_eq!(out.states.len(), 2);
        for s in &out.states {
            assert!((s.class_posterior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_mismatched_models() {
        let x = observations(BINS);
        let config = FmvaeConfig { num_classes: Some(4), ..untimed(1) };
        let err = fmvae_separate(x.view(), &bundle(), DemixingStack::identity(BINS, 2), &config);
        assert!(matches!(err, Err(SeparationError::ClassMismatch { expected: 4, found: 3 })));
        let x = observations(BINS + 1);
        let err = fmvae_separate(x.view(), &bundle(), DemixingStack::identity(BINS + 1, 2), &untimed(1));
        assert!(matches!(err, Err(SeparationError::Shape(_))));
    }

    #[test]
    fn floor_bounds_the_variance_dynamic_range() {
        let b = bundle();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Deep spectral valleys push the random decoder towards tiny variances.
        let power = Array2::from_shape_fn((BINS, FRAMES), |(f, _)| {
            10f64.powi(-(f as i32 % 9)) * rng.gen_range(0.5..1.5)
        });
        let c = b.classify(power.view()).unwrap();
        let z = b.encode(power.view(), &c).unwrap().mean;
        let raw = b.decode(z.view(), &c, FRAMES).unwrap();
        let floor = 0.9;
        let state = refresh_source(&b, power.view(), FRAMES, floor).unwrap();
        let bound = floor * raw.mean().unwrap() * state.gain;
        assert!(state.variance.iter().all(|&v| v >= bound * (1.0 - 1e-12)));
        let unfloored = refresh_source(&b, power.view(), FRAMES, 0.0).unwrap();
        assert!(unfloored.variance.iter().any(|&v| v < bound));
        // The gain stays optimal for the floored shape.
        let shape = state.variance.mapv(|v| v / state.gain);
        assert!((update_gain(power.view(), shape.view()).unwrap() / state.gain - 1.0).abs() < 1e-12);
    }
}
