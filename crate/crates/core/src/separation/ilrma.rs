use ndarray::{Array2, ArrayView3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{neg_log_likelihood, DemixingStack, SeparationError, SeparationTrace, Timing};
use crate::models::NmfModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlrmaConfig {
    pub iterations: usize,
    /// NMF bases per source.
    pub rank: usize,
    /// Seeds the NMF initialization.
    pub seed: u64,
    pub timing: Timing,
}

impl Default for IlrmaConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            rank: 2,
            seed: 0,
            timing: Timing::WallClock,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IlrmaOutput {
    pub demixing: DemixingStack,
    pub models: Vec<NmfModel>,
    pub trace: SeparationTrace,
}

/// ILRMA from identity demixing and random NMF factors. Each iteration
/// refits source `j`'s NMF to `|y_j|^2` and then updates `w_j` by iterative
/// projection, for every source in turn.
pub fn ilrma_separate(x: ArrayView3<'_, Complex64>, config: &IlrmaConfig) -> Result<IlrmaOutput, SeparationError> {
    let (bins, frames, channels) = x.dim();
    if bins == 0 || frames == 0 || channels == 0 {
        return Err(SeparationError::Shape("empty observations".into()));
    }
    if config.rank == 0 {
        return Err(SeparationError::Shape("NMF rank must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut models: Vec<NmfModel> = (0..channels)
        .map(|_| NmfModel::random(bins, frames, config.rank, &mut rng))
        .collect();
    let mut demixing = DemixingStack::identity(bins, channels);
    let mut variances: Vec<Array2<f64>> = models.iter().map(NmfModel::variance).collect();

    let initial = neg_log_likelihood(&demixing, &variances, x)?;
    let mut trace = SeparationTrace::new("ilrma", Some(config.seed), initial);
    for _ in 0..config.iterations {
        let started = config.timing.start();
        for j in 0..channels {
            let power = demixing.source_power(x, j)?;
            models[j].update(power.view())?;
            variances[j] = models[j].variance();
            demixing.ip_update(x, variances[j].view(), j)?;
        }
        let nll = neg_log_likelihood(&demixing, &variances, x)?;
        trace.push(nll, started, Vec::new());
    }
    Ok(IlrmaOutput {
        demixing,
        models,
        trace,
    })
}
