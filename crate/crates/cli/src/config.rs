use std::fs;
use std::path::{Path, PathBuf};

use fastsep::room::{SceneLayout, ToyCorpusConfig};
use fastsep::separation::{Method, PipelineConfig, Timing};
use fastsep::signal::StftConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Built-in room geometry, also shipped as `configs/room.toml`.
pub const DEFAULT_ROOM: &str = include_str!("../../../configs/room.toml");

/// Everything a run depends on. Loaded from TOML, overridden by flags, and
/// written back next to the outputs fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand the file was resolved for.
    pub command: Option<String>,
    pub seed: u64,
    pub sample_rate: u32,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub stft: StftSettings,
    pub separation: SeparationSettings,
    pub simulation: SimulationSettings,
    pub evaluation: EvaluationSettings,
    pub corpus: CorpusSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftSettings {
    pub window_ms: f64,
    pub shift_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationSettings {
    pub method: Method,
    pub ilrma_iterations: usize,
    pub init_iterations: usize,
    pub fmvae_iterations: usize,
    pub nmf_rank: usize,
    /// Floor on decoder variances as a fraction of their mean.
    pub variance_floor: f64,
    pub reference_channel: usize,
    /// Record per-iteration wall-clock time in traces.
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub scenes: usize,
    pub rt60: f64,
    /// Seconds per source utterance.
    pub duration: f64,
    /// Classes the two sources are drawn from.
    pub classes: usize,
    /// Room geometry file; the built-in room when absent.
    pub room: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub methods: Vec<Method>,
    pub filter_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub classes: usize,
    pub utterances_per_class: usize,
    pub duration: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            seed: 0,
            sample_rate: 16_000,
            input: None,
            output: None,
            model: None,
            stft: StftSettings::default(),
            separation: SeparationSettings::default(),
            simulation: SimulationSettings::default(),
            evaluation: EvaluationSettings::default(),
            corpus: CorpusSettings::default(),
        }
    }
}

impl Default for StftSettings {
    fn default() -> Self {
        Self {
            window_ms: 256.0,
            shift_ms: 128.0,
        }
    }
}

impl Default for SeparationSettings {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            method: p.method,
            ilrma_iterations: p.ilrma_iterations,
            init_iterations: p.init_iterations,
            fmvae_iterations: p.fmvae_iterations,
            nmf_rank: p.nmf_rank,
            variance_floor: p.variance_floor,
            reference_channel: p.reference_channel,
            timing: true,
        }
    }
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            scenes: 10,
            rt60: 0.078,
            duration: 6.0,
            classes: 4,
            room: None,
        }
    }
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            methods: vec![Method::Ilrma, Method::Fmvae],
            filter_length: fastsep::eval::DEFAULT_FILTER_LENGTH,
        }
    }
}

impl Default for CorpusSettings {
    fn default() -> Self {
        let c = ToyCorpusConfig::default();
        Self {
            classes: c.classes,
            utterances_per_class: c.utterances_per_class,
            duration: c.duration,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configs serialize")
    }

    /// Writes the resolved configuration as `config.toml` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))
    }

    pub fn stft_config(&self) -> Result<StftConfig, CliError> {
        StftConfig::from_ms(self.sample_rate, self.stft.window_ms, self.stft.shift_ms)
            .map_err(|e| CliError::Config(format!("STFT settings: {e}")))
    }

    pub fn pipeline(&self, method: Method) -> Result<PipelineConfig, CliError> {
        let s = &self.separation;
        Ok(PipelineConfig {
            method,
            stft: self.stft_config()?,
            ilrma_iterations: s.ilrma_iterations,
            init_iterations: s.init_iterations,
            fmvae_iterations: s.fmvae_iterations,
            nmf_rank: s.nmf_rank,
            variance_floor: s.variance_floor,
            seed: self.seed,
            reference_channel: s.reference_channel,
            timing: if s.timing { Timing::WallClock } else { Timing::Disabled },
        })
    }

    pub fn layout(&self) -> Result<SceneLayout, CliError> {
        match &self.simulation.room {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            }
            None => Ok(toml::from_str(DEFAULT_ROOM).expect("built-in room parses")),
        }
    }

    /// Checks that do not depend on which subcommand runs.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.sample_rate == 0 {
            return Err(CliError::Config("sample_rate must be positive".into()));
        }
        self.stft_config()?;
        let s = &self.separation;
        if !(s.variance_floor >= 0.0 && s.variance_floor < 1.0) {
            return Err(CliError::Config("separation.variance_floor must lie in [0, 1)".into()));
        }
        if s.nmf_rank == 0 {
            return Err(CliError::Config("separation.nmf_rank must be positive".into()));
        }
        let sim = &self.simulation;
        if !(sim.rt60 > 0.0) || !(sim.duration > 0.0) {
            return Err(CliError::Config("simulation.rt60 and simulation.duration must be positive".into()));
        }
        if self.evaluation.filter_length == 0 {
            return Err(CliError::Config("evaluation.filter_length must be positive".into()));
        }
        if self.evaluation.methods.is_empty() {
            return Err(CliError::Config("evaluation.methods is empty".into()));
        }
        Ok(())
    }
}
