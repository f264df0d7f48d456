use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use super::corpus::{toy_utterance, LabeledWaveform};
use super::rir::{image_method_rir, AbsorptionFormula, RoomSpec};
use super::RoomError;
use crate::signal::{read_wav, write_wav, SampleFormat, Waveform};

/// Room geometry in terms of a microphone pair and sources placed on a
/// circle around its center, in the horizontal plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneLayout {
    pub dimensions: [f64; 3],
    pub array_center: [f64; 3],
    /// Meters between the two microphones, along the x axis.
    pub mic_spacing: f64,
    /// Source azimuths in degrees, 0 being broadside (+y).
    pub source_angles_deg: Vec<f64>,
    pub source_distance: f64,
    pub absorption_formula: AbsorptionFormula,
}

/// Desk-scale room: microphones 4 cm apart, two sources 1.5 m away at
/// -50 and +50 degrees, absorption fitted to the requested RT60.
impl Default for SceneLayout {
    fn default() -> Self {
        Self {
            dimensions: [6.0, 5.0, 3.0],
            array_center: [3.0, 2.0, 1.5],
            mic_spacing: 0.04,
            source_angles_deg: vec![-50.0, 50.0],
            source_distance: 1.5,
            absorption_formula: AbsorptionFormula::Fitted,
        }
    }
}

impl SceneLayout {
    pub fn mic_positions(&self) -> Vec<[f64; 3]> {
        let [x, y, z] = self.array_center;
        let h = self.mic_spacing / 2.0;
        vec![[x - h, y, z], [x + h, y, z]]
    }

    pub fn source_positions(&self) -> Vec<[f64; 3]> {
        let [x, y, z] = self.array_center;
        self.source_angles_deg
            .iter()
            .map(|a| {
                let t = a.to_radians();
                [x + self.source_distance * t.sin(), y + self.source_distance * t.cos(), z]
            })
            .collect()
    }

    pub fn room(&self, rt60: f64, sample_rate: u32) -> Result<RoomSpec, RoomError> {
        RoomSpec::with_rt60(
            self.dimensions,
            self.mic_positions(),
            self.source_positions(),
            rt60,
            sample_rate,
            self.absorption_formula,
        )
    }
}

/// A simulated recording together with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: RoomSpec,
    /// `rirs[j][i]`: source `j` to microphone `i`.
    pub rirs: Vec<Vec<Vec<f64>>>,
    pub mixture: Waveform,
    /// Per-source images at every microphone.
    pub images: Vec<Waveform>,
    pub labels: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneMeta {
    room: RoomSpec,
    labels: Vec<usize>,
    seed: u64,
}

/// All impulse responses of a room, indexed `[source][mic]`.
pub fn room_rirs(spec: &RoomSpec) -> Result<Vec<Vec<Vec<f64>>>, RoomError> {
    let mics = spec.mic_positions.len();
    (0..spec.source_positions.len())
        .into_par_iter()
        .map(|j| (0..mics).map(|i| image_method_rir(spec, j, i)).collect())
        .collect()
}

/// Convolves each source with its impulse responses. Images keep the length
/// of the longest source and the mixture is their exact sum.
pub fn make_scene(spec: &RoomSpec, sources: &[LabeledWaveform], seed: u64) -> Result<Scene, RoomError> {
    spec.validate()?;
    if sources.len() != spec.source_positions.len() {
        return Err(RoomError::Invalid(format!(
            "room has {} source positions but {} signals were given",
            spec.source_positions.len(),
            sources.len()
        )));
    }
    let len = sources.iter().map(|s| s.samples.len()).max().unwrap_or(0);
    if len == 0 {
        return Err(RoomError::Invalid("source signals are empty".into()));
    }
    let rirs = room_rirs(spec)?;
    let fs = spec.sample_rate;
    let images = sources
        .iter()
        .zip(&rirs)
        .map(|(src, hs)| {
            let channels = hs
                .iter()
                .map(|h| {
                    let mut y = fft_convolve(&src.samples, h);
                    y.resize(len, 0.0);
                    y
                })
                .collect();
            Waveform::new(channels, fs)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mixture = sum_images(&images)?;
    Ok(Scene {
        spec: spec.clone(),
        rirs,
        mixture,
        images,
        labels: sources.iter().map(|s| s.label).collect(),
        seed,
    })
}

fn sum_images(images: &[Waveform]) -> Result<Waveform, RoomError> {
    let first = &images[0];
    let mut channels = vec![vec![0.0; first.len()]; first.num_channels()];
    for img in images {
        for (acc, ch) in channels.iter_mut().zip(img.channels()) {
            for (a, v) in acc.iter_mut().zip(ch) {
                *a += v;
            }
        }
    }
    Ok(Waveform::new(channels, first.sample_rate())?)
}

/// Scene with one utterance from each of `layout.source_angles_deg.len()`
/// distinct classes drawn out of `classes`, all chosen by `seed`.
pub fn toy_scene(
    layout: &SceneLayout,
    rt60: f64,
    classes: usize,
    duration: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Scene, RoomError> {
    let spec = layout.room(rt60, sample_rate)?;
    let count = spec.source_positions.len();
    if count > classes {
        return Err(RoomError::Invalid(format!(
            "{count} sources need at least as many classes, got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = sample(&mut rng, classes, count).into_vec();
    let sources: Vec<LabeledWaveform> = labels
        .into_iter()
        .map(|label| LabeledWaveform {
            label,
            samples: toy_utterance(label, duration, sample_rate, &mut rng),
        })
        .collect();
    make_scene(&spec, &sources, seed)
}

impl Scene {
    /// Writes `mixture.wav`, `src<j>_img.wav` and `scene.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), RoomError> {
        fs::create_dir_all(dir)?;
        write_wav(dir.join("mixture.wav"), &self.mixture, SampleFormat::Float32)?;
        for (j, img) in self.images.iter().enumerate() {
            write_wav(dir.join(format!("src{j}_img.wav")), img, SampleFormat::Float32)?;
        }
        let meta = SceneMeta {
            room: self.spec.clone(),
            labels: self.labels.clone(),
            seed: self.seed,
        };
        fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a scene directory. Impulse responses are not stored and are
    /// recomputed from the room description.
    pub fn load(dir: &Path) -> Result<Self, RoomError> {
        let meta: SceneMeta = serde_json::from_str(&fs::read_to_string(dir.join("scene.json"))?)?;
        let mixture = read_wav(dir.join("mixture.wav"))?;
        let images = (0..meta.labels.len())
            .map(|j| read_wav(dir.join(format!("src{j}_img.wav"))))
            .collect::<Result<Vec<_>, _>>()?;
        if images.iter().any(|w| w.len() != mixture.len() || w.num_channels() != mixture.num_channels()) {
            return Err(RoomError::Invalid(format!(
                "source images in {} do not match the mixture",
                dir.display()
            )));
        }
        Ok(Self {
            rirs: room_rirs(&meta.room)?,
            spec: meta.room,
            mixture,
            images,
            labels: meta.labels,
            seed: meta.seed,
        })
    }

    /// Images at microphone `mic`, one per source.
    pub fn references(&self, mic: usize) -> Vec<Vec<f64>> {
        self.images.iter().map(|w| w.channel(mic).to_vec()).collect()
    }
}

/// Full linear convolution.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |sig: &[f64]| {
        let mut buf = fwd.make_input_vec();
        buf[..sig.len()].copy_from_slice(sig);
        let mut out = fwd.make_output_vec();
        fwd.process(&mut buf, &mut out).expect("buffer sizes come from the plan");
        out
    };
    let mut prod = spectrum(x);
    for (a, b) in prod.iter_mut().zip(spectrum(h)) {
        *a *= b;
    }
    let mut y = inv.make_output_vec();
    inv.process(&mut prod, &mut y).expect("buffer sizes come from the plan");
    y.truncate(out_len);
    let scale = 1.0 / n as f64;
    y.iter_mut().for_each(|v| *v *= scale);
    y
}
