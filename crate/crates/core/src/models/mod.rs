//! Source variance models: low-rank NMF for ILRMA and the neural bundle used
//! by the fast algorithm.

mod bundle;
pub mod neural;
mod nmf;

pub use bundle::{softmax, EncoderOutput, InputTransform, NeuralBundle, FORMAT_VERSION, MAGIC};
pub use nmf::{itakura_saito, NmfModel};

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use thiserror::Error;

use neural::{BatchNorm, Conv1d, ConvTranspose1d, Layer, Network};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("not an FMVAE01 weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight-file version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported layer kind '{0}'")]
    UnsupportedLayer(String),
    #[error("weight file is truncated")]
    Truncated,
    #[error("invalid manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-source parameters of the neural variance model,
/// `v(f, n) = gain * sigma^2(f, n; z, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModelState {
    pub latent: Array2<f32>,
    pub class_posterior: Vec<f64>,
    pub gain: f64,
    pub variance: Array2<f64>,
}

/// Layer widths for [`NeuralBundle::random`]. Defaults follow the reference
/// three-layer GLU design.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub freq_bins: usize,
    pub num_classes: usize,
    pub latent_channels: usize,
    pub hidden: [usize; 2],
    /// Odd kernel width used by every layer.
    pub kernel: usize,
    /// Halve the frame rate in the middle encoder/classifier layer.
    pub downsample: bool,
    pub input: InputTransform,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            freq_bins: 2049,
            num_classes: 4,
            latent_channels: 16,
            hidden: [1024, 512],
            kernel: 5,
            downsample: true,
            input: InputTransform::Power,
        }
    }
}

impl NeuralBundle {
    /// Bundle with the given architecture and random weights; for tests and
    /// benchmarks.
    pub fn random<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self, ModelError> {
        if arch.kernel % 2 == 0 {
            return Err(ModelError::Shape("architecture kernel must be odd".into()));
        }
        let c = arch.num_classes;
        let k = arch.kernel;
        let pad = k / 2;
        let stride = if arch.downsample { 2 } else { 1 };
        let [h1, h2] = arch.hidden;
        let f = arch.freq_bins;
        let d = arch.latent_channels;

        let conv = |rng: &mut R, inp: usize, out: usize, s: usize, cond: usize| {
            let scale = 1.0 / ((inp * k) as f32).sqrt();
            Layer::Conv1d(Conv1d {
                kernel: k,
                stride: s,
                padding: pad,
                cond_channels: cond,
                weight: Array3::from_shape_simple_fn((out, inp, k), || rng.gen_range(-scale..scale)),
                bias: Array1::from_shape_simple_fn(out, || rng.gen_range(-0.1..0.1)),
            })
        };
        let deconv = |rng: &mut R, inp: usize, out: usize, s: usize, cond: usize| {
            let scale = 1.0 / ((inp * k) as f32).sqrt();
            Layer::ConvTranspose1d(ConvTranspose1d {
                kernel: k,
                stride: s,
                padding: pad,
                output_padding: s - 1,
                cond_channels: cond,
                weight: Array3::from_shape_simple_fn((inp, out, k), || rng.gen_range(-scale..scale)),
                bias: Array1::from_shape_simple_fn(out, || rng.gen_range(-0.1..0.1)),
            })
        };
        let bn = |rng: &mut R, ch: usize| {
            Layer::BatchNorm(BatchNorm {
                eps: 1e-5,
                gamma: Array1::from_shape_simple_fn(ch, || rng.gen_range(0.5..1.5)),
                beta: Array1::from_shape_simple_fn(ch, || rng.gen_range(-0.1..0.1)),
                running_mean: Array1::from_shape_simple_fn(ch, || rng.gen_range(-0.1..0.1)),
                running_var: Array1::from_shape_simple_fn(ch, || rng.gen_range(0.5..1.5)),
            })
        };

        let encoder = Network::new(vec![
            conv(rng, f + c, 2 * h1, 1, c),
            bn(rng, 2 * h1),
            Layer::Glu,
            conv(rng, h1 + c, 2 * h2, stride, c),
            bn(rng, 2 * h2),
            Layer::Glu,
            conv(rng, h2 + c, 2 * d, 1, c),
        ]);
        let decoder = Network::new(vec![
            deconv(rng, d + c, 2 * h2, 1, c),
            bn(rng, 2 * h2),
            Layer::Glu,
            deconv(rng, h2 + c, 2 * h1, stride, c),
            bn(rng, 2 * h1),
            Layer::Glu,
            deconv(rng, h1 + c, f, 1, c),
        ]);
        let classifier = Network::new(vec![
            conv(rng, f, 2 * h1, 1, 0),
            bn(rng, 2 * h1),
            Layer::Glu,
            conv(rng, h1, 2 * h2, stride, 0),
            bn(rng, 2 * h2),
            Layer::Glu,
            conv(rng, h2, c, 1, 0),
        ]);
        let bundle = Self {
            num_classes: c,
            latent_channels: d,
            freq_bins: f,
            input: arch.input,
            encoder,
            decoder,
            classifier,
            metadata: serde_json::json!({ "origin": "random initialization" }),
        };
        bundle.validate()?;
        Ok(bundle)
    }
}
