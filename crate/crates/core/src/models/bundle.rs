//! Encoder/decoder/classifier bundle and its `FMVAE01` weight file.
//!
//! File layout: the 8-byte magic `FMVAE01\0`, a little-endian `u64` manifest
//! length, the UTF-8 JSON manifest, then every tensor listed in the
//! manifest's `tensors` array as little-endian `f32`, in that order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use super::neural::{BatchNorm, Conv1d, ConvTranspose1d, Layer, LayerSpec, Network, LAYER_KINDS};
use super::ModelError;

pub const MAGIC: &[u8; 8] = b"FMVAE01\0";
pub const FORMAT_VERSION: u32 = 1;

/// How a normalized power spectrogram is presented to the encoder and
/// classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputTransform {
    Power,
    LogPower { floor: f32 },
}

impl InputTransform {
    /// Maps one unit-mean power value to a network input.
    fn apply(self, p: f64) -> f32 {
        match self {
            InputTransform::Power => p as f32,
            InputTransform::LogPower { floor } => (p as f32).max(floor).ln(),
        }
    }
}

/// Trained source model: encoder `q(z | S, c)`, decoder `p(S | z, c)` and
/// auxiliary classifier `r(c | S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralBundle {
    pub num_classes: usize,
    pub latent_channels: usize,
    pub freq_bins: usize,
    pub input: InputTransform,
    pub encoder: Network,
    pub decoder: Network,
    pub classifier: Network,
    /// Free-form provenance recorded by the exporter (training settings etc).
    pub metadata: serde_json::Value,
}

/// Posterior parameters returned by [`NeuralBundle::encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mean: Array2<f32>,
    pub var: Array2<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    num_classes: usize,
    latent_channels: usize,
    freq_bins: usize,
    input: InputTransform,
    conditioning: String,
    encoder: Vec<serde_json::Value>,
    decoder: Vec<serde_json::Value>,
    classifier: Vec<serde_json::Value>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

const CONDITIONING: &str = "channel_concat_broadcast";
const LOG_VAR_CLAMP: f64 = 80.0;

impl NeuralBundle {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes == 0 || self.latent_channels == 0 || self.freq_bins == 0 {
            return Err(ModelError::Shape("class, latent and bin counts must be positive".into()));
        }
        let c = self.num_classes;
        self.encoder
            .validate("encoder", self.freq_bins, 2 * self.latent_channels, c)?;
        self.decoder
            .validate("decoder", self.latent_channels, self.freq_bins, c)?;
        self.classifier
            .validate("classifier", self.freq_bins, c, c)?;
        Ok(())
    }

    /// Frame count multiple required by strided encoder/classifier layers.
    pub fn time_multiple(&self) -> usize {
        self.encoder
            .time_reduction()
            .max(self.classifier.time_reduction())
    }

    /// Scales `power` to unit mean and applies the input transform. Frames
    /// are padded by repeating the last one up to [`Self::time_multiple`].
    pub fn prepare_input(&self, power: ArrayView2<'_, f64>) -> Result<Array2<f32>, ModelError> {
        let (bins, frames) = power.dim();
        if bins != self.freq_bins {
            return Err(ModelError::Shape(format!(
                "spectrogram has {bins} bins, model expects {}",
                self.freq_bins
            )));
        }
        if frames == 0 {
            return Err(ModelError::Shape("spectrogram has no frames".into()));
        }
        let mean = power.mean().unwrap_or(0.0);
        let scale = if mean > 0.0 && mean.is_finite() { 1.0 / mean } else { 1.0 };
        let m = self.time_multiple();
        let padded = frames.div_ceil(m) * m;
        let mut out = Array2::<f32>::zeros((bins, padded));
        for (src, mut dst) in power.rows().into_iter().zip(out.rows_mut()) {
            for (d, &p) in dst.iter_mut().zip(src.iter()) {
                *d = self.input.apply(p * scale);
            }
            // Repeat the last frame into the padding.
            let last = dst[frames - 1];
            dst.slice_mut(ndarray::s![frames..]).fill(last);
        }
        Ok(out)
    }

    fn class_vector(&self, c: &[f64]) -> Result<Vec<f32>, ModelError> {
        if c.len() != self.num_classes {
            return Err(ModelError::Shape(format!(
                "class vector has length {}, model has {} classes",
                c.len(),
                self.num_classes
            )));
        }
        Ok(c.iter().map(|&v| v as f32).collect())
    }

    /// Auxiliary classifier posterior: frame logits averaged over time, then
    /// softmax.
    pub fn classify(&self, power: ArrayView2<'_, f64>) -> Result<Vec<f64>, ModelError> {
        self.classify_prepared(self.prepare_input(power)?.view())
    }

    /// [`Self::classify`] on the output of [`Self::prepare_input`].
    pub fn classify_prepared(&self, input: ArrayView2<'_, f32>) -> Result<Vec<f64>, ModelError> {
        let logits = self.classifier.forward(input, &[])?;
        if logits.ncols() == 0 {
            return Err(ModelError::Shape("classifier produced no frames".into()));
        }
        let mean: Vec<f64> = logits
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| f64::from(v)).sum::<f64>() / r.len() as f64)
            .collect();
        Ok(softmax(&mean))
    }

    pub fn encode(&self, power: ArrayView2<'_, f64>, c: &[f64]) -> Result<EncoderOutput, ModelError> {
        self.encode_prepared(self.prepare_input(power)?.view(), c)
    }

    /// [`Self::encode`] on the output of [`Self::prepare_input`].
    pub fn encode_prepared(&self, input: ArrayView2<'_, f32>, c: &[f64]) -> Result<EncoderOutput, ModelError> {
        let cond = self.class_vector(c)?;
        let out = self.encoder.forward(input, &cond)?;
        let d = self.latent_channels;
        let mean = out.slice(ndarray::s![..d, ..]).to_owned();
        let var = out
            .slice(ndarray::s![d.., ..])
            .mapv(|lv| (f64::from(lv).clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)).exp() as f32);
        Ok(EncoderOutput { mean, var })
    }

    /// Decoder variance map `sigma^2(f, n)` cropped to `frames` frames.
    pub fn decode(&self, z: ArrayView2<'_, f32>, c: &[f64], frames: usize) -> Result<Array2<f64>, ModelError> {
        if z.nrows() != self.latent_channels {
            return Err(ModelError::Shape(format!(
                "latent has {} channels, model expects {}",
                z.nrows(),
                self.latent_channels
            )));
        }
        let cond = self.class_vector(c)?;
        let out = self.decoder.forward(z, &cond)?;
        if out.ncols() < frames {
            return Err(ModelError::Shape(format!(
                "decoder produced {} frames, {frames} requested",
                out.ncols()
            )));
        }
        Ok(out
            .slice(ndarray::s![.., ..frames])
            .mapv(|lv| f64::from(lv).clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP).exp()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        self.validate()?;
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &mut dyn Iterator<Item = f32>| {
            tensors.push(TensorEntry { name, shape });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (net_name, net) in self.networks() {
            for (i, layer) in net.layers.iter().enumerate() {
                let prefix = format!("{net_name}.{i}");
                match layer {
                    Layer::Conv1d(Conv1d { weight, bias, .. })
                    | Layer::ConvTranspose1d(ConvTranspose1d { weight, bias, .. }) => {
                        push(format!("{prefix}.weight"), weight.shape().to_vec(), &mut weight.iter().copied());
                        push(format!("{prefix}.bias"), bias.shape().to_vec(), &mut bias.iter().copied());
                    }
                    Layer::BatchNorm(bn) => {
                        for (suffix, t) in bn_tensors(bn) {
                            push(format!("{prefix}.{suffix}"), vec![t.len()], &mut t.iter().copied());
                        }
                    }
                    Layer::Glu => {}
                }
            }
        }
        let to_values = |net: &Network| -> Vec<serde_json::Value> {
            net.specs()
                .iter()
                .map(|s| serde_json::to_value(s).expect("layer specs serialize"))
                .collect()
        };
        let manifest = Manifest {
            format: "FMVAE01".into(),
            version: FORMAT_VERSION,
            num_classes: self.num_classes,
            latent_channels: self.latent_channels,
            freq_bins: self.freq_bins,
            input: self.input,
            conditioning: CONDITIONING.into(),
            encoder: to_values(&self.encoder),
            decoder: to_values(&self.decoder),
            classifier: to_values(&self.classifier),
            tensors,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or(ModelError::Truncated)?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..json_end])?;
        if manifest.format != "FMVAE01" {
            return Err(ModelError::BadMagic);
        }
        if manifest.version != FORMAT_VERSION {
            return Err(ModelError::UnsupportedVersion(manifest.version));
        }
        if manifest.conditioning != CONDITIONING {
            return Err(ModelError::Shape(format!(
                "unsupported conditioning scheme '{}'",
                manifest.conditioning
            )));
        }

        let mut store: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
        let mut offset = json_end;
        for entry in &manifest.tensors {
            let count: usize = entry.shape.iter().product();
            let end = offset + 4 * count;
            if end > bytes.len() {
                return Err(ModelError::Truncated);
            }
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            offset = end;
            if store.insert(entry.name.clone(), (entry.shape.clone(), data)).is_some() {
                return Err(ModelError::Shape(format!("duplicate tensor '{}'", entry.name)));
            }
        }
        if offset != bytes.len() {
            return Err(ModelError::Shape(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - offset
            )));
        }

        let encoder = build_network("encoder", &manifest.encoder, &mut store)?;
        let decoder = build_network("decoder", &manifest.decoder, &mut store)?;
        let classifier = build_network("classifier", &manifest.classifier, &mut store)?;
        if let Some(name) = store.keys().next() {
            return Err(ModelError::Shape(format!("tensor '{name}' is not used by any layer")));
        }
        let bundle = Self {
            num_classes: manifest.num_classes,
            latent_channels: manifest.latent_channels,
            freq_bins: manifest.freq_bins,
            input: manifest.input,
            encoder,
            decoder,
            classifier,
            metadata: manifest.metadata,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Human-readable manifest summary for inspection tools.
    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "format": "FMVAE01",
            "version": FORMAT_VERSION,
            "num_classes": self.num_classes,
            "latent_channels": self.latent_channels,
            "freq_bins": self.freq_bins,
            "input": self.input,
            "conditioning": CONDITIONING,
            "time_multiple": self.time_multiple(),
            "parameters": self.parameter_count(),
            "encoder": self.encoder.specs(),
            "decoder": self.decoder.specs(),
            "classifier": self.classifier.specs(),
            "metadata": self.metadata,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.networks()
            .iter()
            .flat_map(|(_, n)| n.layers.iter())
            .map(|l| match l {
                Layer::Conv1d(c) => c.weight.len() + c.bias.len(),
                Layer::ConvTranspose1d(c) => c.weight.len() + c.bias.len(),
                Layer::BatchNorm(b) => 4 * b.gamma.len(),
                Layer::Glu => 0,
            })
            .sum()
    }

    fn networks(&self) -> [(&'static str, &Network); 3] {
        [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("classifier", &self.classifier),
        ]
    }
}

fn bn_tensors(bn: &BatchNorm) -> [(&'static str, &Array1<f32>); 4] {
    [
        ("gamma", &bn.gamma),
        ("beta", &bn.beta),
        ("running_mean", &bn.running_mean),
        ("running_var", &bn.running_var),
    ]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn take_tensor(
    store: &mut HashMap<String, (Vec<usize>, Vec<f32>)>,
    name: &str,
    shape: &[usize],
) -> Result<Vec<f32>, ModelError> {
    let (found, data) = store
        .remove(name)
        .ok_or_else(|| ModelError::Shape(format!("missing tensor '{name}'")))?;
    if found != shape {
        return Err(ModelError::Shape(format!(
            "tensor '{name}' has shape {found:?}, layer needs {shape:?}"
        )));
    }
    Ok(data)
}

fn build_network(
    name: &str,
    values: &[serde_json::Value],
    store: &mut HashMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<Network, ModelError> {
    let mut layers = Vec::with_capacity(values.len());
    for (i, value) in values.iter().enumerate() {
        let kind = value.get("kind").and_then(|k| k.as_str()).unwrap_or("<missing>");
        if !LAYER_KINDS.contains(&kind) {
            return Err(ModelError::UnsupportedLayer(kind.to_string()));
        }
        let spec: LayerSpec = serde_json::from_value(value.clone())?;
        let prefix = format!("{name}.{i}");
        let layer = match spec {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                cond_channels,
            } => {
                let shape = [out_channels, in_channels, kernel];
                let weight = take_tensor(store, &format!("{prefix}.weight"), &shape)?;
                let bias = take_tensor(store, &format!("{prefix}.bias"), &[out_channels])?;
                Layer::Conv1d(Conv1d {
                    kernel,
                    stride,
                    padding,
                    cond_channels,
                    weight: Array3::from_shape_vec(shape, weight).expect("checked shape"),
                    bias: Array1::from(bias),
                })
            }
            LayerSpec::ConvTranspose1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
                cond_channels,
            } => {
                let shape = [in_channels, out_channels, kernel];
                let weight = take_tensor(store, &format!("{prefix}.weight"), &shape)?;
                let bias = take_tensor(store, &format!("{prefix}.bias"), &[out_channels])?;
                Layer::ConvTranspose1d(ConvTranspose1d {
                    kernel,
                    stride,
                    padding,
                    output_padding,
                    cond_channels,
                    weight: Array3::from_shape_vec(shape, weight).expect("checked shape"),
                    bias: Array1::from(bias),
                })
            }
            LayerSpec::BatchNorm { channels, eps } => {
                let mut get = |s: &str| -> Result<Array1<f32>, ModelError> {
                    Ok(Array1::from(take_tensor(store, &format!("{prefix}.{s}"), &[channels])?))
                };
                Layer::BatchNorm(BatchNorm {
                    eps,
                    gamma: get("gamma")?,
                    beta: get("beta")?,
                    running_mean: get("running_mean")?,
                    running_var: get("running_var")?,
                })
            }
            LayerSpec::Glu => Layer::Glu,
        };
        layers.push(layer);
    }
    Ok(Network::new(layers))
}
