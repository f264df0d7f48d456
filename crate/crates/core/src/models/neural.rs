//! Forward-only runtime for the fully convolutional encoder, decoder and
//! auxiliary classifier.
//!
//! Tensors are `channels x frames`; spectrogram frequency bins are channels.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, CowArray, Ix2, Zip};
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Serializable description of one layer (weights excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        /// Trailing input channels filled with the class vector, broadcast
        /// over time. Included in `in_channels`.
        #[serde(default)]
        cond_channels: usize,
    },
    ConvTranspose1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        output_padding: usize,
        #[serde(default)]
        cond_channels: usize,
    },
    BatchNorm {
        channels: usize,
        eps: f32,
    },
    Glu,
}

fn one() -> usize {
    1
}

pub(crate) const LAYER_KINDS: &[&str] = &["conv1d", "conv_transpose1d", "batch_norm", "glu"];

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub cond_channels: usize,
    /// `[out, in, kernel]`
    pub weight: Array3<f32>,
    pub bias: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose1d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub cond_channels: usize,
    /// `[in, out, kernel]`
    pub weight: Array3<f32>,
    pub bias: Array1<f32>,
}

/// Inference-mode batch normalization using stored running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub eps: f32,
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv1d(Conv1d),
    ConvTranspose1d(ConvTranspose1d),
    BatchNorm(BatchNorm),
    Glu,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv1d(c) => LayerSpec::Conv1d {
                in_channels: c.weight.dim().1,
                out_channels: c.weight.dim().0,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                cond_channels: c.cond_channels,
            },
            Layer::ConvTranspose1d(c) => LayerSpec::ConvTranspose1d {
                in_channels: c.weight.dim().0,
                out_channels: c.weight.dim().1,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                output_padding: c.output_padding,
                cond_channels: c.cond_channels,
            },
            Layer::BatchNorm(b) => LayerSpec::BatchNorm {
                channels: b.gamma.len(),
                eps: b.eps,
            },
            Layer::Glu => LayerSpec::Glu,
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f32>, cond: &[f32]) -> Result<Array2<f32>, ModelError> {
        self.apply(x.into(), cond)
    }

    /// [`Self::forward`] that reuses an owned input where it can.
    fn apply(&self, x: CowArray<'_, f32, Ix2>, cond: &[f32]) -> Result<Array2<f32>, ModelError> {
        match self {
            Layer::Conv1d(c) => c.forward(x.view(), cond),
            Layer::ConvTranspose1d(c) => c.forward(x.view(), cond),
            Layer::BatchNorm(b) => b.forward_owned(x.into_owned()),
            Layer::Glu => glu(x.view()),
        }
    }

    /// Downsampling factor in time introduced by this layer.
    fn stride(&self) -> usize {
        match self {
            Layer::Conv1d(c) => c.stride,
            _ => 1,
        }
    }
}

fn check_condition(cond: &[f32], cond_channels: usize) -> Result<(), ModelError> {
    if cond_channels > 0 && cond.len() != cond_channels {
        return Err(ModelError::Shape(format!(
            "layer expects {cond_channels} conditioning channels, got a class vector of length {}",
            cond.len()
        )));
    }
    Ok(())
}

fn with_condition<'a>(
    x: ArrayView2<'a, f32>,
    cond: &[f32],
    cond_channels: usize,
) -> Result<CowArray<'a, f32, Ix2>, ModelError> {
    check_condition(cond, cond_channels)?;
    if cond_channels == 0 {
        return Ok(x.into());
    }
    let (channels, frames) = x.dim();
    let mut out = Array2::zeros((channels + cond_channels, frames));
    out.slice_mut(s![..channels, ..]).assign(&x);
    for (k, &v) in cond.iter().enumerate() {
        out.row_mut(channels + k).fill(v);
    }
    Ok(out.into())
}

/// Pointwise layer `out = w_x x + w_c c + b` with `w = [w_x | w_c]` over
/// input channels. The class vector is constant in time, so its term folds
/// into the bias and the input is never concatenated.
fn pointwise(
    w: ArrayView2<'_, f32>,
    bias: ArrayView1<'_, f32>,
    x: ArrayView2<'_, f32>,
    cond: &[f32],
    cond_channels: usize,
    kind: &str,
) -> Result<Array2<f32>, ModelError> {
    check_condition(cond, cond_channels)?;
    let data = w.ncols() - cond_channels;
    if x.nrows() != data {
        return Err(ModelError::Shape(format!(
            "{kind} expects {} input channels, got {}",
            w.ncols(),
            x.nrows() + cond_channels
        )));
    }
    let mut offset = bias.to_owned();
    if cond_channels > 0 {
        offset += &w.slice(s![.., data..]).dot(&ArrayView1::from(cond));
    }
    let mut out = w.slice(s![.., ..data]).dot(&x);
    out += &offset.insert_axis(Axis(1));
    Ok(out)
}

impl Conv1d {
    pub fn forward(&self, x: ArrayView2<'_, f32>, cond: &[f32]) -> Result<Array2<f32>, ModelError> {
        let (out_ch, in_ch, k) = self.weight.dim();
        if k == 1 && self.stride == 1 && self.padding == 0 {
            let w = self.weight.view().into_shape((out_ch, in_ch)).expect("standard layout");
            return pointwise(w, self.bias.view(), x, cond, self.cond_channels, "conv1d");
        }
        let x = with_condition(x, cond, self.cond_channels)?;
        if x.nrows() != in_ch {
            return Err(ModelError::Shape(format!(
                "conv1d expects {in_ch} input channels, got {}",
                x.nrows()
            )));
        }
        let frames = x.ncols();
        let padded = frames + 2 * self.padding;
        if padded < k {
            return Err(ModelError::Shape(format!(
                "input of {frames} frames is shorter than the {k}-tap kernel"
            )));
        }
        let out_len = (padded - k) / self.stride + 1;
        let weight = self
            .weight
            .view()
            .into_shape((out_ch, in_ch * k))
            .expect("standard layout");
        let mut cols = Array2::<f32>::zeros((in_ch * k, out_len));
        for ci in 0..in_ch {
            for t in 0..k {
                let mut row = cols.row_mut(ci * k + t);
                for n in 0..out_len {
                    let src = (n * self.stride + t) as isize - self.padding as isize;
                    if src >= 0 && (src as usize) < frames {
                        row[n] = x[(ci, src as usize)];
                    }
                }
            }
        }
        let mut out = weight.dot(&cols);
        out += &self.bias.view().insert_axis(Axis(1));
        Ok(out)
    }
}

impl ConvTranspose1d {
    pub fn forward(&self, x: ArrayView2<'_, f32>, cond: &[f32]) -> Result<Array2<f32>, ModelError> {
        let (in_ch, out_ch, k) = self.weight.dim();
        if k == 1 && self.stride == 1 && self.padding == 0 && self.output_padding == 0 {
            let w = self.weight.view().into_shape((in_ch, out_ch)).expect("standard layout");
            return pointwise(w.t(), self.bias.view(), x, cond, self.cond_channels, "conv_transpose1d");
        }
        let x = with_condition(x, cond, self.cond_channels)?;
        if x.nrows() != in_ch {
            return Err(ModelError::Shape(format!(
                "conv_transpose1d expects {in_ch} input channels, got {}",
                x.nrows()
            )));
        }
        let frames = x.ncols();
        let full = (frames - 1) * self.stride + k + self.output_padding;
        if full <= 2 * self.padding {
            return Err(ModelError::Shape("transposed convolution output is empty".into()));
        }
        let out_len = full - 2 * self.padding;
        let weight = self
            .weight
            .view()
            .into_shape((in_ch, out_ch * k))
            .expect("standard layout");
        let mut out = Array2::<f32>::zeros((out_ch, out_len));
        let taps = weight.t().dot(&x);
        for o in 0..out_ch {
            let mut dst = out.row_mut(o);
            for t in 0..k {
                let src = taps.row(o * k + t);
                for n in 0..frames {
                    let pos = (n * self.stride + t) as isize - self.padding as isize;
                    if pos >= 0 && (pos as usize) < out_len {
                        dst[pos as usize] += src[n];
                    }
                }
            }
        }
        out += &self.bias.view().insert_axis(Axis(1));
        Ok(out)
    }
}

impl BatchNorm {
    pub fn forward(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>, ModelError> {
        self.forward_owned(x.to_owned())
    }

    fn forward_owned(&self, mut out: Array2<f32>) -> Result<Array2<f32>, ModelError> {
        if out.nrows() != self.gamma.len() {
            return Err(ModelError::Shape(format!(
                "batch norm expects {} channels, got {}",
                self.gamma.len(),
                out.nrows()
            )));
        }
        for (c, mut row) in out.rows_mut().into_iter().enumerate() {
            let scale = self.gamma[c] / (self.running_var[c] + self.eps).sqrt();
            let mean = self.running_mean[c];
            let shift = self.beta[c];
            row.mapv_inplace(|v| (v - mean) * scale + shift);
        }
        Ok(out)
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated linear unit over channels: first half times sigmoid of second half.
pub fn glu(x: ArrayView2<'_, f32>) -> Result<Array2<f32>, ModelError> {
    let channels = x.nrows();
    if channels % 2 != 0 {
        return Err(ModelError::Shape(format!(
            "GLU needs an even channel count, got {channels}"
        )));
    }
    let half = channels / 2;
    let a = x.slice(s![..half, ..]);
    let b = x.slice(s![half.., ..]);
    let mut out = Array2::zeros(a.dim());
    Zip::from(&mut out)
        .and(&a)
        .and(&b)
        .for_each(|o, &a, &b| *o = a * sigmoid(b));
    Ok(out)
}

/// Linear stack of layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, input: ArrayView2<'_, f32>, cond: &[f32]) -> Result<Array2<f32>, ModelError> {
        let mut x: CowArray<'_, f32, Ix2> = input.into();
        for layer in &self.layers {
            x = layer.apply(x, cond)?.into();
        }
        Ok(x.into_owned())
    }

    /// Product of all convolution strides.
    pub fn time_reduction(&self) -> usize {
        self.layers.iter().map(Layer::stride).product()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Walks the channel count through the stack and checks it against the
    /// declared input and output widths.
    pub fn validate(
        &self,
        name: &str,
        input_channels: usize,
        output_channels: usize,
        num_classes: usize,
    ) -> Result<(), ModelError> {
        let err = |i: usize, msg: String| ModelError::Shape(format!("{name} layer {i}: {msg}"));
        let mut current = input_channels;
        for (i, spec) in self.specs().iter().enumerate() {
            match *spec {
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    cond_channels,
                    ..
                }
                | LayerSpec::ConvTranspose1d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    cond_channels,
                    ..
                } => {
                    if cond_channels != 0 && cond_channels != num_classes {
                        return Err(err(
                            i,
                            format!("{cond_channels} conditioning channels for {num_classes} classes"),
                        ));
                    }
                    if in_channels != current + cond_channels {
                        return Err(err(
                            i,
                            format!(
                                "declares {in_channels} inputs, receives {current} + {cond_channels} conditioning"
                            ),
                        ));
                    }
                    if kernel == 0 || stride == 0 {
                        return Err(err(i, "kernel and stride must be positive".into()));
                    }
                    current = out_channels;
                }
                LayerSpec::BatchNorm { channels, .. } => {
                    if channels != current {
                        return Err(err(i, format!("normalizes {channels} channels, receives {current}")));
                    }
                }
                LayerSpec::Glu => {
                    if current % 2 != 0 {
                        return Err(err(i, format!("GLU on odd channel count {current}")));
                    }
                    current /= 2;
                }
            }
        }
        if current != output_channels {
            return Err(ModelError::Shape(format!(
                "{name} produces {current} channels, expected {output_channels}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    fn rand2(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f32> {
        Array2::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    fn rand1(rng: &mut ChaCha8Rng, n: usize) -> Array1<f32> {
        Array1::from_shape_simple_fn(n, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn glu_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand2(&mut rng, (6, 9));
        let y = glu(x.view()).unwrap();
        for c in 0..3 {
            for t in 0..9 {
                let a = f64::from(x[(c, t)]);
                let b = f64::from(x[(c + 3, t)]);
                let want = a / (1.0 + (-b).exp());
                assert!((f64::from(y[(c, t)]) - want).abs() < 1e-6);
            }
        }
        assert!(glu(rand2(&mut rng, (3, 2)).view()).is_err());
    }

    #[test]
    fn batch_norm_maps_running_mean_to_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bn = BatchNorm {
            eps: 1e-5,
            gamma: rand1(&mut rng, 4),
            beta: rand1(&mut rng, 4),
            running_mean: rand1(&mut rng, 4),
            running_var: rand1(&mut rng, 4).mapv(|v| v.abs() + 0.1),
        };
        let x = Array2::from_shape_fn((4, 3), |(c, _)| bn.running_mean[c]);
        let y = bn.forward(x.view()).unwrap();
        for ((c, _), &v) in y.indexed_iter() {
            assert_eq!(v, bn.beta[c]);
        }
    }

    fn naive_conv(c: &Conv1d, x: &Array2<f32>) -> Array2<f32> {
        let (out_ch, in_ch, k) = c.weight.dim();
        let frames = x.ncols() as isize;
        let out_len = ((x.ncols() + 2 * c.padding - k) / c.stride) + 1;
        Array2::from_shape_fn((out_ch, out_len), |(o, n)| {
            let mut acc = f64::from(c.bias[o]);
            for i in 0..in_ch {
                for t in 0..k {
                    let src = (n * c.stride + t) as isize - c.padding as isize;
                    if src >= 0 && src < frames {
                        acc += f64::from(c.weight[(o, i, t)]) * f64::from(x[(i, src as usize)]);
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, padding, k) in &[(1, 0, 1), (1, 2, 5), (2, 1, 4), (2, 0, 3)] {
            let conv = Conv1d {
                kernel: k,
                stride,
                padding,
                cond_channels: 0,
                weight: rand3(&mut rng, (5, 3, k)),
                bias: rand1(&mut rng, 5),
            };
            let x = rand2(&mut rng, (3, 11));
            let got = conv.forward(x.view(), &[]).unwrap();
            let want = naive_conv(&conv, &x);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for shared weights and zero bias.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(stride, padding, k) in &[(1, 1, 3), (2, 1, 4), (1, 0, 1)] {
            let w = rand3(&mut rng, (4, 3, k));
            let conv = Conv1d {
                kernel: k,
                stride,
                padding,
                cond_channels: 0,
                weight: w.clone(),
                bias: Array1::zeros(4),
            };
            let x = rand2(&mut rng, (3, 10));
            let cx = conv.forward(x.view(), &[]).unwrap();
            let y = rand2(&mut rng, cx.dim());
            let expected_len = x.ncols() - ((x.ncols() + 2 * padding - k) % stride);
            let out_padding = x.ncols() - expected_len;
            let convt = ConvTranspose1d {
                kernel: k,
                stride,
                padding,
                output_padding: out_padding,
                cond_channels: 0,
                weight: w.clone(),
                bias: Array1::zeros(3),
            };
            let ty = convt.forward(y.view(), &[]).unwrap();
            assert_eq!(ty.dim(), x.dim());
            let lhs: f64 = cx.iter().zip(y.iter()).map(|(a, b)| f64::from(a * b)).sum();
            let rhs: f64 = x.iter().zip(ty.iter()).map(|(a, b)| f64::from(a * b)).sum();
            assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conditioning_channels_are_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand2(&mut rng, (2, 5));
        let cond = [0.25f32, 0.75];
        let mut stacked = Array2::zeros((4, 5));
        stacked.slice_mut(s![..2, ..]).assign(&x);
        stacked.row_mut(2).fill(0.25);
        stacked.row_mut(3).fill(0.75);
        // Pointwise layers fold the class vector into the bias; wider
        // kernels concatenate it and zero-pad like the trainer.
        for &(k, padding) in &[(1, 0), (3, 1)] {
            let conv = Conv1d {
                kernel: k,
                stride: 1,
                padding,
                cond_channels: 2,
                weight: rand3(&mut rng, (3, 4, k)),
                bias: rand1(&mut rng, 3),
            };
            let got = conv.forward(x.view(), &cond).unwrap();
            let want = naive_conv(&Conv1d { cond_channels: 0, ..conv.clone() }, &stacked);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!(conv.forward(x.view(), &[1.0]).is_err());
            assert!(conv.forward(stacked.view(), &cond).is_err());
        }
        let convt = ConvTranspose1d {
            kernel: 1,
            stride: 1,
            padding: 0,
            output_padding: 0,
            cond_channels: 2,
            weight: rand3(&mut rng, (4, 3, 1)),
            bias: rand1(&mut rng, 3),
        };
        let got = convt.forward(x.view(), &cond).unwrap();
        let w = convt.weight.index_axis(Axis(2), 0);
        let want = w.t().dot(&stacked) + &convt.bias.view().insert_axis(Axis(1));
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn validate_tracks_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Network::new(vec![
            Layer::Conv1d(Conv1d {
                kernel: 3,
                stride: 1,
                padding: 1,
                cond_channels: 2,
                weight: rand3(&mut rng, (8, 7, 3)),
                bias: rand1(&mut rng, 8),
            }),
            Layer::Glu,
        ]);
        net.validate("enc", 5, 4, 2).unwrap();
        assert!(net.validate("enc", 6, 4, 2).is_err());
        assert!(net.validate("enc", 5, 8, 2).is_err());
        assert!(net.validate("enc", 5, 4, 3).is_err());
    }
}
