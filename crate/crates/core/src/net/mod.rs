//! Fully convolutional unary network: rendered image channels in, one raw
//! confidence map per label out, at the input resolution.

pub(crate) mod checkpoint;
mod layer;
mod scalar;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{import_weights, load_network, read_network, save_network, write_network};
pub use layer::{LayerKind, LayerSpec};
pub use scalar::Scalar;

/// Dense `height × width × channels` tensor, row-major with channels
/// innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Tensor {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "tensor data has {} values, shape {height}×{width}×{channels} needs {}",
                data.len(),
                height * width * channels
            )));
        }
        Ok(Tensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| cast(*v)).collect(),
        }
    }
}

fn cast<T: Scalar, U: Scalar>(v: T) -> U {
    U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))
}

/// Layer list of a network together with its input and label counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub labels: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Compact desk-scale backbone: three stride-2 convolutions for a total
    /// downsampling of 8, a dilated convolution for context, a 1×1
    /// classifier and a learned stride-8 upsampling.
    pub fn reference(input_channels: usize, labels: usize) -> NetworkSpec {
        NetworkSpec {
            input_channels,
            labels,
            layers: vec![
                LayerSpec::conv(3, input_channels, 16, 1, 1, true),
                LayerSpec::conv(3, 16, 32, 2, 1, true),
                LayerSpec::conv(3, 32, 64, 2, 1, true),
                LayerSpec::conv(3, 64, 64, 2, 1, true),
                LayerSpec::conv(3, 64, 64, 1, 2, true),
                LayerSpec::conv(1, 64, labels, 1, 1, false),
                LayerSpec::transpose_conv(16, labels, labels, 8),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.labels == 0 || self.input_channels == 0 {
            return Err(Error::InvalidInput("network needs layers, inputs and labels".into()));
        }
        let mut c = self.input_channels;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != c || l.kernel == 0 || l.stride == 0 || l.dilation == 0 || l.out_channels == 0 {
                return Err(Error::ShapeMismatch(format!("layer {i} does not chain: {l:?}")));
            }
            if l.kind == LayerKind::TransposeConv && (l.kernel < l.stride || (l.kernel - l.stride) % 2 != 0) {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: kernel must be stride plus an even number"
                )));
            }
            c = l.out_channels;
        }
        if c != self.labels {
            return Err(Error::ShapeMismatch(format!(
                "last layer has {c} outputs but the network has {} labels",
                self.labels
            )));
        }
        Ok(())
    }

    /// Output size for an input size, if every layer accepts it.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.layers.iter().try_fold((h, w), |(h, w), l| l.output_size(h, w))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_len() + l.out_channels).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub spec: LayerSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    /// This layer alone, ReLU included.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(input)?;
        let mut x = layer::forward(&self.spec, &self.weight, &self.bias, input);
        if self.spec.relu {
            relu(&mut x);
        }
        Ok(x)
    }

    /// Gradients of `Σ grad_out ⊙ self.forward(input)`, where `output` is
    /// that forward result. Parameter gradients accumulate into `grads`.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut LayerParams<T>,
    ) -> Result<Tensor<T>> {
        self.check(input)?;
        if grad_out.shape() != output.shape() || grads.spec != self.spec {
            return Err(Error::ShapeMismatch("layer gradient buffers do not match".into()));
        }
        let mut g = grad_out.clone();
        if self.spec.relu {
            mask_relu(&mut g, output);
        }
        Ok(layer::backward(
            &self.spec,
            &self.weight,
            input,
            &g,
            &mut grads.weight,
            &mut grads.bias,
            true,
        )
        .expect("input gradient requested"))
    }

    fn check(&self, input: &Tensor<T>) -> Result<()> {
        if input.channels != self.spec.in_channels || self.spec.output_size(input.height, input.width).is_none() {
            return Err(Error::ShapeMismatch(format!(
                "layer {:?} cannot take a {:?} input",
                self.spec,
                input.shape()
            )));
        }
        Ok(())
    }
}

/// Network parameters. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub input_channels: usize,
    pub labels: usize,
    pub layers: Vec<LayerParams<T>>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    /// Input of every layer; entry `i + 1` is the (post-ReLU) output of layer `i`.
    activations: Vec<Tensor<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("cache holds at least the input")
    }

    /// The network input followed by every layer's output.
    pub fn activations(&self) -> &[Tensor<T>] {
        &self.activations
    }
}

/// Diagonal bilinear upsampling kernel in the transposed-convolution
/// layout `[in][ky][kx][out]`.
fn bilinear_weight<T: Scalar>(l: &LayerSpec) -> Vec<T> {
    let k = l.kernel;
    let factor = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
    let tri = |t: usize| 1.0 - (t as f64 - center).abs() / factor;
    let mut w = vec![T::zero(); l.weight_len()];
    for c in 0..l.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                w[((c * k + ky) * k + kx) * l.out_channels + c] = T::from_f64_lossy(tri(ky) * tri(kx));
            }
        }
    }
    w
}

impl<T: Scalar> Network<T> {
    /// Uniform initialization in `±sqrt(6 / fan_in)` per layer, zero biases.
    /// A transposed convolution mapping each channel onto itself starts as
    /// channel-wise bilinear interpolation instead.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let weight = if l.kind == LayerKind::TransposeConv && l.in_channels == l.out_channels {
                    bilinear_weight(l)
                } else {
                    let bound = (6.0 / l.fan_in() as f64).sqrt();
                    (0..l.weight_len())
                        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
                        .collect()
                };
                LayerParams {
                    spec: *l,
                    weight,
                    bias: vec![T::zero(); l.out_channels],
                }
            })
            .collect();
        Ok(Network {
            input_channels: spec.input_channels,
            labels: spec.labels,
            layers,
        })
    }

    /// Network of the given spec with every parameter zero.
    pub fn zeros(spec: &NetworkSpec) -> Result<Network<T>> {
        spec.validate()?;
        Ok(Network {
            input_channels: spec.input_channels,
            labels: spec.labels,
            layers: spec
                .layers
                .iter()
                .map(|l| LayerParams {
                    spec: *l,
                    weight: vec![T::zero(); l.weight_len()],
                    bias: vec![T::zero(); l.out_channels],
                })
                .collect(),
        })
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_channels: self.input_channels,
            labels: self.labels,
            layers: self.layers.iter().map(|l| l.spec).collect(),
        }
    }

    pub fn zeros_like(&self) -> Network<T> {
        Network {
            input_channels: self.input_channels,
            labels: self.labels,
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    spec: l.spec,
                    weight: vec![T::zero(); l.weight.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_channels: self.input_channels,
            labels: self.labels,
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    spec: l.spec,
                    weight: l.weight.iter().map(|v| cast(*v)).collect(),
                    bias: l.bias.iter().map(|v| cast(*v)).collect(),
                })
                .collect(),
        }
    }

    /// All parameters as one flat sequence, layer by layer, weights before
    /// biases.
    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Element-wise `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Network<T>, scale: T) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a = *a + scale * *b;
        }
    }

    pub fn squared_norm(&self) -> T {
        self.params().fold(T::zero(), |acc, v| acc + *v * *v)
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        if image.channels != self.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, image has {}",
                self.input_channels, image.channels
            )));
        }
        if image.data.len() != image.height * image.width * image.channels {
            return Err(Error::ShapeMismatch(
                "tensor data length disagrees with its shape".into(),
            ));
        }
        match self.spec().output_size(image.height, image.width) {
            Some(size) if size == (image.height, image.width) => Ok(()),
            _ => Err(Error::ShapeMismatch(format!(
                "network output would not match a {}×{} input; sides must be multiples of 8",
                image.height, image.width
            ))),
        }
    }

    /// Raw `H × W × L` confidences.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(image)?;
        let mut x = image.clone();
        for l in &self.layers {
            x = layer::forward(&l.spec, &l.weight, &l.bias, &x);
            if l.spec.relu {
                relu(&mut x);
            }
        }
        Ok(x)
    }

    /// Forward pass keeping every activation for [`Network::backward`].
    pub fn forward_cached(&self, image: &Tensor<T>) -> Result<ForwardCache<T>> {
        self.check_input(image)?;
        let mut activations = vec![image.clone()];
        for l in &self.layers {
            let mut x = layer::forward(&l.spec, &l.weight, &l.bias, activations.last().unwrap());
            if l.spec.relu {
                relu(&mut x);
            }
            activations.push(x);
        }
        Ok(ForwardCache { activations })
    }

    /// Gradients of `Σ grad_out ⊙ forward(image)` with respect to the
    /// parameters (accumulated into `grads`) and, on request, the input.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut Network<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::ShapeMismatch(
                "forward cache belongs to a different network".into(),
            ));
        }
        if grad_out.shape() != cache.output().shape() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} does not match network output {:?}",
                grad_out.shape(),
                cache.output().shape()
            )));
        }
        if grads.spec() != self.spec() {
            return Err(Error::ShapeMismatch("gradient buffer has a different layout".into()));
        }
        let mut g = grad_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.spec.relu {
                mask_relu(&mut g, &cache.activations[i + 1]);
            }
            let gl = &mut grads.layers[i];
            let want_input = i > 0 || need_input_grad;
            match layer::backward(
                &l.spec,
                &l.weight,
                &cache.activations[i],
                &g,
                &mut gl.weight,
                &mut gl.bias,
                want_input,
            ) {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }
}

fn relu<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes the gradient where the ReLU output is not positive.
fn mask_relu<T: Scalar>(g: &mut Tensor<T>, output: &Tensor<T>) {
    for (gv, out) in g.data.iter_mut().zip(&output.data) {
        if *out <= T::zero() {
            *gv = T::zero();
        }
    }
}

#[cfg(test)]
mod tests;
