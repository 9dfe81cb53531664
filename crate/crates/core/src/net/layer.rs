//! Convolution and transposed convolution on `H × W × C` tensors, both
//! lowered to matrix products over unfolded patches.

use serde::{Deserialize, Serialize};

use super::scalar::{matmul, Mat, Scalar};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    TransposeConv,
}

/// Geometry of one layer. Convolution weights are stored
/// `[ky][kx][in][out]`; transposed convolution weights `[in][ky][kx][out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub relu: bool,
}

impl LayerSpec {
    /// Convolution with "same" zero padding before striding.
    pub fn conv(kernel: usize, cin: usize, cout: usize, stride: usize, dilation: usize, relu: bool) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel,
            in_channels: cin,
            out_channels: cout,
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            relu,
        }
    }

    /// Transposed convolution upsampling by exactly `stride`; `kernel` must
    /// be `stride` plus an even number.
    pub fn transpose_conv(kernel: usize, cin: usize, cout: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::TransposeConv,
            kernel,
            in_channels: cin,
            out_channels: cout,
            stride,
            dilation: 1,
            padding: (kernel - stride) / 2,
            relu: false,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels
    }

    /// Number of inputs feeding each output value.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.kernel * self.kernel * self.in_channels,
            LayerKind::TransposeConv => {
                let taps = self.kernel.div_ceil(self.stride);
                taps * taps * self.in_channels
            }
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let dim = |n: usize| -> Option<usize> {
            match self.kind {
                LayerKind::Conv => {
                    let span = self.dilation * (self.kernel - 1) + 1;
                    let padded = n + 2 * self.padding;
                    (padded >= span).then(|| (padded - span) / self.stride + 1)
                }
                LayerKind::TransposeConv => ((n - 1) * self.stride + self.kernel).checked_sub(2 * self.padding),
            }
        };
        if h == 0 || w == 0 {
            return None;
        }
        Some((dim(h)?, dim(w)?))
    }

    fn patch_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.kernel * self.kernel * self.in_channels,
            LayerKind::TransposeConv => self.kernel * self.kernel * self.out_channels,
        }
    }
}

/// Visits every (patch row, patch column, image offset) triple linking the
/// unfolded matrix to the image it was unfolded from. `patch_grid` is the
/// spatial grid that indexes patch rows, `image` the grid the taps land on.
fn for_each_tap(
    spec: &LayerSpec,
    patch_grid: (usize, usize),
    image: (usize, usize),
    channels: usize,
    mut visit: impl FnMut(usize, usize, usize),
) {
    let (gh, gw) = patch_grid;
    let (ih, iw) = image;
    let (s, d, p, k) = (
        spec.stride as isize,
        spec.dilation as isize,
        spec.padding as isize,
        spec.kernel,
    );
    let row_len = k * k * channels;
    for gy in 0..gh {
        for gx in 0..gw {
            let row = (gy * gw + gx) * row_len;
            for ky in 0..k {
                let y = gy as isize * s - p + ky as isize * d;
                if y < 0 || y >= ih as isize {
                    continue;
                }
                for kx in 0..k {
                    let x = gx as isize * s - p + kx as isize * d;
                    if x < 0 || x >= iw as isize {
                        continue;
                    }
                    let col = row + (ky * k + kx) * channels;
                    let px = (y as usize * iw + x as usize) * channels;
                    visit(col, px, channels);
                }
            }
        }
    }
}

/// Unfolds `image` into one row of taps per patch (zero outside).
fn unfold<T: Scalar>(spec: &LayerSpec, patch_grid: (usize, usize), image: &Tensor<T>) -> Vec<T> {
    let c = image.channels;
    let mut cols = vec![T::zero(); patch_grid.0 * patch_grid.1 * spec.kernel * spec.kernel * c];
    for_each_tap(spec, patch_grid, (image.height, image.width), c, |col, px, n| {
        cols[col..col + n].copy_from_slice(&image.data[px..px + n]);
    });
    cols
}

/// Adjoint of [`unfold`]: accumulates patch rows back onto the image.
fn fold<T: Scalar>(spec: &LayerSpec, patch_grid: (usize, usize), cols: &[T], image: &mut Tensor<T>) {
    let c = image.channels;
    let (h, w) = (image.height, image.width);
    for_each_tap(spec, patch_grid, (h, w), c, |col, px, n| {
        for (o, v) in image.data[px..px + n].iter_mut().zip(&cols[col..col + n]) {
            *o = *o + *v;
        }
    });
}

/// Layer output before the optional ReLU.
pub(crate) fn forward<T: Scalar>(spec: &LayerSpec, weight: &[T], bias: &[T], input: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = spec
        .output_size(input.height, input.width)
        .expect("input size validated by the caller");
    let cout = spec.out_channels;
    let mut out = Tensor::zeros(oh, ow, cout);
    match spec.kind {
        LayerKind::Conv => {
            let k = spec.patch_len();
            let cols = unfold(spec, (oh, ow), input);
            matmul(
                Mat::new(&cols, oh * ow, k),
                Mat::new(weight, k, cout),
                &mut out.data,
                false,
            );
        }
        LayerKind::TransposeConv => {
            let (ih, iw, cin) = (input.height, input.width, input.channels);
            let k = spec.patch_len();
            let mut cols = vec![T::zero(); ih * iw * k];
            matmul(
                Mat::new(&input.data, ih * iw, cin),
                Mat::new(weight, cin, k),
                &mut cols,
                false,
            );
            fold(spec, (ih, iw), &cols, &mut out);
        }
    }
    for px in out.data.chunks_exact_mut(cout) {
        for (v, b) in px.iter_mut().zip(bias) {
            *v = *v + *b;
        }
    }
    out
}

/// Given the gradient at the layer output (after ReLU masking), accumulates
/// weight and bias gradients and returns the gradient at the input.
pub(crate) fn backward<T: Scalar>(
    spec: &LayerSpec,
    weight: &[T],
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let cout = spec.out_channels;
    for px in grad_out.data.chunks_exact(cout) {
        for (g, v) in grad_bias.iter_mut().zip(px) {
            *g = *g + *v;
        }
    }
    let k = spec.patch_len();
    match spec.kind {
        LayerKind::Conv => {
            let (oh, ow) = (grad_out.height, grad_out.width);
            let cols = unfold(spec, (oh, ow), input);
            let g = Mat::new(&grad_out.data, oh * ow, cout);
            matmul(Mat::new(&cols, oh * ow, k).t(), g, grad_weight, true);
            need_input_grad.then(|| {
                let mut dcols = vec![T::zero(); oh * ow * k];
                matmul(g, Mat::new(weight, k, cout).t(), &mut dcols, false);
                let mut dx = Tensor::zeros(input.height, input.width, input.channels);
                fold(spec, (oh, ow), &dcols, &mut dx);
                dx
            })
        }
        LayerKind::TransposeConv => {
            let (ih, iw, cin) = (input.height, input.width, input.channels);
            let dcols = unfold(spec, (ih, iw), grad_out);
            let dc = Mat::new(&dcols, ih * iw, k);
            matmul(Mat::new(&input.data, ih * iw, cin).t(), dc, grad_weight, true);
            need_input_grad.then(|| {
                let mut dx = Tensor::zeros(ih, iw, cin);
                matmul(dc, Mat::new(weight, cin, k).t(), &mut dx.data, false);
                dx
            })
        }
    }
}
