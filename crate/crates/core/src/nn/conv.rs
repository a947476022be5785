use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;

use super::{kaiming_uniform, ParamSet};
use crate::Scalar;

/// Lower a (C,H,W) tensor into a (C·k·k, oh·ow) patch matrix so convolution
/// becomes a single GEMM.
pub fn im2col<S: Scalar>(x: &Array3<S>, k: usize, stride: usize, pad: usize) -> Array2<S> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut col = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..oh {
                    let ii = oi * stride + ki; // padded coordinates
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = oj * stride + kj;
                        if jj < pad || jj >= w + pad {
                            continue;
                        }
                        col[[row, oi * ow + oj]] = x[[ci, ii - pad, jj - pad]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into a (C,H,W)
/// tensor. Overlapping patches accumulate, which is exactly what the
/// gradient (and transposed convolution) needs.
pub fn col2im<S: Scalar>(
    col: &Array2<S>,
    dim: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<S> {
    let (c, h, w) = dim;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    assert_eq!(col.dim(), (c * k * k, oh * ow), "col2im shape mismatch");
    let mut x = Array3::zeros(dim);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..oh {
                    let ii = oi * stride + ki;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = oj * stride + kj;
                        if jj < pad || jj >= w + pad {
                            continue;
                        }
                        x[[ci, ii - pad, jj - pad]] += col[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    x
}

/// Square-kernel 2-D convolution over (C,H,W) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<S: Scalar> {
    /// (out_c, in_c, k, k)
    pub weight: Array4<S>,
    pub bias: Array1<S>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<S: Scalar> {
    col: Array2<S>,
    in_dim: (usize, usize, usize),
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * k * k;
        let weight =
            Array4::from_shape_vec((out_c, in_c, k, k), kaiming_uniform(rng, fan_in, out_c * fan_in))
                .expect("shape matches sample count");
        Self { weight, bias: Array1::zeros(out_c), stride, pad }
    }

    /// Same hyperparameters, zeroed parameters; the gradient twin.
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().3
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel()) / self.stride + 1
    }

    pub fn forward(&self, x: &Array3<S>) -> (Array3<S>, ConvCache<S>) {
        let (in_c, h, w) = x.dim();
        assert_eq!(in_c, self.in_channels(), "input channel mismatch");
        let (k, out_c) = (self.kernel(), self.out_channels());
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let col = im2col(x, k, self.stride, self.pad);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("weights are contiguous");
        let mut y = w_mat.dot(&col);
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += b;
        }
        let y = super::reshaped(y, ndarray::Dim((out_c, oh, ow)));
        (y, ConvCache { col, in_dim: (in_c, h, w) })
    }

    pub fn backward(&self, cache: &ConvCache<S>, gy: &Array3<S>) -> (Array3<S>, Self) {
        let (out_c, oh, ow) = gy.dim();
        let (in_c, k) = (self.in_channels(), self.kernel());
        let gy_mat = gy
            .view()
            .into_shape_with_order((out_c, oh * ow))
            .expect("gradient is contiguous");
        let gw = super::reshaped(gy_mat.dot(&cache.col.t()), ndarray::Dim((out_c, in_c, k, k)));
        let gb = gy_mat.sum_axis(Axis(1));
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("weights are contiguous");
        let gcol = w_mat.t().dot(&gy_mat);
        let gx = col2im(&gcol, cache.in_dim, k, self.stride, self.pad);
        (gx, Self { weight: gw, bias: gb, stride: self.stride, pad: self.pad })
    }

    /// Input gradient only; skips the weight-gradient GEMM. For frozen layers.
    pub fn backward_data(&self, cache: &ConvCache<S>, gy: &Array3<S>) -> Array3<S> {
        let (out_c, oh, ow) = gy.dim();
        let (in_c, k) = (self.in_channels(), self.kernel());
        let gy_mat = gy
            .view()
            .into_shape_with_order((out_c, oh * ow))
            .expect("gradient is contiguous");
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .expect("weights are contiguous");
        let gcol = w_mat.t().dot(&gy_mat);
        col2im(&gcol, cache.in_dim, k, self.stride, self.pad)
    }
}

impl<S: Scalar> ParamSet<S> for Conv2d<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        vec![self.weight.as_slice().unwrap(), self.bias.as_slice().unwrap()]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        vec![self.weight.as_slice_mut().unwrap(), self.bias.as_slice_mut().unwrap()]
    }
}

/// Transposed (fractionally strided) convolution; the adjoint of [`Conv2d`]
/// with the same stride and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<S: Scalar> {
    /// (in_c, out_c, k, k)
    pub weight: Array4<S>,
    pub bias: Array1<S>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvTCache<S: Scalar> {
    x_mat: Array2<S>,
    in_hw: (usize, usize),
}

impl<S: Scalar> ConvTranspose2d<S> {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * k * k;
        let weight =
            Array4::from_shape_vec((in_c, out_c, k, k), kaiming_uniform(rng, fan_in, in_c * out_c * k * k))
                .expect("shape matches sample count");
        Self { weight, bias: Array1::zeros(out_c), stride, pad }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().3
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel() - 2 * self.pad
    }

    pub fn forward(&self, x: &Array3<S>) -> (Array3<S>, ConvTCache<S>) {
        let (in_c, h, w) = x.dim();
        assert_eq!(in_c, self.in_channels(), "input channel mismatch");
        let (k, out_c) = (self.kernel(), self.out_channels());
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let x_mat = x
            .view()
            .into_shape_with_order((in_c, h * w))
            .expect("input is contiguous")
            .to_owned();
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((in_c, out_c * k * k))
            .expect("weights are contiguous");
        let col = w_mat.t().dot(&x_mat);
        let mut y = col2im(&col, (out_c, oh, ow), k, self.stride, self.pad);
        for (mut ch, &b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            ch += b;
        }
        (y, ConvTCache { x_mat, in_hw: (h, w) })
    }

    pub fn backward(&self, cache: &ConvTCache<S>, gy: &Array3<S>) -> (Array3<S>, Self) {
        let (in_c, k, out_c) = (self.in_channels(), self.kernel(), self.out_channels());
        let (h, w) = cache.in_hw;
        let gcol = im2col(gy, k, self.stride, self.pad);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((in_c, out_c * k * k))
            .expect("weights are contiguous");
        let gx = super::reshaped(w_mat.dot(&gcol), ndarray::Dim((in_c, h, w)));
        let gw = super::reshaped(cache.x_mat.dot(&gcol.t()), ndarray::Dim((in_c, out_c, k, k)));
        let gb = gy.sum_axis(Axis(2)).sum_axis(Axis(1));
        (gx, Self { weight: gw, bias: gb, stride: self.stride, pad: self.pad })
    }
}

impl<S: Scalar> ParamSet<S> for ConvTranspose2d<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        vec![self.weight.as_slice().unwrap(), self.bias.as_slice().unwrap()]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        vec![self.weight.as_slice_mut().unwrap(), self.bias.as_slice_mut().unwrap()]
    }
}
