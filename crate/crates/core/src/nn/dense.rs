use ndarray::{Array, Array1, Array2, Axis, Dimension};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{kaiming_uniform, ParamSet};
use crate::{sc, Scalar};

/// Fully connected layer on vectors: y = Wx + b.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S: Scalar> {
    /// (out, in)
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

#[derive(Debug, Clone)]
pub struct DenseCache<S: Scalar> {
    x: Array1<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        let weight =
            Array2::from_shape_vec((out_dim, in_dim), kaiming_uniform(rng, in_dim, out_dim * in_dim))
                .expect("shape matches sample count");
        Self { weight, bias: Array1::zeros(out_dim) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: Array2::zeros(self.weight.dim()), bias: Array1::zeros(self.bias.dim()) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim().0
    }

    pub fn forward(&self, x: &Array1<S>) -> (Array1<S>, DenseCache<S>) {
        assert_eq!(x.len(), self.in_dim(), "input size mismatch");
        (self.weight.dot(x) + &self.bias, DenseCache { x: x.clone() })
    }

    pub fn backward(&self, cache: &DenseCache<S>, gy: &Array1<S>) -> (Array1<S>, Self) {
        let gx = self.weight.t().dot(gy);
        let gw = gy
            .view()
            .insert_axis(Axis(1))
            .dot(&cache.x.view().insert_axis(Axis(0)));
        // dot can hand back a Fortran-layout array; ParamSet needs row-major.
        let gw = super::reshaped(gw, ndarray::Dim(self.weight.dim()));
        (gx, Self { weight: gw, bias: gy.clone() })
    }
}

impl<S: Scalar> ParamSet<S> for Dense<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        vec![self.weight.as_slice().unwrap(), self.bias.as_slice().unwrap()]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        vec![self.weight.as_slice_mut().unwrap(), self.bias.as_slice_mut().unwrap()]
    }
}

/// Element-wise nonlinearity. LeakyRelu uses a fixed 0.2 negative slope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(S::zero()),
            Activation::LeakyRelu => {
                if x > S::zero() {
                    x
                } else {
                    x * sc(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => S::one() / (S::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// df/dx expressed through the *input* value.
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Identity => S::one(),
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > S::zero() {
                    S::one()
                } else {
                    sc(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => {
                let s = self.apply(x);
                s * (S::one() - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                S::one() - t * t
            }
        }
    }

    pub fn forward<S: Scalar, D: Dimension>(self, x: &Array<S, D>) -> Array<S, D> {
        x.mapv(|v| self.apply(v))
    }

    /// Chain rule through the activation: returns gy ⊙ f'(x).
    pub fn backward<S: Scalar, D: Dimension>(
        self,
        x: &Array<S, D>,
        gy: &Array<S, D>,
    ) -> Array<S, D> {
        let mut g = x.mapv(|v| self.derivative(v));
        g.zip_mut_with(gy, |d, u| *d *= *u);
        g
    }
}
