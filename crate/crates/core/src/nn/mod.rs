//! Minimal CPU neural-network primitives for the generator, detector, and
//! synthesis proxies.
//!
//! Layers are plain structs of ndarray parameter tensors. `forward` returns
//! the output plus a cache; `backward` consumes the cache and the upstream
//! gradient and returns the input gradient together with a *gradient twin* —
//! a value of the same layer type whose parameter arrays hold gradients.
//! Everything runs one sample at a time; batching is a loop plus gradient
//! accumulation via [`ParamSet::add_scaled`].

mod conv;
mod dense;

pub use conv::{col2im, im2col, Conv2d, ConvCache, ConvTCache, ConvTranspose2d};
pub use dense::{Activation, Dense, DenseCache};

use ndarray::{Array, Dimension};
use rand::Rng;

use crate::{sc, Scalar};

/// Reshape that tolerates the Fortran-layout arrays `dot` sometimes returns,
/// copying into row-major order only when needed.
pub(crate) fn reshaped<S: Scalar, D1: Dimension, D2: Dimension>(
    a: Array<S, D1>,
    dim: D2,
) -> Array<S, D2> {
    if a.is_standard_layout() {
        a.into_shape_with_order(dim).expect("element count matches")
    } else {
        let v: Vec<S> = a.iter().copied().collect();
        Array::from_shape_vec(dim, v).expect("element count matches")
    }
}

/// Uniform access to a model's parameter tensors in a stable order.
///
/// The order must match between a value and its gradient twin; the optimiser
/// and the checkpoint format both rely on that.
pub trait ParamSet<S: Scalar> {
    fn param_slices(&self) -> Vec<&[S]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [S]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn zero_params(&mut self) {
        for s in self.param_slices_mut() {
            s.fill(S::zero());
        }
    }

    fn scale_params(&mut self, factor: S) {
        for s in self.param_slices_mut() {
            for v in s {
                *v *= factor;
            }
        }
    }

    /// `self += factor * other`, tensor by tensor. Shapes must agree.
    fn add_scaled(&mut self, other: &Self, factor: S) {
        let theirs = other.param_slices();
        let mut mine = self.param_slices_mut();
        assert_eq!(mine.len(), theirs.len(), "parameter tensor count mismatch");
        for (m, t) in mine.iter_mut().zip(&theirs) {
            assert_eq!(m.len(), t.len(), "parameter tensor length mismatch");
            for (mv, tv) in m.iter_mut().zip(t.iter()) {
                *mv += *tv * factor;
            }
        }
    }

    /// Euclidean norm over every parameter, mostly for training logs.
    fn param_l2(&self) -> f64 {
        self.param_slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v.to_f64().unwrap_or(0.0).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// He-uniform samples: U(−√(6/fan_in), +√(6/fan_in)).
pub fn kaiming_uniform<S: Scalar, R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| sc::<S>(rng.random_range(-bound..bound))).collect()
}

/// Adam with the usual defaults (β₁=0.9, β₂=0.999, ε=1e-8).
///
/// Moment buffers are allocated on the first step and keyed by position, so
/// one optimiser must stay paired with one model.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: sc(lr),
            beta1: sc(0.9),
            beta2: sc(0.999),
            eps: sc(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.to_f64().unwrap_or(0.0)
    }

    pub fn step<P: ParamSet<S>>(&mut self, params: &mut P, grads: &P) {
        let g = grads.param_slices();
        if self.m.is_empty() {
            self.m = g.iter().map(|s| vec![S::zero(); s.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), g.len(), "optimiser bound to a different model");
        self.t += 1;
        let bc1 = S::one() - self.beta1.powi(self.t as i32);
        let bc2 = S::one() - self.beta2.powi(self.t as i32);
        let mut p = params.param_slices_mut();
        for i in 0..g.len() {
            assert_eq!(p[i].len(), g[i].len(), "optimiser bound to a different model");
            for j in 0..g[i].len() {
                let gj = g[i][j];
                self.m[i][j] = self.beta1 * self.m[i][j] + (S::one() - self.beta1) * gj;
                self.v[i][j] = self.beta2 * self.v[i][j] + (S::one() - self.beta2) * gj * gj;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                p[i][j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
