//! Perceptual similarity and distributional quality metrics.
//!
//! Both metrics run on features from one small frozen convolutional
//! extractor seeded at construction, so every value is deterministic and the
//! artifact needs no downloaded backbone. The extractor is a stand-in:
//! absolute values are not comparable to published numbers, only identities,
//! orderings, and trends are meaningful, and every report carries the
//! extractor version tag for that reason.

use ndarray::{Array1, Array2, Array3, Zip};

use crate::image::ImageTensor;
use crate::nn::{Activation, Conv2d};
use crate::{linalg, sc, seeds, Error, Result, Scalar};

/// Bump when the architecture or initialisation recipe changes.
pub const EXTRACTOR_VERSION: &str = "tapnet-v1";

const TAP_CHANNELS: [usize; 4] = [16, 24, 32, 32];
/// Perceptual distance reads the first three taps; embeddings read the last.
const LPIPS_TAPS: usize = 3;
const NORM_EPS: f64 = 1e-10;

/// Seed of the shared extractor used by training, evaluation and reports.
/// Fixed so the perceptual metric is the same object in every phase.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x7a9e_11f5;

/// The crate-wide extractor instance for a given image geometry.
pub fn default_extractor<S: Scalar>(resolution: usize, channels: usize) -> Result<FeatureExtractor<S>> {
    FeatureExtractor::new(DEFAULT_EXTRACTOR_SEED, resolution, channels)
}

/// Frozen seeded convolutional feature extractor.
///
/// Four 3×3 conv+ReLU stages; stages 2–4 have stride 2. Identical
/// (version, seed, channels) always yields identical weights.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<S: Scalar> {
    convs: Vec<Conv2d<S>>,
    arch: Vec<String>,
    seed: u64,
    resolution: usize,
    channels: usize,
}

/// Per-stage caches from [`FeatureExtractor::forward_taps`], consumed when
/// backpropagating a perceptual loss into the input image.
pub struct ExtractorCache<S: Scalar> {
    stages: Vec<(crate::nn::ConvCache<S>, Array3<S>)>,
}

impl<S: Scalar> FeatureExtractor<S> {
    pub fn new(seed: u64, resolution: usize, channels: usize) -> Result<Self> {
        if resolution == 0 || resolution % 8 != 0 {
            return Err(Error::config(format!(
                "extractor resolution must be a positive multiple of 8, got {resolution}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::config(format!("extractor channels must be 1 or 3, got {channels}")));
        }
        let mut rng = seeds::rng(seeds::derive(seed, "feature-extractor"));
        let mut convs = Vec::new();
        let mut arch = Vec::new();
        let mut in_c = channels;
        for (i, &out_c) in TAP_CHANNELS.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Conv2d::new(&mut rng, in_c, out_c, 3, stride, 1));
            arch.push(format!("conv3x3 {in_c}->{out_c} stride {stride} + relu"));
            in_c = out_c;
        }
        arch.push(format!("global average pool -> {in_c}"));
        Ok(Self { convs, arch, seed, resolution, channels })
    }

    pub fn version(&self) -> &'static str {
        EXTRACTOR_VERSION
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Human-readable layer list.
    pub fn architecture(&self) -> &[String] {
        &self.arch
    }

    pub fn embed_dim(&self) -> usize {
        TAP_CHANNELS[3]
    }

    fn check_image(&self, img: &ImageTensor<S>) -> Result<()> {
        if img.resolution() != self.resolution || img.channels() != self.channels {
            return Err(Error::dimension(format!(
                "image is {}x{} c{}, extractor expects {}x{} c{}",
                img.height(),
                img.width(),
                img.channels(),
                self.resolution,
                self.resolution,
                self.channels
            )));
        }
        Ok(())
    }

    fn check_chw(&self, x: &Array3<S>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.channels || h != self.resolution || w != self.resolution {
            return Err(Error::dimension(format!(
                "input is ({c},{h},{w}), extractor expects ({},{},{})",
                self.channels, self.resolution, self.resolution
            )));
        }
        Ok(())
    }

    /// All post-ReLU tap outputs for a centered (2x−1) input.
    fn forward_taps(&self, centered: &Array3<S>) -> (Vec<Array3<S>>, ExtractorCache<S>) {
        let mut taps = Vec::with_capacity(self.convs.len());
        let mut stages = Vec::with_capacity(self.convs.len());
        let mut x = centered.clone();
        for conv in &self.convs {
            let (pre, cache) = conv.forward(&x);
            let post = Activation::Relu.forward(&pre);
            taps.push(post.clone());
            stages.push((cache, pre));
            x = post;
        }
        (taps, ExtractorCache { stages })
    }

    /// Push tap-space gradients back to the centered input. `tap_grads` must
    /// hold one array per stage (zeros for unused taps).
    fn backward_input(&self, cache: &ExtractorCache<S>, mut tap_grads: Vec<Array3<S>>) -> Array3<S> {
        assert_eq!(tap_grads.len(), self.convs.len(), "one gradient per tap");
        let mut g = tap_grads.pop().expect("at least one stage");
        for i in (0..self.convs.len()).rev() {
            let (conv_cache, pre) = &cache.stages[i];
            let g_pre = Activation::Relu.backward(pre, &g);
            let gx = self.convs[i].backward_data(conv_cache, &g_pre);
            if i == 0 {
                return gx;
            }
            g = gx;
            g += &tap_grads[i - 1];
        }
        unreachable!("loop returns at stage 0")
    }

    /// Penultimate-stage embedding: global average pool of the last tap.
    pub fn embed(&self, img: &ImageTensor<S>) -> Result<Array1<S>> {
        self.check_image(img)?;
        let centered = center(&img.to_chw());
        let (taps, _) = self.forward_taps(&centered);
        let last = &taps[TAP_CHANNELS.len() - 1];
        let (c, h, w) = last.dim();
        let inv = S::one() / sc((h * w) as f64);
        let mut e = Array1::zeros(c);
        for ch in 0..c {
            let mut acc = S::zero();
            for i in 0..h {
                for j in 0..w {
                    acc += last[[ch, i, j]];
                }
            }
            e[ch] = acc * inv;
        }
        Ok(e)
    }
}

fn center<S: Scalar>(chw: &Array3<S>) -> Array3<S> {
    chw.mapv(|v| v + v - S::one())
}

/// Unit-normalise each pixel's channel vector: u = f / (‖f‖ + ε).
fn channel_normalize<S: Scalar>(f: &Array3<S>) -> Array3<S> {
    let (c, h, w) = f.dim();
    let eps = sc::<S>(NORM_EPS);
    let mut u = f.clone();
    for i in 0..h {
        for j in 0..w {
            let mut sq = S::zero();
            for ch in 0..c {
                let v = f[[ch, i, j]];
                sq += v * v;
            }
            let r = sq.sqrt() + eps;
            for ch in 0..c {
                u[[ch, i, j]] /= r;
            }
        }
    }
    u
}

/// Perceptual distance: sum over tap layers of the mean squared difference
/// between channel-unit-normalised feature maps. Zero exactly on identical
/// inputs and symmetric by construction.
pub fn perceptual_distance<S: Scalar>(
    x: &ImageTensor<S>,
    y: &ImageTensor<S>,
    extractor: &FeatureExtractor<S>,
) -> Result<S> {
    if !x.same_shape(y) {
        return Err(Error::dimension("perceptual distance needs matching shapes"));
    }
    extractor.check_image(x)?;
    let (tx, _) = extractor.forward_taps(&center(&x.to_chw()));
    let (ty, _) = extractor.forward_taps(&center(&y.to_chw()));
    let mut total = S::zero();
    for (fx, fy) in tx.iter().zip(&ty).take(LPIPS_TAPS) {
        let ux = channel_normalize(fx);
        let uy = channel_normalize(fy);
        let mut acc = S::zero();
        Zip::from(&ux).and(&uy).for_each(|a, b| {
            let d = *a - *b;
            acc += d * d;
        });
        total += acc / sc(ux.len() as f64);
    }
    Ok(total)
}

/// [`perceptual_distance`] on channel-first [0,1] arrays, returning the
/// gradient with respect to `y`. This is the training path: the generator
/// loss differentiates through the watermarked image only.
pub fn perceptual_distance_chw_grad<S: Scalar>(
    x: &Array3<S>,
    y: &Array3<S>,
    extractor: &FeatureExtractor<S>,
) -> Result<(S, Array3<S>)> {
    if x.dim() != y.dim() {
        return Err(Error::dimension("perceptual distance needs matching shapes"));
    }
    extractor.check_chw(x)?;
    let (tx, _) = extractor.forward_taps(&center(x));
    let (ty, cache_y) = extractor.forward_taps(&center(y));
    let mut total = S::zero();
    let mut tap_grads: Vec<Array3<S>> = ty.iter().map(|t| Array3::zeros(t.dim())).collect();
    for t in 0..LPIPS_TAPS {
        let fy = &ty[t];
        let ux = channel_normalize(&tx[t]);
        let uy = channel_normalize(fy);
        let n = sc::<S>(ux.len() as f64);
        let mut acc = S::zero();
        Zip::from(&ux).and(&uy).for_each(|a, b| {
            let d = *a - *b;
            acc += d * d;
        });
        total += acc / n;
        // d/d(uy) of mean‖ux−uy‖² is 2(uy−ux)/n; push through u = f/(‖f‖+ε).
        let (c, h, w) = fy.dim();
        let two_over_n = sc::<S>(2.0) / n;
        let eps = sc::<S>(NORM_EPS);
        let g = &mut tap_grads[t];
        for i in 0..h {
            for j in 0..w {
                let mut sq = S::zero();
                for ch in 0..c {
                    let v = fy[[ch, i, j]];
                    sq += v * v;
                }
                let norm = sq.sqrt();
                let r = norm + eps;
                let mut dot = S::zero();
                for ch in 0..c {
                    let gu = (uy[[ch, i, j]] - ux[[ch, i, j]]) * two_over_n;
                    dot += fy[[ch, i, j]] * gu;
                    g[[ch, i, j]] = gu / r;
                }
                if norm > sc(1e-20) {
                    let scale = dot / (r * r * norm);
                    for ch in 0..c {
                        g[[ch, i, j]] -= fy[[ch, i, j]] * scale;
                    }
                }
            }
        }
    }
    let g_centered = extractor.backward_input(&cache_y, tap_grads);
    // Input was centered as 2y−1, so the chain rule doubles the gradient.
    Ok((total, g_centered.mapv(|v| v + v)))
}

/// Mean and covariance of embedding vectors.
#[derive(Debug, Clone)]
pub struct FeatureStats<S: Scalar> {
    pub mean: Array1<S>,
    pub covariance: Array2<S>,
    pub count: usize,
}

impl<S: Scalar> FeatureStats<S> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Embedding statistics over an image set; covariance uses the unbiased
/// (n−1) normalisation.
pub fn embed_features<S: Scalar>(
    images: &[ImageTensor<S>],
    extractor: &FeatureExtractor<S>,
) -> Result<FeatureStats<S>> {
    let n = images.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "embedding statistics need at least 2 images, got {n}"
        )));
    }
    let d = extractor.embed_dim();
    let mut embeddings = Array2::<S>::zeros((n, d));
    for (i, img) in images.iter().enumerate() {
        let e = extractor.embed(img)?;
        embeddings.row_mut(i).assign(&e);
    }
    let mean = embeddings.sum_axis(ndarray::Axis(0)) / sc::<S>(n as f64);
    let mut centered = embeddings;
    for mut row in centered.rows_mut() {
        row -= &mean;
    }
    let cov = centered.t().dot(&centered) / sc::<S>((n - 1) as f64);
    // GEMM blocking can leave asymmetric rounding; pin the invariant.
    let cov = (&cov + &cov.t()) * sc::<S>(0.5);
    Ok(FeatureStats { mean, covariance: cov, count: n })
}

/// Fréchet distance ‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2}), with the matrix
/// square root taken on the symmetrised product √Σa·Σb·√Σa.
pub fn frechet_distance<S: Scalar>(a: &FeatureStats<S>, b: &FeatureStats<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::dimension(format!(
            "feature statistics dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let to64 = |s: &FeatureStats<S>| -> (Array1<f64>, Array2<f64>) {
        (
            s.mean.mapv(|v| v.to_f64().unwrap_or(f64::NAN)),
            linalg::symmetrize(&s.covariance.mapv(|v| v.to_f64().unwrap_or(f64::NAN))),
        )
    };
    let (mu_a, sig_a) = to64(a);
    let (mu_b, sig_b) = to64(b);
    let root_a = linalg::sqrtm_psd(&sig_a)?;
    let inner = linalg::symmetrize(&root_a.dot(&sig_b).dot(&root_a));
    let cross = linalg::sqrtm_psd(&inner)?;
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let d = mean_term + linalg::trace(&sig_a) + linalg::trace(&sig_b)
        - 2.0 * linalg::trace(&cross);
    Ok(sc(d.max(0.0)))
}
