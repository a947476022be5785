//! Watermark generator, detector, the application operator, and both losses.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::metrics::FeatureExtractor;
use crate::nn::{Activation, Conv2d, ConvCache, ConvTCache, ConvTranspose2d, Dense, DenseCache, ParamSet};
use crate::{metrics, sc, seeds, Error, Result, Scalar};

pub const GENERATOR_VERSION: &str = "gen-v1";
pub const DETECTOR_VERSION: &str = "det-v1";

/// Probabilities are clipped into [ε, 1−ε] before the log.
pub const BCE_EPSILON: f64 = 1e-7;

/// Generator output is tanh-bounded and scaled by this, so a raw pattern can
/// move a pixel by at most ±0.25 before clamping.
const OUTPUT_SCALE: f64 = 0.25;

/// Latent vector z with its provenance seed, so it can be regenerated.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<S: Scalar> {
    pub values: Array1<S>,
    pub seed: u64,
}

/// k standard-normal draws, deterministic given the seed.
pub fn sample_latent<S: Scalar>(seed: u64, k: usize) -> LatentCode<S> {
    assert!(k >= 1, "latent dimension must be at least 1");
    let mut rng = seeds::rng(seeds::derive(seed, "latent"));
    let values = Array1::from_shape_simple_fn(k, || {
        sc::<S>(rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
    });
    LatentCode { values, seed }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Latent dimension k.
    pub latent_dim: usize,
    pub resolution: usize,
    pub channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { latent_dim: 128, resolution: 64, channels: 3 }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent dimension must be positive"));
        }
        let r = self.resolution;
        if r < 8 || r > 512 || !(r / GEN_BASE).is_power_of_two() || r % GEN_BASE != 0 {
            return Err(Error::config(format!(
                "generator resolution must be {GEN_BASE}·2^n in [8,512], got {r}"
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        Ok(())
    }
}

/// Spatial size of the dense seed volume the upsampling stack starts from.
const GEN_BASE: usize = 4;

fn stage_width(i: usize) -> usize {
    (64usize >> i).max(16)
}

/// Transposed-convolutional watermark generator, vanilla-GAN style: a dense
/// layer seeds a 4×4 volume which k4/s2 transposed convolutions double up to
/// the configured resolution; the output is tanh-bounded.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel<S: Scalar> {
    pub config: GeneratorConfig,
    pub version: String,
    fc: Dense<S>,
    ups: Vec<ConvTranspose2d<S>>,
}

pub struct GeneratorCache<S: Scalar> {
    fc_cache: DenseCache<S>,
    v_pre: Array1<S>,
    stage_caches: Vec<ConvTCache<S>>,
    stage_pre: Vec<Array3<S>>,
}

impl<S: Scalar> GeneratorModel<S> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng(seeds::derive(seed, "generator-init"));
        let depth = (config.resolution / GEN_BASE).trailing_zeros() as usize;
        let fc = Dense::new(&mut rng, config.latent_dim, stage_width(0) * GEN_BASE * GEN_BASE);
        let mut ups = Vec::with_capacity(depth);
        for i in 0..depth {
            let in_c = stage_width(i);
            let out_c = if i + 1 == depth { config.channels } else { stage_width(i + 1) };
            ups.push(ConvTranspose2d::new(&mut rng, in_c, out_c, 4, 2, 1));
        }
        Ok(Self { config, version: GENERATOR_VERSION.to_string(), fc, ups })
    }

    /// Same shape, zeroed parameters; the gradient twin.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            version: self.version.clone(),
            fc: self.fc.zeros_like(),
            ups: self.ups.iter().map(|u| u.zeros_like()).collect(),
        }
    }

    /// Signed pattern in channel-first layout, with everything needed to
    /// backpropagate through the network.
    pub fn forward(&self, z: &Array1<S>) -> Result<(Array3<S>, GeneratorCache<S>)> {
        if z.len() != self.config.latent_dim {
            return Err(Error::dimension(format!(
                "latent length {} does not match generator k={}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let (v_pre, fc_cache) = self.fc.forward(z);
        let v = Activation::Relu.forward(&v_pre);
        let mut x = v
            .into_shape_with_order((stage_width(0), GEN_BASE, GEN_BASE))
            .expect("dense output matches seed volume");
        let mut stage_caches = Vec::with_capacity(self.ups.len());
        let mut stage_pre = Vec::with_capacity(self.ups.len());
        let last = self.ups.len() - 1;
        for (i, up) in self.ups.iter().enumerate() {
            let (pre, cache) = up.forward(&x);
            x = if i == last {
                pre.mapv(|v| v.tanh() * sc(OUTPUT_SCALE))
            } else {
                Activation::Relu.forward(&pre)
            };
            stage_caches.push(cache);
            stage_pre.push(pre);
        }
        Ok((x, GeneratorCache { fc_cache, v_pre, stage_caches, stage_pre }))
    }

    /// Returns (∂loss/∂z, gradient twin) for the upstream pattern gradient.
    pub fn backward(&self, cache: &GeneratorCache<S>, gw: &Array3<S>) -> (Array1<S>, Self) {
        let mut grad = self.zeros_like();
        let last = self.ups.len() - 1;
        let mut g = Array3::zeros((0, 0, 0));
        for i in (0..self.ups.len()).rev() {
            let upstream = if i == last { gw } else { &g };
            let pre = &cache.stage_pre[i];
            let g_pre = if i == last {
                let scale = sc::<S>(OUTPUT_SCALE);
                let mut gp = pre.mapv(|v| {
                    let t = v.tanh();
                    (S::one() - t * t) * scale
                });
                gp.zip_mut_with(upstream, |d, u| *d *= *u);
                gp
            } else {
                Activation::Relu.backward(pre, upstream)
            };
            let (gx, g_up) = self.ups[i].backward(&cache.stage_caches[i], &g_pre);
            grad.ups[i] = g_up;
            g = gx;
        }
        let g_v = g
            .into_shape_with_order(stage_width(0) * GEN_BASE * GEN_BASE)
            .expect("seed volume is contiguous");
        let g_v_pre = Activation::Relu.backward(&cache.v_pre, &g_v);
        let (gz, g_fc) = self.fc.backward(&cache.fc_cache, &g_v_pre);
        grad.fc = g_fc;
        (gz, grad)
    }
}

impl<S: Scalar> ParamSet<S> for GeneratorModel<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        let mut v = self.fc.param_slices();
        for up in &self.ups {
            v.extend(up.param_slices());
        }
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut v = self.fc.param_slices_mut();
        for up in &mut self.ups {
            v.extend(up.param_slices_mut());
        }
        v
    }
}

/// Signed additive pattern with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkPattern<S: Scalar> {
    /// H×W×C, signed (not a valid image on its own).
    pub values: Array3<S>,
    pub generator_version: String,
    pub latent_seed: u64,
}

/// Run the generator on a latent code; deterministic given (g, z).
pub fn generate_watermark<S: Scalar>(
    g: &GeneratorModel<S>,
    z: &LatentCode<S>,
) -> Result<WatermarkPattern<S>> {
    let (chw, _) = g.forward(&z.values)?;
    let values = chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned();
    debug_assert!(values.iter().all(|v| v.is_finite()));
    Ok(WatermarkPattern {
        values,
        generator_version: g.version.clone(),
        latent_seed: z.seed,
    })
}

/// x ⊕ w: elementwise addition clamped back into [0,1].
pub fn apply_watermark<S: Scalar>(
    x: &ImageTensor<S>,
    w: &WatermarkPattern<S>,
) -> Result<ImageTensor<S>> {
    if x.pixels().dim() != w.values.dim() {
        return Err(Error::dimension(format!(
            "image {:?} and watermark {:?} shapes differ",
            x.pixels().dim(),
            w.values.dim()
        )));
    }
    ImageTensor::from_unclamped(x.pixels() + &w.values)
}

/// Watermark every image with its own pattern. Latents are keyed by image
/// index off `seed`, so an image receives the same pattern no matter which
/// subset of the collection is being protected.
pub fn protect_images<S: Scalar>(
    g: &GeneratorModel<S>,
    images: &[ImageTensor<S>],
    seed: u64,
) -> Result<Vec<ImageTensor<S>>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let z = sample_latent(
                crate::seeds::derive_n(seed, "latent", i as u64),
                g.config.latent_dim,
            );
            apply_watermark(img, &generate_watermark(g, &z)?)
        })
        .collect()
}

/// Training-path ⊕ on channel-first arrays: returns the watermarked image
/// and the clamp mask (1 where the sum stayed inside (0,1), i.e. where
/// gradients flow back into the watermark).
pub fn apply_watermark_chw<S: Scalar>(x: &Array3<S>, w: &Array3<S>) -> (Array3<S>, Array3<S>) {
    assert_eq!(x.dim(), w.dim(), "image and watermark shapes differ");
    let mut out = x + w;
    let mut mask = Array3::zeros(x.dim());
    ndarray::Zip::from(&mut out).and(&mut mask).for_each(|v, m| {
        if *v <= S::zero() {
            *v = S::zero();
        } else if *v >= S::one() {
            *v = S::one();
        } else {
            *m = S::one();
        }
    });
    (out, mask)
}

/// Hinge on the perceptual budget: max(d − p, 0).
pub fn visibility_hinge<S: Scalar>(distance: S, p: S) -> S {
    (distance - p).max(S::zero())
}

/// Invisibility loss: perceptual distance over budget p, hinged at zero.
pub fn generator_loss<S: Scalar>(
    x: &ImageTensor<S>,
    x_w: &ImageTensor<S>,
    p: S,
    extractor: &FeatureExtractor<S>,
) -> Result<S> {
    debug_assert!(p >= S::zero(), "perceptual budget must be nonnegative");
    Ok(visibility_hinge(metrics::perceptual_distance(x, x_w, extractor)?, p))
}

/// Binary decision over watermark presence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    NonWatermarked,
    Watermarked,
}

impl Label {
    /// BCE target: 0 for clean, 1 for watermarked.
    pub fn target<S: Scalar>(self) -> S {
        match self {
            Label::NonWatermarked => S::zero(),
            Label::Watermarked => S::one(),
        }
    }
}

/// Binary cross-entropy with ε-clipped probability.
pub fn detector_loss<S: Scalar>(y: Label, y_hat: S) -> S {
    let eps = sc::<S>(BCE_EPSILON);
    let p = y_hat.max(eps).min(S::one() - eps);
    match y {
        Label::Watermarked => -p.ln(),
        Label::NonWatermarked => -(S::one() - p).ln(),
    }
}

/// d(BCE∘sigmoid)/d(logit) = ŷ − y; the clipped loss value shares this
/// gradient everywhere the clip is inactive, and the sign everywhere.
pub fn detector_loss_logit_grad<S: Scalar>(y: Label, y_hat: S) -> S {
    y_hat - y.target::<S>()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub resolution: usize,
    pub channels: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { resolution: 64, channels: 3 }
    }
}

impl DetectorConfig {
    fn validate(&self) -> Result<()> {
        if self.resolution < 16 || self.resolution % 16 != 0 {
            return Err(Error::config(format!(
                "detector resolution must be a multiple of 16, got {}",
                self.resolution
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        Ok(())
    }
}

/// Widths after each downsampling convolution.
const DET_WIDTHS: [usize; 4] = [12, 16, 24, 32];

/// Identity-skip pair of 3×3 convolutions: y = relu(x + conv_b(relu(conv_a(x)))).
#[derive(Debug, Clone, PartialEq)]
struct ResBlock<S: Scalar> {
    a: Conv2d<S>,
    b: Conv2d<S>,
}

struct ResBlockCache<S: Scalar> {
    ca: ConvCache<S>,
    pre_h: Array3<S>,
    cb: ConvCache<S>,
    sum: Array3<S>,
}

impl<S: Scalar> ResBlock<S> {
    fn new<R: rand::Rng>(rng: &mut R, c: usize) -> Self {
        Self { a: Conv2d::new(rng, c, c, 3, 1, 1), b: Conv2d::new(rng, c, c, 3, 1, 1) }
    }

    fn zeros_like(&self) -> Self {
        Self { a: self.a.zeros_like(), b: self.b.zeros_like() }
    }

    fn forward(&self, x: &Array3<S>) -> (Array3<S>, ResBlockCache<S>) {
        let (pre_h, ca) = self.a.forward(x);
        let h = Activation::Relu.forward(&pre_h);
        let (pre_r, cb) = self.b.forward(&h);
        let sum = x + &pre_r;
        let y = Activation::Relu.forward(&sum);
        (y, ResBlockCache { ca, pre_h, cb, sum })
    }

    fn backward(&self, cache: &ResBlockCache<S>, gy: &Array3<S>) -> (Array3<S>, Self) {
        let g_sum = Activation::Relu.backward(&cache.sum, gy);
        let (gh, gb) = self.b.backward(&cache.cb, &g_sum);
        let g_pre_h = Activation::Relu.backward(&cache.pre_h, &gh);
        let (gx_a, ga) = self.a.backward(&cache.ca, &g_pre_h);
        (gx_a + &g_sum, Self { a: ga, b: gb })
    }
}

/// Convolutional residual binary classifier: four stride-2 convolutions with
/// identity-skip blocks after the last three, global average pooling, and a
/// one-logit dense head. [`detect`] applies the sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel<S: Scalar> {
    pub config: DetectorConfig,
    pub version: String,
    pub fine_tuned_for: Option<String>,
    downs: Vec<Conv2d<S>>,
    blocks: Vec<ResBlock<S>>,
    head: Dense<S>,
}

pub struct DetectorCache<S: Scalar> {
    down_caches: Vec<ConvCache<S>>,
    down_pre: Vec<Array3<S>>,
    block_caches: Vec<ResBlockCache<S>>,
    pooled_dim: (usize, usize, usize),
    head_cache: DenseCache<S>,
}

impl<S: Scalar> DetectorModel<S> {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng(seeds::derive(seed, "detector-init"));
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        let mut in_c = config.channels;
        for (i, &w) in DET_WIDTHS.iter().enumerate() {
            downs.push(Conv2d::new(&mut rng, in_c, w, 3, 2, 1));
            if i > 0 {
                blocks.push(ResBlock::new(&mut rng, w));
            }
            in_c = w;
        }
        let head = Dense::new(&mut rng, in_c, 1);
        Ok(Self {
            config,
            version: DETECTOR_VERSION.to_string(),
            fine_tuned_for: None,
            downs,
            blocks,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            version: self.version.clone(),
            fine_tuned_for: self.fine_tuned_for.clone(),
            downs: self.downs.iter().map(|c| c.zeros_like()).collect(),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            head: self.head.zeros_like(),
        }
    }

    fn check_chw(&self, x: &Array3<S>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.config.channels || h != self.config.resolution || w != self.config.resolution {
            return Err(Error::dimension(format!(
                "input is ({c},{h},{w}), detector expects ({},{},{})",
                self.config.channels, self.config.resolution, self.config.resolution
            )));
        }
        Ok(())
    }

    /// Raw logit plus everything backward needs.
    pub fn forward_logit(&self, x: &Array3<S>) -> Result<(S, DetectorCache<S>)> {
        self.check_chw(x)?;
        let mut down_caches = Vec::with_capacity(self.downs.len());
        let mut down_pre = Vec::with_capacity(self.downs.len());
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for (i, conv) in self.downs.iter().enumerate() {
            let (pre, cache) = conv.forward(&cur);
            cur = Activation::Relu.forward(&pre);
            down_caches.push(cache);
            down_pre.push(pre);
            if i > 0 {
                let (y, bc) = self.blocks[i - 1].forward(&cur);
                cur = y;
                block_caches.push(bc);
            }
        }
        let (c, h, w) = cur.dim();
        let inv = S::one() / sc((h * w) as f64);
        let mut pooled = Array1::zeros(c);
        for ch in 0..c {
            let mut acc = S::zero();
            for i in 0..h {
                for j in 0..w {
                    acc += cur[[ch, i, j]];
                }
            }
            pooled[ch] = acc * inv;
        }
        let (out, head_cache) = self.head.forward(&pooled);
        Ok((out[0], DetectorCache { down_caches, down_pre, block_caches, pooled_dim: (c, h, w), head_cache }))
    }

    /// Input gradient and gradient twin for an upstream d(loss)/d(logit).
    pub fn backward_logit(&self, cache: &DetectorCache<S>, g_logit: S) -> (Array3<S>, Self) {
        let mut grad = self.zeros_like();
        let (g_pooled, g_head) = self
            .head
            .backward(&cache.head_cache, &Array1::from_vec(vec![g_logit]));
        grad.head = g_head;
        let (c, h, w) = cache.pooled_dim;
        let inv = S::one() / sc((h * w) as f64);
        let mut g = Array3::zeros((c, h, w));
        for ch in 0..c {
            let v = g_pooled[ch] * inv;
            for i in 0..h {
                for j in 0..w {
                    g[[ch, i, j]] = v;
                }
            }
        }
        for i in (0..self.downs.len()).rev() {
            if i > 0 {
                let (gx, gb) = self.blocks[i - 1].backward(&cache.block_caches[i - 1], &g);
                grad.blocks[i - 1] = gb;
                g = gx;
            }
            let g_pre = Activation::Relu.backward(&cache.down_pre[i], &g);
            let (gx, gc) = self.downs[i].backward(&cache.down_caches[i], &g_pre);
            grad.downs[i] = gc;
            g = gx;
        }
        (g, grad)
    }
}

impl<S: Scalar> ParamSet<S> for DetectorModel<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        let mut v = Vec::new();
        for d in &self.downs {
            v.extend(d.param_slices());
        }
        for b in &self.blocks {
            v.extend(b.a.param_slices());
            v.extend(b.b.param_slices());
        }
        v.extend(self.head.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut v = Vec::new();
        for d in &mut self.downs {
            v.extend(d.param_slices_mut());
        }
        for b in &mut self.blocks {
            v.extend(b.a.param_slices_mut());
            v.extend(b.b.param_slices_mut());
        }
        v.extend(self.head.param_slices_mut());
        v
    }
}

/// Detection probability in [0,1]; deterministic given (d, x).
pub fn detect<S: Scalar>(d: &DetectorModel<S>, x: &ImageTensor<S>) -> Result<S> {
    let (logit, _) = d.forward_logit(&x.to_chw())?;
    Ok(Activation::Sigmoid.apply(logit))
}

/// Decision rule on a probability: watermarked iff ŷ > threshold, so ties go
/// to non-watermarked (conservative toward false accusations).
pub fn classify_prob<S: Scalar>(y_hat: S, threshold: S) -> Label {
    assert!(
        threshold > S::zero() && threshold < S::one(),
        "threshold must lie strictly inside (0,1)"
    );
    if y_hat > threshold {
        Label::Watermarked
    } else {
        Label::NonWatermarked
    }
}

pub fn classify<S: Scalar>(d: &DetectorModel<S>, x: &ImageTensor<S>, threshold: S) -> Result<Label> {
    Ok(classify_prob(detect(d, x)?, threshold))
}
