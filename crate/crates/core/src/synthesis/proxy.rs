//! The two desk-scale synthesizer families.
//!
//! Both families obey one rule everywhere: random draws come from seed
//! chains that depend on (seed, step, index) but never on pixel content, so
//! models trained on identical image lists match bitwise and every
//! difference between a clean and a watermarked model is caused by the
//! training images alone.

use ndarray::{Array3, Axis};
use rand::Rng;
use rand_distr::Distribution;

use super::{denoise_loss, NoiseSchedule, SubjectSynthesizer};
use crate::image::ImageTensor;
use crate::nn::{Activation, Adam, Conv2d, ConvCache, ConvTCache, ConvTranspose2d, ParamSet};
use crate::{sc, seeds, Error, Result, Scalar};

const HIDDEN: usize = 16;
const BATCH: usize = 8;
const LR: f64 = 2e-3;

fn standard_normal<S: Scalar>(shape: (usize, usize, usize), rng: &mut impl Rng) -> Array3<S> {
    Array3::from_shape_simple_fn(shape, || {
        sc::<S>(rand_distr::StandardNormal.sample(rng))
    })
}

/// Deterministic prompt-keyed content transform: a channel remix, a circular
/// shift, and a centered zoom, all drawn from the prompt id alone. This is
/// what makes different prompts yield systematically different content.
fn prompt_transform<S: Scalar>(img: &ImageTensor<S>, prompt_id: u32) -> Result<ImageTensor<S>> {
    let root = seeds::derive(0x70726d70, "prompt-transform-v1");
    let mut rng = seeds::rng(seeds::derive_n(root, "prompt", u64::from(prompt_id)));
    let res = img.resolution();
    let c = img.channels();

    let gains: Vec<f64> = (0..c).map(|_| rng.random_range(0.85..1.15)).collect();
    let biases: Vec<f64> = (0..c).map(|_| rng.random_range(-0.06..0.06)).collect();
    let mix: f64 = rng.random_range(0.0..0.25);
    let max_shift = (res / 6) as i64;
    let dy = rng.random_range(-max_shift..=max_shift);
    let dx = rng.random_range(-max_shift..=max_shift);
    let crop_frac: f64 = rng.random_range(0.78..1.0);

    let src = img.pixels();
    let mut remixed = Array3::zeros(src.dim());
    for i in 0..res {
        for j in 0..res {
            let si = (i as i64 + dy).rem_euclid(res as i64) as usize;
            let sj = (j as i64 + dx).rem_euclid(res as i64) as usize;
            for ch in 0..c {
                let own = src[[si, sj, ch]].to_f64().expect("pixel converts");
                let next = src[[si, sj, (ch + 1) % c]].to_f64().expect("pixel converts");
                let v = gains[ch] * ((1.0 - mix) * own + mix * next) + biases[ch];
                remixed[[i, j, ch]] = sc::<S>(v.clamp(0.0, 1.0));
            }
        }
    }

    let k = ((res as f64 * crop_frac).round() as usize).clamp(8, res);
    let y0 = rng.random_range(0..=(res - k));
    let x0 = rng.random_range(0..=(res - k));
    let cropped = remixed
        .slice(ndarray::s![y0..y0 + k, x0..x0 + k, ..])
        .to_owned();
    ImageTensor::new(cropped)?.resize(res)
}

// ---------------------------------------------------------------------------
// Toy DDPM

/// Three-layer conv denoiser; input is the noisy image plus one plane
/// holding √ᾱ_t as timestep conditioning.
#[derive(Debug, Clone)]
struct DenoiserNet<S: Scalar> {
    c1: Conv2d<S>,
    c2: Conv2d<S>,
    c3: Conv2d<S>,
}

struct DenoiserCache<S: Scalar> {
    k1: ConvCache<S>,
    p1: Array3<S>,
    k2: ConvCache<S>,
    p2: Array3<S>,
    k3: ConvCache<S>,
}

impl<S: Scalar> DenoiserNet<S> {
    fn new(rng: &mut impl Rng, channels: usize) -> Self {
        Self {
            c1: Conv2d::new(rng, channels + 1, HIDDEN, 3, 1, 1),
            c2: Conv2d::new(rng, HIDDEN, HIDDEN, 3, 1, 1),
            c3: Conv2d::new(rng, HIDDEN, channels, 3, 1, 1),
        }
    }

    fn zeros_like(&self) -> Self {
        Self { c1: self.c1.zeros_like(), c2: self.c2.zeros_like(), c3: self.c3.zeros_like() }
    }

    fn forward(&self, x: &Array3<S>) -> (Array3<S>, DenoiserCache<S>) {
        let (p1, k1) = self.c1.forward(x);
        let a1 = Activation::Relu.forward(&p1);
        let (p2, k2) = self.c2.forward(&a1);
        let a2 = Activation::Relu.forward(&p2);
        let (y, k3) = self.c3.forward(&a2);
        (y, DenoiserCache { k1, p1, k2, p2, k3 })
    }

    fn backward(&self, cache: &DenoiserCache<S>, gy: &Array3<S>) -> Self {
        let mut grad = self.zeros_like();
        let (g2, gc3) = self.c3.backward(&cache.k3, gy);
        grad.c3 = gc3;
        let g2 = Activation::Relu.backward(&cache.p2, &g2);
        let (g1, gc2) = self.c2.backward(&cache.k2, &g2);
        grad.c2 = gc2;
        let g1 = Activation::Relu.backward(&cache.p1, &g1);
        let (_, gc1) = self.c1.backward(&cache.k1, &g1);
        grad.c1 = gc1;
        grad
    }
}

impl<S: Scalar> ParamSet<S> for DenoiserNet<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        let mut v = self.c1.param_slices();
        v.extend(self.c2.param_slices());
        v.extend(self.c3.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut v = self.c1.param_slices_mut();
        v.extend(self.c2.param_slices_mut());
        v.extend(self.c3.param_slices_mut());
        v
    }
}

fn with_condition<S: Scalar>(x: &Array3<S>, value: S) -> Array3<S> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c + 1, h, w));
    out.slice_mut(ndarray::s![..c, .., ..]).assign(x);
    out.index_axis_mut(Axis(0), c).fill(value);
    out
}

/// Toy DDPM trained per subject. Works in [-1,1]; the forward process uses
/// the closed form x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε, and sampling runs a
/// deterministic (η = 0) coarse reverse pass over a strided subsequence of
/// the schedule.
#[derive(Debug, Clone)]
pub struct DiffusionProxy<S: Scalar> {
    resolution: usize,
    channels: usize,
    schedule: NoiseSchedule,
    sampling_steps: usize,
    net: Option<DenoiserNet<S>>,
}

impl<S: Scalar> DiffusionProxy<S> {
    pub fn new(resolution: usize, channels: usize, schedule: NoiseSchedule) -> Result<Self> {
        if resolution < 8 {
            return Err(Error::config(format!("proxy resolution too small: {resolution}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::config(format!("proxy channels must be 1 or 3, got {channels}")));
        }
        Ok(Self { resolution, channels, schedule, sampling_steps: 20, net: None })
    }

    /// Override the number of reverse steps used when sampling.
    pub fn with_sampling_steps(mut self, steps: usize) -> Self {
        self.sampling_steps = steps.max(1);
        self
    }

    pub fn is_trained(&self) -> bool {
        self.net.is_some()
    }

    fn check_training_images(&self, images: &[ImageTensor<S>]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::config("cannot train a synthesizer on an empty image set"));
        }
        for img in images {
            if img.resolution() != self.resolution || img.channels() != self.channels {
                return Err(Error::dimension(format!(
                    "training image is {}x{} c{}, proxy expects {}x{} c{}",
                    img.resolution(),
                    img.resolution(),
                    img.channels(),
                    self.resolution,
                    self.resolution,
                    self.channels
                )));
            }
        }
        Ok(())
    }
}

impl<S: Scalar> SubjectSynthesizer<S> for DiffusionProxy<S> {
    fn train(&mut self, images: &[ImageTensor<S>], steps: usize, seed: u64) -> Result<()> {
        self.check_training_images(images)?;
        let x0: Vec<Array3<S>> = images
            .iter()
            .map(|im| im.to_chw().mapv(|v| v + v - S::one()))
            .collect();
        let mut net =
            DenoiserNet::new(&mut seeds::rng(seeds::derive(seed, "ddpm-init")), self.channels);
        let mut adam = Adam::new(LR);
        let t_len = self.schedule.len();
        for step in 0..steps {
            let mut rng = seeds::rng(seeds::derive_n(seed, "ddpm-step", step as u64));
            let mut accum = net.zeros_like();
            let mut loss_sum = S::zero();
            for _ in 0..BATCH {
                let i = rng.random_range(0..x0.len());
                let t = rng.random_range(0..t_len);
                let ab = self.schedule.alpha_bar(t);
                let eps = standard_normal::<S>(x0[i].dim(), &mut rng);
                let x_t = &x0[i] * sc::<S>(ab.sqrt()) + &eps * sc::<S>((1.0 - ab).sqrt());
                let inp = with_condition(&x_t, sc(ab.sqrt()));
                let (eps_hat, cache) = net.forward(&inp);
                loss_sum += denoise_loss(&eps, &eps_hat)?;
                let scale = sc::<S>(2.0 / (eps.len() * BATCH) as f64);
                let g = (&eps_hat - &eps) * scale;
                let twin = net.backward(&cache, &g);
                accum.add_scaled(&twin, S::one());
            }
            if !loss_sum.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite denoiser loss at proxy step {step}"
                )));
            }
            adam.step(&mut net, &accum);
        }
        self.net = Some(net);
        Ok(())
    }

    fn synthesize(&self, prompt_id: u32, n: usize, seed: u64) -> Result<Vec<ImageTensor<S>>> {
        let net = self
            .net
            .as_ref()
            .ok_or_else(|| Error::validation("synthesizer has not been trained"))?;
        let t_len = self.schedule.len();
        let k = self.sampling_steps.min(t_len);
        // Evenly strided timesteps ending exactly at the last schedule entry.
        let taus: Vec<usize> = (0..k).map(|j| (j + 1) * t_len / k - 1).collect();
        let base = seeds::derive_n(seeds::derive(seed, "ddim"), "prompt", u64::from(prompt_id));
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = seeds::rng(seeds::derive_n(base, "image", i as u64));
            let shape = (self.channels, self.resolution, self.resolution);
            let mut x = standard_normal::<S>(shape, &mut rng);
            for j in (0..k).rev() {
                let ab = self.schedule.alpha_bar(taus[j]);
                let inp = with_condition(&x, sc(ab.sqrt()));
                let (eps_hat, _) = net.forward(&inp);
                let mut x0 =
                    (&x - &(&eps_hat * sc::<S>((1.0 - ab).sqrt()))) * sc::<S>(1.0 / ab.sqrt());
                x0.mapv_inplace(|v| v.max(-S::one()).min(S::one()));
                if j > 0 {
                    let ab_prev = self.schedule.alpha_bar(taus[j - 1]);
                    x = &x0 * sc::<S>(ab_prev.sqrt()) + &eps_hat * sc::<S>((1.0 - ab_prev).sqrt());
                } else {
                    x = x0;
                }
            }
            let img = ImageTensor::from_chw(x.mapv(|v| (v + S::one()) * sc(0.5)))?;
            out.push(prompt_transform(&img, prompt_id)?);
        }
        Ok(out)
    }

    fn id(&self) -> String {
        format!("toy-ddpm-v1-r{}", self.resolution)
    }

    fn resolution(&self) -> usize {
        self.resolution
    }
}

// ---------------------------------------------------------------------------
// Autoencoder family

#[derive(Debug, Clone)]
struct AeNet<S: Scalar> {
    e1: Conv2d<S>,
    e2: Conv2d<S>,
    d1: ConvTranspose2d<S>,
    d2: ConvTranspose2d<S>,
}

struct AeCache<S: Scalar> {
    k1: ConvCache<S>,
    p1: Array3<S>,
    k2: ConvCache<S>,
    p2: Array3<S>,
    k3: ConvTCache<S>,
    p3: Array3<S>,
    k4: ConvTCache<S>,
}

const AE_MID: usize = 12;
const AE_LATENT: usize = 16;

impl<S: Scalar> AeNet<S> {
    fn new(rng: &mut impl Rng, channels: usize) -> Self {
        Self {
            e1: Conv2d::new(rng, channels, AE_MID, 3, 2, 1),
            e2: Conv2d::new(rng, AE_MID, AE_LATENT, 3, 2, 1),
            d1: ConvTranspose2d::new(rng, AE_LATENT, AE_MID, 4, 2, 1),
            d2: ConvTranspose2d::new(rng, AE_MID, channels, 4, 2, 1),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            e1: self.e1.zeros_like(),
            e2: self.e2.zeros_like(),
            d1: self.d1.zeros_like(),
            d2: self.d2.zeros_like(),
        }
    }

    fn encode(&self, x: &Array3<S>) -> Array3<S> {
        let (p1, _) = self.e1.forward(x);
        let a1 = Activation::Relu.forward(&p1);
        let (p2, _) = self.e2.forward(&a1);
        Activation::Relu.forward(&p2)
    }

    fn decode(&self, z: &Array3<S>) -> Array3<S> {
        let (p3, _) = self.d1.forward(z);
        let a3 = Activation::Relu.forward(&p3);
        let (y, _) = self.d2.forward(&a3);
        y
    }

    fn forward(&self, x: &Array3<S>) -> (Array3<S>, AeCache<S>) {
        let (p1, k1) = self.e1.forward(x);
        let a1 = Activation::Relu.forward(&p1);
        let (p2, k2) = self.e2.forward(&a1);
        let a2 = Activation::Relu.forward(&p2);
        let (p3, k3) = self.d1.forward(&a2);
        let a3 = Activation::Relu.forward(&p3);
        let (y, k4) = self.d2.forward(&a3);
        (y, AeCache { k1, p1, k2, p2, k3, p3, k4 })
    }

    fn backward(&self, cache: &AeCache<S>, gy: &Array3<S>) -> Self {
        let mut grad = self.zeros_like();
        let (g3, gd2) = self.d2.backward(&cache.k4, gy);
        grad.d2 = gd2;
        let g3 = Activation::Relu.backward(&cache.p3, &g3);
        let (g2, gd1) = self.d1.backward(&cache.k3, &g3);
        grad.d1 = gd1;
        let g2 = Activation::Relu.backward(&cache.p2, &g2);
        let (g1, ge2) = self.e2.backward(&cache.k2, &g2);
        grad.e2 = ge2;
        let g1 = Activation::Relu.backward(&cache.p1, &g1);
        let (_, ge1) = self.e1.backward(&cache.k1, &g1);
        grad.e1 = ge1;
        grad
    }
}

impl<S: Scalar> ParamSet<S> for AeNet<S> {
    fn param_slices(&self) -> Vec<&[S]> {
        let mut v = self.e1.param_slices();
        v.extend(self.e2.param_slices());
        v.extend(self.d1.param_slices());
        v.extend(self.d2.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut v = self.e1.param_slices_mut();
        v.extend(self.e2.param_slices_mut());
        v.extend(self.d1.param_slices_mut());
        v.extend(self.d2.param_slices_mut());
        v
    }
}

/// Alternate synthesizer family: a small autoencoder whose samples are
/// decoded blends of two training latents plus seeded latent jitter. Serves
/// as the "different model architecture" side of the unknown-model
/// scenarios.
#[derive(Debug, Clone)]
pub struct AutoencoderProxy<S: Scalar> {
    resolution: usize,
    channels: usize,
    jitter: f64,
    net: Option<AeNet<S>>,
    latents: Vec<Array3<S>>,
}

impl<S: Scalar> AutoencoderProxy<S> {
    pub fn new(resolution: usize, channels: usize) -> Result<Self> {
        if resolution < 8 || resolution % 4 != 0 {
            return Err(Error::config(format!(
                "autoencoder resolution must be a multiple of 4 and at least 8, got {resolution}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::config(format!("proxy channels must be 1 or 3, got {channels}")));
        }
        Ok(Self { resolution, channels, jitter: 0.25, net: None, latents: Vec::new() })
    }

    pub fn is_trained(&self) -> bool {
        self.net.is_some()
    }
}

impl<S: Scalar> SubjectSynthesizer<S> for AutoencoderProxy<S> {
    fn train(&mut self, images: &[ImageTensor<S>], steps: usize, seed: u64) -> Result<()> {
        if images.is_empty() {
            return Err(Error::config("cannot train a synthesizer on an empty image set"));
        }
        for img in images {
            if img.resolution() != self.resolution || img.channels() != self.channels {
                return Err(Error::dimension(format!(
                    "training image is {}x{}, proxy expects {}x{}",
                    img.resolution(),
                    img.resolution(),
                    self.resolution,
                    self.resolution
                )));
            }
        }
        let xs: Vec<Array3<S>> = images.iter().map(|im| im.to_chw()).collect();
        let mut net = AeNet::new(&mut seeds::rng(seeds::derive(seed, "ae-init")), self.channels);
        let mut adam = Adam::new(LR);
        for step in 0..steps {
            let mut rng = seeds::rng(seeds::derive_n(seed, "ae-step", step as u64));
            let mut accum = net.zeros_like();
            let mut loss_sum = S::zero();
            for _ in 0..BATCH {
                let i = rng.random_range(0..xs.len());
                let (recon, cache) = net.forward(&xs[i]);
                loss_sum += denoise_loss(&xs[i], &recon)?;
                let scale = sc::<S>(2.0 / (recon.len() * BATCH) as f64);
                let g = (&recon - &xs[i]) * scale;
                accum.add_scaled(&net.backward(&cache, &g), S::one());
            }
            if !loss_sum.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite reconstruction loss at step {step}"
                )));
            }
            adam.step(&mut net, &accum);
        }
        self.latents = xs.iter().map(|x| net.encode(x)).collect();
        self.net = Some(net);
        Ok(())
    }

    fn synthesize(&self, prompt_id: u32, n: usize, seed: u64) -> Result<Vec<ImageTensor<S>>> {
        let net = self
            .net
            .as_ref()
            .ok_or_else(|| Error::validation("synthesizer has not been trained"))?;
        let base = seeds::derive_n(seeds::derive(seed, "ae-sample"), "prompt", u64::from(prompt_id));
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = seeds::rng(seeds::derive_n(base, "image", i as u64));
            let a = rng.random_range(0..self.latents.len());
            let b = rng.random_range(0..self.latents.len());
            let lambda: f64 = rng.random_range(0.2..0.8);
            let nu = standard_normal::<S>(self.latents[a].dim(), &mut rng);
            let z = &self.latents[a] * sc::<S>(lambda)
                + &self.latents[b] * sc::<S>(1.0 - lambda)
                + &nu * sc::<S>(self.jitter);
            let img = ImageTensor::from_chw(net.decode(&z))?;
            out.push(prompt_transform(&img, prompt_id)?);
        }
        Ok(out)
    }

    fn id(&self) -> String {
        format!("toy-ae-v1-r{}", self.resolution)
    }

    fn resolution(&self) -> usize {
        self.resolution
    }
}
