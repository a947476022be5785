//! Image-space countermeasures: forged watermarks and removal transforms.
//!
//! Both attacks are deterministic given their seed and never emit pixels
//! outside [0,1]. The JPEG transform is pinned to baseline encoding
//! (non-progressive, 4:2:0 chroma subsampling) so the round trip is bit-exact
//! across platforms.

use image::ImageFormat;
use jpeg_encoder::{ColorType, Encoder, SamplingFactor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::seeds;
use crate::{sc, Scalar};

/// Forged watermark: Gaussian noise salted into non-watermarked images in the
/// hope that the detector mistakes it for the real pattern.
pub fn forgery_attack<S: Scalar>(
    images: &[ImageTensor<S>],
    sigma: f64,
    seed: u64,
) -> Result<Vec<ImageTensor<S>>> {
    gaussian_perturb(images, sigma, seeds::derive(seed, "forgery"))
}

/// Removal transforms an attacker may run over watermarked images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalKind {
    /// Additive Gaussian noise with the given standard deviation.
    Gaussian,
    /// Baseline JPEG re-encode at the given integer quality.
    Jpeg,
}

impl std::fmt::Display for RemovalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RemovalKind::Gaussian => "gaussian",
            RemovalKind::Jpeg => "jpeg",
        })
    }
}

/// Apply a watermark-removal transform to every image.
///
/// `param` is the noise standard deviation for [`RemovalKind::Gaussian`] and
/// the integer quality in [1,100] for [`RemovalKind::Jpeg`]. The seed only
/// matters for the noise variant; the JPEG round trip is deterministic on its
/// own.
pub fn removal_attack<S: Scalar>(
    images: &[ImageTensor<S>],
    kind: RemovalKind,
    param: f64,
    seed: u64,
) -> Result<Vec<ImageTensor<S>>> {
    match kind {
        RemovalKind::Gaussian => gaussian_perturb(images, param, seeds::derive(seed, "removal")),
        RemovalKind::Jpeg => {
            let quality = jpeg_quality(param)?;
            images.iter().map(|im| jpeg_roundtrip(im, quality)).collect()
        }
    }
}

fn gaussian_perturb<S: Scalar>(
    images: &[ImageTensor<S>],
    sigma: f64,
    root: u64,
) -> Result<Vec<ImageTensor<S>>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::config(format!(
            "noise standard deviation must be finite and non-negative, got {sigma}"
        )));
    }
    images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let mut rng = seeds::rng(seeds::derive_n(root, "image", i as u64));
            // Adding sigma·n with sigma = 0 keeps every pixel bit-identical.
            let noisy = im.pixels().mapv(|v| {
                let n: f64 = rng.sample(StandardNormal);
                v + sc::<S>(sigma * n)
            });
            ImageTensor::from_unclamped(noisy)
        })
        .collect()
}

fn jpeg_quality(param: f64) -> Result<u8> {
    if !param.is_finite() || param.fract() != 0.0 || !(1.0..=100.0).contains(&param) {
        return Err(Error::config(format!(
            "jpeg quality must be an integer in [1,100], got {param}"
        )));
    }
    Ok(param as u8)
}

/// Encode to baseline JPEG at the given quality, then decode. Grayscale
/// images stay single-channel.
pub fn jpeg_roundtrip<S: Scalar>(img: &ImageTensor<S>, quality: u8) -> Result<ImageTensor<S>> {
    let (w, h) = (img.width(), img.height());
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::dimension(format!("image {w}x{h} too large for JPEG")));
    }
    let color = if img.channels() == 1 { ColorType::Luma } else { ColorType::Rgb };
    let mut buf = Vec::new();
    let mut enc = Encoder::new(&mut buf, quality);
    enc.set_sampling_factor(SamplingFactor::F_2_2);
    enc.set_progressive(false);
    enc.encode(&img.to_rgb8(), w as u16, h as u16, color)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)?;
    let out = ImageTensor::from_dynamic(&decoded);
    if !out.same_shape(img) {
        return Err(Error::dimension(format!(
            "jpeg round trip changed shape: {:?} vs {:?}",
            out.pixels().dim(),
            img.pixels().dim()
        )));
    }
    Ok(out)
}
