//! The universal image representation: a channel-last float tensor in [0,1].

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array3, Zip};

use crate::{sc, Error, Result, Scalar};

/// H×W×C pixel array with all values in [0,1].
///
/// Channels are 1 (grayscale) or 3 (RGB); images are square. The pixel array
/// is channel-last; [`to_chw`](ImageTensor::to_chw) produces the channel-first
/// layout the network code wants.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<S: Scalar> {
    pixels: Array3<S>,
}

impl<S: Scalar> ImageTensor<S> {
    /// Wrap a pixel array, enforcing the type invariants.
    pub fn new(pixels: Array3<S>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::dimension("image must be non-empty"));
        }
        if h != w {
            return Err(Error::dimension(format!("image must be square, got {h}x{w}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::dimension(format!("channels must be 1 or 3, got {c}")));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < S::zero() || *v > S::one()) {
            return Err(Error::validation("pixel values must lie in [0,1]"));
        }
        Ok(Self { pixels })
    }

    /// Wrap an arbitrary array, clamping every value into [0,1] first.
    pub fn from_unclamped(mut pixels: Array3<S>) -> Result<Self> {
        pixels.mapv_inplace(|v| {
            if v.is_nan() {
                S::zero()
            } else {
                v.max(S::zero()).min(S::one())
            }
        });
        Self::new(pixels)
    }

    /// Constant-valued square image.
    pub fn filled(resolution: usize, channels: usize, value: S) -> Result<Self> {
        Self::new(Array3::from_elem((resolution, resolution, channels), value))
    }

    pub fn zeros(resolution: usize, channels: usize) -> Result<Self> {
        Self::filled(resolution, channels, S::zero())
    }

    pub fn pixels(&self) -> &Array3<S> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<S> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    /// Square edge length.
    pub fn resolution(&self) -> usize {
        self.height()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.pixels.dim() == other.pixels.dim()
    }

    /// Channel-first copy (C, H, W) for the network stack.
    pub fn to_chw(&self) -> Array3<S> {
        self.pixels.clone().permuted_axes([2, 0, 1]).as_standard_layout().to_owned()
    }

    /// Rebuild from a channel-first array, clamping into [0,1].
    pub fn from_chw(chw: Array3<S>) -> Result<Self> {
        let hwc = chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned();
        Self::from_unclamped(hwc)
    }

    /// Mean absolute per-pixel difference; requires identical shapes.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<S> {
        if !self.same_shape(other) {
            return Err(Error::dimension("images differ in shape"));
        }
        let mut total = S::zero();
        Zip::from(&self.pixels).and(&other.pixels).for_each(|a, b| {
            total = total + (*a - *b).abs();
        });
        Ok(total / sc(self.pixels.len() as f64))
    }

    /// Resize with area-average (box) resampling.
    ///
    /// Each destination pixel is the overlap-weighted average of the source
    /// pixels it covers, which is stable and aliasing-resistant when
    /// downsampling and degrades to replication blending when upsampling.
    pub fn resize(&self, resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::config("resize target must be positive"));
        }
        let (src, c) = (self.height(), self.channels());
        if src == resolution {
            return Ok(self.clone());
        }
        let weights = box_weights(src, resolution);
        // Separable: rows first, then columns.
        let mut rows = Array3::<S>::zeros((resolution, src, c));
        for (dst_i, segs) in weights.iter().enumerate() {
            for &(src_i, w) in segs {
                let w = sc::<S>(w);
                for j in 0..src {
                    for ch in 0..c {
                        rows[[dst_i, j, ch]] =
                            rows[[dst_i, j, ch]] + self.pixels[[src_i, j, ch]] * w;
                    }
                }
            }
        }
        let mut out = Array3::<S>::zeros((resolution, resolution, c));
        for (dst_j, segs) in weights.iter().enumerate() {
            for &(src_j, w) in segs {
                let w = sc::<S>(w);
                for i in 0..resolution {
                    for ch in 0..c {
                        out[[i, dst_j, ch]] = out[[i, dst_j, ch]] + rows[[i, src_j, ch]] * w;
                    }
                }
            }
        }
        Self::from_unclamped(out)
    }

    /// Decode a PNG (or any supported format) into [0,1] floats.
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::ingestion(path, format!("undecodable image: {e}")))?;
        Ok(Self::from_dynamic(&img))
    }

    /// Convert a decoded image; grayscale sources stay single-channel.
    pub fn from_dynamic(img: &DynamicImage) -> Self {
        match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                let mut px = Array3::zeros((h as usize, w as usize, 1));
                for (x, y, p) in g.enumerate_pixels() {
                    px[[y as usize, x as usize, 0]] = sc::<S>(f64::from(p[0]) / 255.0);
                }
                Self { pixels: px }
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                let mut px = Array3::zeros((h as usize, w as usize, 3));
                for (x, y, p) in rgb.enumerate_pixels() {
                    for ch in 0..3 {
                        px[[y as usize, x as usize, ch]] = sc::<S>(f64::from(p[ch]) / 255.0);
                    }
                }
                Self { pixels: px }
            }
        }
    }

    /// Quantize to 8 bits per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let c = self.channels();
        let mut out = Vec::with_capacity(self.pixels.len());
        for i in 0..self.height() {
            for j in 0..self.width() {
                for ch in 0..c {
                    let v = self.pixels[[i, j, ch]].to_f64().unwrap_or(0.0);
                    out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    /// Write as PNG; 1-channel images become 8-bit grayscale files.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_rgb8();
        let (w, h) = (self.width() as u32, self.height() as u32);
        if self.channels() == 1 {
            let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(w, h, bytes)
                .expect("buffer size matches dimensions");
            buf.save(path)?;
        } else {
            let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w, h, bytes)
                .expect("buffer size matches dimensions");
            buf.save(path)?;
        }
        Ok(())
    }
}

/// Overlap weights of destination cells over source cells for a 1-D box
/// filter, as `weights[dst] = [(src_index, weight), ...]` with weights
/// summing to 1.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let lo = d as f64 * scale;
            let hi = (d + 1) as f64 * scale;
            let mut segs = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let overlap = hi.min((s + 1) as f64) - lo.max(s as f64);
                if overlap > 0.0 {
                    segs.push((s, overlap / scale));
                }
                s += 1;
            }
            segs
        })
        .collect()
}
