//! Subject datasets: procedural desk-scale generation, folder ingestion with
//! checksummed manifests, and prompt management.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::ImageTensor;
use crate::{sc, seeds, Error, Result, Scalar};

/// The two protected-subject domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ArtisticStyle,
    HumanFace,
}

impl Task {
    pub fn slug(self) -> &'static str {
        match self {
            Task::ArtisticStyle => "style",
            Task::HumanFace => "face",
        }
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Folder,
}

/// One subject's clean image set.
#[derive(Debug, Clone)]
pub struct SubjectDataset<S: Scalar> {
    pub subject_id: String,
    pub task: Task,
    pub images: Vec<ImageTensor<S>>,
    pub source: Source,
}

impl<S: Scalar> SubjectDataset<S> {
    pub fn new(
        subject_id: String,
        task: Task,
        images: Vec<ImageTensor<S>>,
        source: Source,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::validation(format!("subject {subject_id} has no images")));
        }
        let first = images[0].pixels().dim();
        if images.iter().any(|im| im.pixels().dim() != first) {
            return Err(Error::validation(format!(
                "subject {subject_id} mixes image dimensions"
            )));
        }
        Ok(Self { subject_id, task, images, source })
    }

    pub fn resolution(&self) -> usize {
        self.images[0].resolution()
    }

    pub fn channels(&self) -> usize {
        self.images[0].channels()
    }
}

pub(crate) fn validate_resolution(resolution: usize) -> Result<()> {
    const SUPPORTED: [usize; 4] = [32, 64, 128, 256];
    if SUPPORTED.contains(&resolution) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "resolution {resolution} unsupported; pick one of {SUPPORTED:?}"
        )))
    }
}

// ---------------------------------------------------------------------------
// Procedural subjects

#[derive(Clone, Copy)]
struct Rgb(f64, f64, f64);

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    Rgb(a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t, a.2 + (b.2 - a.2) * t)
}

/// Persistent per-subject signature for the texture family.
struct StyleParams {
    palette: [Rgb; 3],
    theta: f64,
    freq1: f64,
    freq2: f64,
    warp: f64,
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> Rgb {
    Rgb(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi))
}

fn style_subject_params(rng: &mut impl Rng) -> StyleParams {
    let palette = [
        random_color(rng, 0.05, 0.95),
        random_color(rng, 0.05, 0.95),
        random_color(rng, 0.05, 0.95),
    ];
    StyleParams {
        palette,
        theta: rng.random_range(0.0..std::f64::consts::PI),
        freq1: rng.random_range(2.0..6.0),
        freq2: rng.random_range(5.0..14.0),
        warp: rng.random_range(0.5..3.0),
    }
}

fn render_style_image<S: Scalar>(
    p: &StyleParams,
    rng: &mut impl Rng,
    resolution: usize,
) -> ImageTensor<S> {
    use std::f64::consts::TAU;
    let phase1 = rng.random_range(0.0..TAU);
    let phase2 = rng.random_range(0.0..TAU);
    let f1 = p.freq1 * rng.random_range(0.95..1.05);
    let f2 = p.freq2 * rng.random_range(0.95..1.05);
    let brightness = rng.random_range(-0.04..0.04);
    let (ct, st) = (p.theta.cos(), p.theta.sin());
    let mut px = Array3::zeros((resolution, resolution, 3));
    for i in 0..resolution {
        for j in 0..resolution {
            let u = (i as f64 + 0.5) / resolution as f64;
            let v = (j as f64 + 0.5) / resolution as f64;
            let d = ct * u + st * v;
            let e = -st * u + ct * v;
            let s = (TAU * f1 * d + phase1 + p.warp * (TAU * f2 * e + phase2).sin()).sin();
            let t = (s + 1.0) * 0.5;
            let color = if t < 0.5 {
                lerp(p.palette[0], p.palette[1], 2.0 * t)
            } else {
                lerp(p.palette[1], p.palette[2], 2.0 * t - 1.0)
            };
            let grain = rng.random_range(-0.01..0.01);
            for (ch, c) in [color.0, color.1, color.2].into_iter().enumerate() {
                px[[i, j, ch]] = sc((c + brightness + grain).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(px).expect("values clamped into range")
}

/// Persistent per-subject signature for the sprite face.
struct FaceParams {
    skin: Rgb,
    hair: Rgb,
    bg_top: Rgb,
    bg_bottom: Rgb,
    rx: f64,
    ry: f64,
    eye_dx: f64,
    eye_r: f64,
    mouth_w: f64,
}

fn face_subject_params(rng: &mut impl Rng) -> FaceParams {
    let r = rng.random_range(0.55..0.9);
    let g = r * rng.random_range(0.65..0.85);
    let b = g * rng.random_range(0.6..0.85);
    let hair_v = rng.random_range(0.05..0.35);
    let hair = Rgb(
        hair_v,
        hair_v * rng.random_range(0.6..1.0),
        hair_v * rng.random_range(0.4..1.0),
    );
    let bg_top = random_color(rng, 0.1, 0.6);
    let bg_bottom = random_color(rng, 0.1, 0.6);
    FaceParams {
        skin: Rgb(r, g, b),
        hair,
        bg_top,
        bg_bottom,
        rx: rng.random_range(0.20..0.28),
        ry: rng.random_range(0.26..0.36),
        eye_dx: rng.random_range(0.08..0.14),
        eye_r: rng.random_range(0.020..0.042),
        mouth_w: rng.random_range(0.08..0.16),
    }
}

fn render_face_image<S: Scalar>(
    p: &FaceParams,
    rng: &mut impl Rng,
    resolution: usize,
) -> ImageTensor<S> {
    let dx = rng.random_range(-0.03..0.03);
    let dy = rng.random_range(-0.03..0.03);
    let scale = rng.random_range(0.95..1.05);
    let brightness = rng.random_range(-0.04..0.04);
    let blink = rng.random_range(0.7..1.1);
    let smile = rng.random_range(-0.02..0.04);
    let (cx, cy) = (0.47 + dy, 0.5 + dx);
    let (rx, ry) = (p.ry * scale, p.rx * scale); // rows are the long axis
    // Soft-edged implicit ellipse: 1 inside, 0 outside, smooth near f = 1.
    let edge = |f: f64| ((1.06 - f) / 0.12).clamp(0.0, 1.0);
    let mut px = Array3::zeros((resolution, resolution, 3));
    for i in 0..resolution {
        for j in 0..resolution {
            let u = (i as f64 + 0.5) / resolution as f64;
            let v = (j as f64 + 0.5) / resolution as f64;
            let mut c = lerp(p.bg_top, p.bg_bottom, u);
            // hair: larger ellipse behind the face, upper half only
            let fh = ((u - cx + 0.04) / (rx * 1.18)).powi(2) + ((v - cy) / (ry * 1.22)).powi(2);
            if u < cx + 0.05 {
                c = lerp(c, p.hair, edge(fh));
            }
            let ff = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
            c = lerp(c, p.skin, edge(ff));
            // eyes
            let ey = cx - 0.05;
            for side in [-1.0, 1.0] {
                let ex = cy + side * p.eye_dx;
                let fe = ((u - ey) / (p.eye_r * blink)).powi(2) + ((v - ex) / p.eye_r).powi(2);
                c = lerp(c, Rgb(0.06, 0.05, 0.08), edge(fe));
            }
            // mouth: a flat ellipse whose vertical center bends with `smile`
            let mu = cx + ry * 0.62 + smile * (((v - cy) / p.mouth_w).powi(2) - 1.0);
            let fm = ((u - mu) / 0.02).powi(2) + ((v - cy) / p.mouth_w).powi(2);
            c = lerp(c, Rgb(0.45, 0.12, 0.14), edge(fm));
            for (ch, val) in [c.0, c.1, c.2].into_iter().enumerate() {
                px[[i, j, ch]] = sc((val + brightness).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(px).expect("values clamped into range")
}

/// Procedurally generate per-subject image sets, bitwise-deterministic in
/// (task, counts, resolution, seed). Each subject keeps a persistent
/// signature (palette/texture family or face layout); images vary in phase,
/// pose, and lighting.
pub fn generate_synthetic_subjects<S: Scalar>(
    task: Task,
    n_subjects: usize,
    n_images: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<SubjectDataset<S>>> {
    validate_resolution(resolution)?;
    if n_subjects == 0 || n_images == 0 {
        return Err(Error::config("subject and image counts must be positive"));
    }
    let root = seeds::derive(seed, task.slug());
    let mut out = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        let subject_seed = seeds::derive_n(root, "subject", s as u64);
        let mut param_rng = seeds::rng(seeds::derive(subject_seed, "signature"));
        let style = matches!(task, Task::ArtisticStyle).then(|| style_subject_params(&mut param_rng));
        let face = matches!(task, Task::HumanFace).then(|| face_subject_params(&mut param_rng));
        let mut images = Vec::with_capacity(n_images);
        for i in 0..n_images {
            let mut img_rng = seeds::rng(seeds::derive_n(subject_seed, "image", i as u64));
            let img = match task {
                Task::ArtisticStyle => {
                    render_style_image(style.as_ref().expect("style params"), &mut img_rng, resolution)
                }
                Task::HumanFace => {
                    render_face_image(face.as_ref().expect("face params"), &mut img_rng, resolution)
                }
            };
            images.push(img);
        }
        out.push(SubjectDataset::new(
            format!("{}-{seed}-{s}", task.slug()),
            task,
            images,
            Source::Synthetic,
        )?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Prompts

/// Ordered prompt list; after a split, `known_count` records how many of the
/// prompts the detector owner is assumed to know.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompts: Vec<(u32, String)>,
    pub known_count: usize,
}

impl PromptSet {
    pub fn new(prompts: Vec<(u32, String)>) -> Result<Self> {
        let mut ids: Vec<u32> = prompts.iter().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != prompts.len() {
            return Err(Error::validation("prompt ids must be unique"));
        }
        Ok(Self { prompts, known_count: 0 })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.prompts.iter().map(|(id, _)| *id).collect()
    }

    /// The stock 30-prompt bank used by the desk experiments.
    pub fn default_bank() -> Self {
        let contexts = [
            "in a sunlit park",
            "on a city street at night",
            "beside a mountain lake",
            "in a snowy courtyard",
            "inside a dim library",
            "at a crowded festival",
            "on a windswept beach",
            "in a rainy alley",
            "under autumn trees",
            "in a field of wildflowers",
        ];
        let framings = [
            "a photo of the subject",
            "an oil painting of the subject",
            "a watercolor sketch of the subject",
        ];
        let mut prompts = Vec::with_capacity(30);
        let mut id = 0;
        for framing in framings {
            for context in contexts {
                prompts.push((id, format!("{framing} {context}")));
                id += 1;
            }
        }
        Self::new(prompts).expect("generated ids are unique")
    }
}

/// Seeded disjoint partition into known and held-out prompts; both sides
/// preserve the input ordering.
pub fn split_prompts(
    prompts: &PromptSet,
    known_count: usize,
    seed: u64,
) -> Result<(PromptSet, PromptSet)> {
    if known_count > prompts.len() {
        return Err(Error::config(format!(
            "known_count {known_count} exceeds prompt count {}",
            prompts.len()
        )));
    }
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    order.shuffle(&mut seeds::rng(seeds::derive(seed, "prompt-split")));
    let mut chosen = vec![false; prompts.len()];
    for &idx in order.iter().take(known_count) {
        chosen[idx] = true;
    }
    let mut known = Vec::with_capacity(known_count);
    let mut held = Vec::with_capacity(prompts.len() - known_count);
    for (idx, p) in prompts.prompts.iter().enumerate() {
        if chosen[idx] {
            known.push(p.clone());
        } else {
            held.push(p.clone());
        }
    }
    Ok((
        PromptSet { prompts: known, known_count },
        PromptSet { prompts: held, known_count: 0 },
    ))
}

// ---------------------------------------------------------------------------
// Manifest + folder ingestion

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub relative_path: String,
    pub subject_id: String,
    pub task: Task,
    /// Lowercase hex SHA-256 of the file bytes.
    pub checksum: String,
}

/// Versioned JSON index of an on-disk dataset (`<root>/<subject_id>/*.png`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ingestion(path, format!("cannot read manifest: {e}")))?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::ingestion(path, format!("malformed manifest: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::validation(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Write subjects to `<root>/<subject_id>/img_NNNN.png` and return the
/// matching manifest (not yet written to disk).
pub fn export_subjects<S: Scalar>(
    root: &Path,
    subjects: &[SubjectDataset<S>],
) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for subject in subjects {
        let dir = root.join(&subject.subject_id);
        std::fs::create_dir_all(&dir)?;
        for (i, img) in subject.images.iter().enumerate() {
            let name = format!("img_{i:04}.png");
            let path = dir.join(&name);
            img.write_png(&path)?;
            let bytes = std::fs::read(&path)?;
            entries.push(ManifestEntry {
                relative_path: format!("{}/{name}", subject.subject_id),
                subject_id: subject.subject_id.clone(),
                task: subject.task,
                checksum: sha256_hex(&bytes),
            });
        }
    }
    Ok(DatasetManifest { version: MANIFEST_VERSION, entries })
}

/// Read one manifest entry: verify the checksum, decode, force RGB, resize.
pub(crate) fn read_entry_image<S: Scalar>(
    root: &Path,
    entry: &ManifestEntry,
    resolution: usize,
) -> Result<ImageTensor<S>> {
    let path = root.join(&entry.relative_path);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::ingestion(&path, format!("missing or unreadable file: {e}")))?;
    let found = sha256_hex(&bytes);
    if found != entry.checksum {
        return Err(Error::ingestion(
            &path,
            format!("checksum mismatch: manifest {} vs file {found}", entry.checksum),
        ));
    }
    let decoded = image::load_from_memory(&bytes)
        .map_err(|e| Error::ingestion(&path, format!("undecodable image: {e}")))?;
    // Normalise to RGB so a dataset never mixes channel counts.
    let img = ImageTensor::<S>::from_dynamic(&image::DynamicImage::ImageRgb8(decoded.to_rgb8()));
    img.resize(resolution)
}

/// Load, verify, and resize every manifest entry, grouping by subject.
pub fn load_image_folder<S: Scalar>(
    root: &Path,
    manifest: &DatasetManifest,
    resolution: usize,
) -> Result<Vec<SubjectDataset<S>>> {
    validate_resolution(resolution)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::validation(format!(
            "manifest version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let mut groups: BTreeMap<String, (Task, Vec<ImageTensor<S>>)> = BTreeMap::new();
    for entry in &manifest.entries {
        let path = root.join(&entry.relative_path);
        let img = read_entry_image::<S>(root, entry, resolution)?;
        let slot = groups
            .entry(entry.subject_id.clone())
            .or_insert_with(|| (entry.task, Vec::new()));
        if slot.0 != entry.task {
            return Err(Error::ingestion(
                &path,
                format!("subject {} listed under two tasks", entry.subject_id),
            ));
        }
        slot.1.push(img);
    }
    groups
        .into_iter()
        .map(|(subject_id, (task, images))| {
            SubjectDataset::new(subject_id, task, images, Source::Folder)
        })
        .collect()
}
