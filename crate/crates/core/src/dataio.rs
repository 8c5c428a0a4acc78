//! Dataset ingestion and the synthetic "toy vehicle" generator.
//!
//! A dataset is a JSONL manifest, one object per line:
//!
//! ```text
//! {"image_path": "images/0003_007_c1.png", "identity": 3, "camera": 1, "split": "train"}
//! ```
//!
//! Paths are resolved relative to the manifest's directory. Train identities
//! are re-indexed densely to `0..k`; query and gallery entries keep their
//! original identity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, ImageSample};
use crate::error::{Error, Result};
use crate::seeding::{domain, substream};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub identity: u64,
    pub camera: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    root_dir: PathBuf,
    train_ids: BTreeMap<u64, usize>,
}

impl DatasetManifest {
    /// Validates entries and builds the dense train identity map.
    pub fn new(entries: Vec<ManifestEntry>, root_dir: impl Into<PathBuf>) -> Result<Self> {
        let gallery_ids: BTreeSet<u64> = entries
            .iter()
            .filter(|e| e.split == Split::Gallery)
            .map(|e| e.identity)
            .collect();
        let orphans: BTreeSet<u64> = entries
            .iter()
            .filter(|e| e.split == Split::Query && !gallery_ids.contains(&e.identity))
            .map(|e| e.identity)
            .collect();
        if !orphans.is_empty() {
            return Err(Error::Split(format!(
                "query identities {orphans:?} have no gallery entry"
            )));
        }
        let train_ids = entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| e.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(dense, original)| (original, dense))
            .collect();
        Ok(Self {
            entries,
            root_dir: root_dir.into(),
            train_ids,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn root_dir(&self) -> &Path {
        &self.root_dir
    }

    /// Number of distinct train identities (the classifier width k).
    pub fn num_train_identities(&self) -> usize {
        self.train_ids.len()
    }

    /// Original → dense mapping for train identities.
    pub fn train_identity_map(&self) -> &BTreeMap<u64, usize> {
        &self.train_ids
    }

    pub fn dense_identity(&self, original: u64) -> Option<usize> {
        self.train_ids.get(&original).copied()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root_dir.join(&entry.image_path)
    }

    /// Loads the images of one split. Train samples carry dense identities,
    /// query and gallery samples their original ones.
    pub fn load_samples(&self, split: Split) -> Result<Vec<ImageSample>> {
        self.split(split)
            .map(|e| {
                let path = self.resolve(e);
                let identity = match split {
                    Split::Train => self.train_ids[&e.identity],
                    _ => e.identity as usize,
                };
                let pixels = read_png(&path)?;
                Ok(ImageSample::new(pixels, identity, e.camera as usize)?.with_source_path(path))
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads and validates a JSONL manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let resolved = root.join(&entry.image_path);
        if !resolved.is_file() {
            return Err(Error::MissingFile(resolved));
        }
        entries.push(entry);
    }
    DatasetManifest::new(entries, root)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::zeros(h, w);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, f64::from(px[c]) / 255.0);
        }
    }
    Ok(img)
}

/// Quantizes to 8 bits per channel (round to nearest) and writes a PNG.
pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = img.get(c, y as usize, x as usize).clamp(0.0, 1.0);
            px[c] = (v * 255.0).round() as u8;
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Parameters of the synthetic dataset.
///
/// Per identity, the first `images_per_identity - query - gallery` images go
/// to the train split, the next `query_per_identity` to query and the rest to
/// gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub image_size: (usize, usize),
    pub n_cameras: usize,
    pub seed: u64,
    pub query_per_identity: usize,
    pub gallery_per_identity: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_identities: 20,
            images_per_identity: 20,
            image_size: (128, 128),
            n_cameras: 4,
            seed: 0,
            query_per_identity: 0,
            gallery_per_identity: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::Config(format!(
                "n_identities must be at least 2, got {}",
                self.n_identities
            )));
        }
        if self.images_per_identity < 2 {
            return Err(Error::Config(format!(
                "images_per_identity must be at least 2, got {}",
                self.images_per_identity
            )));
        }
        let (h, w) = self.image_size;
        if h < crate::datamodel::MIN_SAMPLE_SIDE || w < crate::datamodel::MIN_SAMPLE_SIDE {
            return Err(Error::Config(format!(
                "image_size must be at least 32x32, got {h}x{w}"
            )));
        }
        if self.n_cameras < 1 {
            return Err(Error::Config("n_cameras must be at least 1".into()));
        }
        if self.query_per_identity + self.gallery_per_identity > self.images_per_identity {
            return Err(Error::Config(format!(
                "query_per_identity + gallery_per_identity ({}) exceeds images_per_identity ({})",
                self.query_per_identity + self.gallery_per_identity,
                self.images_per_identity
            )));
        }
        if self.query_per_identity > 0 && self.gallery_per_identity == 0 {
            return Err(Error::Config(
                "query images require at least one gallery image per identity".into(),
            ));
        }
        Ok(())
    }

    fn train_per_identity(&self) -> usize {
        self.images_per_identity - self.query_per_identity - self.gallery_per_identity
    }

    pub fn split_of(&self, image_index: usize) -> Split {
        let train = self.train_per_identity();
        if image_index < train {
            Split::Train
        } else if image_index < train + self.query_per_identity {
            Split::Query
        } else {
            Split::Gallery
        }
    }
}

const PALETTE: [[f64; 3]; 12] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.25, 0.85],
    [0.10, 0.65, 0.20],
    [0.95, 0.85, 0.10],
    [0.95, 0.95, 0.95],
    [0.08, 0.08, 0.08],
    [0.60, 0.62, 0.65],
    [0.95, 0.50, 0.05],
    [0.55, 0.15, 0.70],
    [0.10, 0.80, 0.85],
    [0.45, 0.28, 0.10],
    [0.95, 0.45, 0.70],
];

const ASPECTS: [f64; 4] = [1.5, 1.8, 2.1, 2.4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BodyShape {
    Sedan,
    Van,
    Truck,
    Compact,
}

const SHAPES: [BodyShape; 4] = [
    BodyShape::Sedan,
    BodyShape::Van,
    BodyShape::Truck,
    BodyShape::Compact,
];

/// Appearance held fixed across all images of one identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IdentityAttributes {
    pub body_color: usize,
    pub shape: BodyShape,
    pub aspect: usize,
    pub marker: (usize, usize),
}

impl IdentityAttributes {
    pub fn body_rgb(&self) -> [f64; 3] {
        PALETTE[self.body_color]
    }

    pub fn aspect_ratio(&self) -> f64 {
        ASPECTS[self.aspect]
    }
}

/// Draws one attribute tuple per identity, re-drawing on collision.
pub fn identity_attributes(spec: &SyntheticSpec) -> Vec<IdentityAttributes> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(spec.n_identities);
    for id in 0..spec.n_identities {
        let mut rng = substream(spec.seed, &[domain::SYNTH_IDENTITY, id as u64]);
        loop {
            let body_color = rng.random_range(0..PALETTE.len());
            let m1 = rng.random_range(0..PALETTE.len());
            let m2 = rng.random_range(0..PALETTE.len());
            let attrs = IdentityAttributes {
                body_color,
                shape: SHAPES[rng.random_range(0..SHAPES.len())],
                aspect: rng.random_range(0..ASPECTS.len()),
                marker: (m1, m2),
            };
            let key = (
                attrs.body_color,
                attrs.shape as u8,
                attrs.aspect,
                attrs.marker,
            );
            if seen.insert(key) {
                out.push(attrs);
                break;
            }
        }
    }
    out
}

/// Per-image nuisance parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation_deg: f64,
    pub scale: f64,
    pub background: [f64; 3],
}

fn body_contains(shape: BodyShape, s: f64, t: f64) -> Option<f64> {
    // (s, t) are body-frame coordinates normalized to [-1, 1]; t grows
    // downward. Returns the shade multiplier for the hit region.
    match shape {
        BodyShape::Sedan => {
            let lower = s.abs() <= 1.0 && (-0.2..=1.0).contains(&t);
            let cabin = s.abs() <= 0.55 && (-1.0..-0.2).contains(&t);
            if cabin {
                Some(0.7)
            } else if lower {
                Some(1.0)
            } else {
                None
            }
        }
        BodyShape::Van => {
            let corner = (s.abs() - 0.8).max(0.0).powi(2) + (t.abs() - 0.8).max(0.0).powi(2);
            (s.abs() <= 1.0 && t.abs() <= 1.0 && corner <= 0.04).then_some(1.0)
        }
        BodyShape::Truck => {
            let cab = (0.45..=1.0).contains(&s) && t.abs() <= 1.0;
            let cargo = (-1.0..0.4).contains(&s) && (-0.7..=1.0).contains(&t);
            if cab {
                Some(1.0)
            } else if cargo {
                Some(0.6)
            } else {
                None
            }
        }
        BodyShape::Compact => (s * s + t * t <= 1.0).then_some(1.0),
    }
}

/// Renders one identity under one pose. Noise is added by the caller.
pub fn render_vehicle(attrs: &IdentityAttributes, pose: &Pose, height: usize, width: usize) -> Image {
    let mut img = Image::zeros(height, width);
    let theta = pose.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let half_len = 0.8 * pose.scale;
    let half_height = half_len / attrs.aspect_ratio();
    let body = attrs.body_rgb();
    let (m1, m2) = (PALETTE[attrs.marker.0], PALETTE[attrs.marker.1]);
    let wheel_r = 0.45 * half_height;
    for y in 0..height {
        for x in 0..width {
            let px = (x as f64 + 0.5) / width as f64 * 2.0 - 1.0;
            let py = (y as f64 + 0.5) / height as f64 * 2.0 - 1.0;
            // rotate the sample point into the body frame
            let qx = cos * px + sin * py;
            let qy = -sin * px + cos * py;
            let (s, t) = (qx / half_len, qy / half_height);
            let mut color = pose.background;
            let wheel = [-0.6, 0.6].iter().any(|&ws| {
                let dx = qx - ws * half_len;
                let dy = qy - half_height;
                dx * dx + dy * dy <= wheel_r * wheel_r
            });
            if let Some(shade) = body_contains(attrs.shape, s, t) {
                color = [body[0] * shade, body[1] * shade, body[2] * shade];
                if (0.1..=0.55).contains(&t) {
                    if (-0.55..=-0.15).contains(&s) {
                        color = m1;
                    } else if (0.15..=0.55).contains(&s) {
                        color = m2;
                    }
                }
            }
            if wheel {
                color = [0.12, 0.12, 0.12];
            }
            for (c, v) in color.iter().enumerate() {
                img.set(c, y, x, *v);
            }
        }
    }
    img
}

/// Deterministically renders image `index` of `identity`.
pub fn synthesize_image(spec: &SyntheticSpec, attrs: &IdentityAttributes, identity: usize, index: usize) -> Image {
    let mut rng = substream(
        spec.seed,
        &[domain::SYNTH_IMAGE, identity as u64, index as u64],
    );
    let pose = Pose {
        rotation_deg: rng.random_range(-30.0..=30.0),
        scale: rng.random_range(0.7..=1.0),
        background: [
            rng.random_range(0.15..0.85),
            rng.random_range(0.15..0.85),
            rng.random_range(0.15..0.85),
        ],
    };
    let (h, w) = spec.image_size;
    let mut img = render_vehicle(attrs, &pose, h, w);
    let noise = Normal::new(0.0, 0.02).expect("valid noise sigma");
    for v in img.data_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    img
}

/// Writes `images/*.png` and `manifest.jsonl` under `out_dir` and returns the
/// loaded manifest.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("images"))?;
    let attributes = identity_attributes(spec);
    let mut entries = Vec::with_capacity(spec.n_identities * spec.images_per_identity);
    for (identity, attrs) in attributes.iter().enumerate() {
        for index in 0..spec.images_per_identity {
            let camera = index % spec.n_cameras;
            let rel = format!("images/{identity:04}_{index:03}_c{camera}.png");
            let img = synthesize_image(spec, attrs, identity, index);
            write_png(out_dir.join(&rel), &img)?;
            entries.push(ManifestEntry {
                image_path: rel,
                identity: identity as u64,
                camera: camera as u64,
                split: spec.split_of(index),
            });
        }
    }
    let manifest = DatasetManifest::new(entries, out_dir)?;
    manifest.write_jsonl(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
