//! Value types shared across the crate: images, labeled samples, P×K batches
//! and embedding matrices.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Smallest side accepted for a dataset sample.
pub const MIN_SAMPLE_SIDE: usize = 32;

/// An RGB image with values in `[0, 1]`, stored planar (channel, row, column).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    /// Builds an image from planar CHW data. No range check; see
    /// [`Image::validate_range`].
    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn validate_range(&self) -> Result<()> {
        match self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            None => Ok(()),
            Some(i) => Err(Error::InvalidSample(format!(
                "pixel value {} at flat index {i} outside [0, 1]",
                self.data[i]
            ))),
        }
    }
}

/// One labeled vehicle image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pixels: Image,
    identity: usize,
    camera: usize,
    source_path: Option<PathBuf>,
}

impl ImageSample {
    pub fn new(pixels: Image, identity: usize, camera: usize) -> Result<Self> {
        if pixels.height() < MIN_SAMPLE_SIDE || pixels.width() < MIN_SAMPLE_SIDE {
            return Err(Error::InvalidSample(format!(
                "image is {}x{}, both sides must be at least {MIN_SAMPLE_SIDE}",
                pixels.height(),
                pixels.width()
            )));
        }
        pixels.validate_range()?;
        Ok(Self {
            pixels,
            identity,
            camera,
            source_path: None,
        })
    }

    pub fn with_source_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.source_path = Some(path.into());
        self
    }

    pub fn pixels(&self) -> &Image {
        &self.pixels
    }

    pub fn identity(&self) -> usize {
        self.identity
    }

    pub fn camera(&self) -> usize {
        self.camera
    }

    pub fn source_path(&self) -> Option<&std::path::Path> {
        self.source_path.as_deref()
    }
}

/// P identities × K instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PkLayout {
    pub p: usize,
    pub k: usize,
}

impl PkLayout {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

impl Default for PkLayout {
    fn default() -> Self {
        Self { p: 4, k: 4 }
    }
}

/// Checks the P×K contract on a label sequence.
pub fn validate_labels(labels: &[usize], layout: PkLayout) -> Result<()> {
    if layout.k < 2 {
        return Err(Error::BatchLayout(format!(
            "K = {} leaves anchors without positives; K must be at least 2",
            layout.k
        )));
    }
    if layout.p < 1 {
        return Err(Error::BatchLayout("P must be at least 1".into()));
    }
    if labels.len() != layout.batch_size() {
        return Err(Error::BatchLayout(format!(
            "batch holds {} samples, layout P={} K={} needs {}",
            labels.len(),
            layout.p,
            layout.k,
            layout.batch_size()
        )));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((&identity, &count)) = counts.iter().find(|(_, &c)| c != layout.k) {
        return Err(Error::IdentityCount {
            identity,
            count,
            expected: layout.k,
        });
    }
    if counts.len() != layout.p {
        return Err(Error::BatchLayout(format!(
            "batch holds {} identities, layout needs P={}",
            counts.len(),
            layout.p
        )));
    }
    Ok(())
}

/// A training batch satisfying the P×K layout.
#[derive(Debug, Clone)]
pub struct Batch {
    samples: Vec<Arc<ImageSample>>,
    layout: PkLayout,
}

impl Batch {
    pub fn new(samples: Vec<Arc<ImageSample>>, layout: PkLayout) -> Result<Self> {
        let batch = Self { samples, layout };
        validate_batch(&batch)?;
        Ok(batch)
    }

    pub fn samples(&self) -> &[Arc<ImageSample>] {
        &self.samples
    }

    pub fn layout(&self) -> PkLayout {
        self.layout
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity()).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn validate_batch(batch: &Batch) -> Result<()> {
    validate_labels(&batch.labels(), batch.layout)
}

/// Indices sharing the anchor's label, excluding the anchor.
pub fn positive_indices(labels: &[usize], anchor: usize) -> Vec<usize> {
    (0..labels.len())
        .filter(|&i| i != anchor && labels[i] == labels[anchor])
        .collect()
}

/// Indices with a label different from the anchor's.
pub fn negative_indices(labels: &[usize], anchor: usize) -> Vec<usize> {
    (0..labels.len())
        .filter(|&i| labels[i] != labels[anchor])
        .collect()
}

/// N embeddings of dimension d, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{dim} embeddings need {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        Ok(Self {
            rows,
            dim,
            data,
            normalized: false,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = crate::tensor::Matrix::from_rows(rows)?;
        Self::new(m.rows(), m.cols(), m.into_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Scales every row to unit L2 norm. All-zero rows are left untouched.
    pub fn l2_normalized(mut self) -> Self {
        for row in self.data.chunks_mut(self.dim.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        self.normalized = true;
        self
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            dim: self.dim,
            data,
            normalized: self.normalized,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_valid_layout() {
        assert!(validate_labels(&[5, 5, 9, 9], PkLayout { p: 2, k: 2 }).is_ok());
    }

    #[test]
    fn unequal_instances_rejected() {
        let err = validate_labels(&[5, 5, 5, 9], PkLayout { p: 2, k: 2 }).unwrap_err();
        assert!(matches!(err, Error::IdentityCount { identity: 5, count: 3, .. }));
    }

    #[test]
    fn single_instance_layout_rejected() {
        let err = validate_labels(&[3], PkLayout { p: 1, k: 1 }).unwrap_err();
        assert!(matches!(err, Error::BatchLayout(_)));
    }

    #[test]
    fn wrong_count_is_layout_error() {
        let err = validate_labels(&[1, 1, 2], PkLayout { p: 2, k: 2 }).unwrap_err();
        assert!(matches!(err, Error::BatchLayout(_)));
    }

    #[test]
    fn sample_rejects_small_or_out_of_range_images() {
        assert!(ImageSample::new(Image::zeros(16, 64), 0, 0).is_err());
        let mut img = Image::zeros(32, 32);
        img.set(1, 3, 3, 1.5);
        assert!(ImageSample::new(img, 0, 0).is_err());
        assert!(ImageSample::new(Image::zeros(32, 40), 0, 0).is_ok());
    }

    #[test]
    fn normalization_gives_unit_rows() {
        let e = EmbeddingMatrix::from_rows(&[vec![3.0, 4.0], vec![0.0, -2.0]])
            .unwrap()
            .l2_normalized();
        assert!(e.is_normalized());
        assert_eq!(e.row(0), &[0.6, 0.8]);
        assert_eq!(e.row(1), &[0.0, -1.0]);
    }

    proptest! {
        #[test]
        fn positive_and_negative_set_sizes(p in 1usize..6, k in 2usize..6, a in 0usize..36) {
            let labels: Vec<usize> = (0..p).flat_map(|id| std::iter::repeat_n(id * 7, k)).collect();
            prop_assume!(a < labels.len());
            let layout = PkLayout { p, k };
            prop_assert!(validate_labels(&labels, layout).is_ok());
            prop_assert_eq!(positive_indices(&labels, a).len(), k - 1);
            prop_assert_eq!(negative_indices(&labels, a).len(), (p - 1) * k);
        }
    }
}
