//! Retrieval evaluation and analysis.
//!
//! Embeddings for retrieval are teacher features passed through the
//! eval-mode bottleneck and L2-normalized; gallery entries are ranked by
//! Euclidean distance with ties broken by gallery index.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::resize;
use crate::backbone::Encoder;
use crate::datamodel::{EmbeddingMatrix, Image};
use crate::error::{Error, Result};
use crate::reid_head::BnNeck;
use crate::seeding::substream;
use crate::tensor::Matrix;

/// Which gallery entries are ignored for a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Nothing is excluded.
    None,
    /// Entries sharing both identity and camera with the query are excluded.
    #[default]
    CrossCamera,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::None => "none",
            Protocol::CrossCamera => "cross_camera",
        }
    }

    pub fn is_junk(&self, query: (usize, usize), gallery: (usize, usize)) -> bool {
        match self {
            Protocol::None => false,
            Protocol::CrossCamera => query == gallery,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Protocol::None),
            "cross_camera" => Ok(Protocol::CrossCamera),
            other => Err(Error::Config(format!(
                "unknown protocol {other:?}, expected \"none\" or \"cross_camera\""
            ))),
        }
    }
}

/// Identity and camera of every item in a query or gallery set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SetLabels {
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
}

impl SetLabels {
    pub fn new(identities: Vec<usize>, cameras: Vec<usize>) -> Result<Self> {
        if identities.len() != cameras.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} identities but {} cameras",
                identities.len(),
                cameras.len()
            )));
        }
        Ok(Self { identities, cameras })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    fn key(&self, i: usize) -> (usize, usize) {
        (self.identities[i], self.cameras[i])
    }
}

/// Gallery ranking for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub query_index: usize,
    /// Non-junk gallery indices by ascending distance.
    pub order: Vec<usize>,
    /// Relevance of each entry of `order`.
    pub relevant: Vec<bool>,
    /// Junk flag per gallery index.
    pub junk: Vec<bool>,
}

impl RankedResult {
    pub fn num_matches(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }

    /// `None` when there is no valid match.
    pub fn average_precision(&self) -> Option<f64> {
        average_precision_of_flags(&self.relevant)
    }

    /// Whether a match appears within the first `k` ranks.
    pub fn hit_at(&self, k: usize) -> bool {
        self.relevant.iter().take(k).any(|&r| r)
    }
}

/// AP of a ranked relevance list: mean over match positions r of
/// (matches at rank <= r) / r.
pub fn average_precision_of_flags(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(
    query: &EmbeddingMatrix,
    q: &SetLabels,
    gallery: &EmbeddingMatrix,
    g: &SetLabels,
) -> Result<()> {
    if query.rows() != q.len() || gallery.rows() != g.len() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings ({} query, {} gallery) do not match labels ({}, {})",
            query.rows(),
            gallery.rows(),
            q.len(),
            g.len()
        )));
    }
    if query.dim() != gallery.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} differs from gallery dim {}",
            query.dim(),
            gallery.dim()
        )));
    }
    Ok(())
}

pub fn rank_gallery(
    query: &EmbeddingMatrix,
    q: &SetLabels,
    gallery: &EmbeddingMatrix,
    g: &SetLabels,
    query_index: usize,
    protocol: Protocol,
) -> RankedResult {
    let qrow = query.row(query_index);
    let qkey = q.key(query_index);
    let junk: Vec<bool> = (0..g.len()).map(|j| protocol.is_junk(qkey, g.key(j))).collect();
    let mut scored: Vec<(f64, usize)> = (0..g.len())
        .filter(|&j| !junk[j])
        .map(|j| (squared_distance(qrow, gallery.row(j)), j))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = scored.into_iter().map(|(_, j)| j).collect();
    let relevant = order.iter().map(|&j| g.identities[j] == qkey.0).collect();
    RankedResult {
        query_index,
        order,
        relevant,
        junk,
    }
}

pub fn rank_all(
    query: &EmbeddingMatrix,
    q: &SetLabels,
    gallery: &EmbeddingMatrix,
    g: &SetLabels,
    protocol: Protocol,
) -> Result<Vec<RankedResult>> {
    check_sets(query, q, gallery, g)?;
    let ranked: Vec<RankedResult> = (0..q.len())
        .map(|i| rank_gallery(query, q, gallery, g, i, protocol))
        .collect();
    let missing: Vec<usize> = ranked
        .iter()
        .filter(|r| r.num_matches() == 0)
        .map(|r| r.query_index)
        .collect();
    if !missing.is_empty() {
        return Err(Error::NoMatch { queries: missing });
    }
    Ok(ranked)
}

/// AP of a single query.
pub fn average_precision(
    query: &EmbeddingMatrix,
    q: &SetLabels,
    gallery: &EmbeddingMatrix,
    g: &SetLabels,
    query_index: usize,
    protocol: Protocol,
) -> Result<f64> {
    check_sets(query, q, gallery, g)?;
    rank_gallery(query, q, gallery, g, query_index, protocol)
        .average_precision()
        .ok_or(Error::NoMatch {
            queries: vec![query_index],
        })
}

pub fn mean_ap(
    query: &EmbeddingMatrix,
    q: &SetLabels,
    gallery: &EmbeddingMatrix,
    g: &SetLabels,
    protocol: Protocol,
) -> Result<f64> {
    let ranked = rank_all(query, q, gallery, g, protocol)?;
    Ok(mean_ap_of(&ranked))
}

pub fn cmc(
    query: &EmbeddingMatrix,
    q: &SetLabels,
    gallery: &EmbeddingMatrix,
    g: &SetLabels,
    k: usize,
    protocol: Protocol,
) -> Result<f64> {
    let ranked = rank_all(query, q, gallery, g, protocol)?;
    Ok(cmc_of(&ranked, k))
}

fn mean_ap_of(ranked: &[RankedResult]) -> f64 {
    let total: f64 = ranked.iter().filter_map(RankedResult::average_precision).sum();
    total / ranked.len().max(1) as f64
}

fn cmc_of(ranked: &[RankedResult], k: usize) -> f64 {
    ranked.iter().filter(|r| r.hit_at(k)).count() as f64 / ranked.len().max(1) as f64
}

pub const DEFAULT_CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Metrics document written by the evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub protocol: Protocol,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub n_query: usize,
    pub n_gallery: usize,
}

pub fn evaluate(
    query: &EmbeddingMatrix,
    q: &SetLabels,
    gallery: &EmbeddingMatrix,
    g: &SetLabels,
    protocol: Protocol,
    ranks: &[usize],
) -> Result<RetrievalMetrics> {
    let ranked = rank_all(query, q, gallery, g, protocol)?;
    Ok(RetrievalMetrics {
        protocol,
        map: mean_ap_of(&ranked),
        cmc: ranks.iter().map(|&k| (k, cmc_of(&ranked, k))).collect(),
        n_query: q.len(),
        n_gallery: g.len(),
    })
}

/// Expected AP of a uniformly random ranking of `n` items with `m` matches.
pub fn expected_random_ap(n: usize, m: usize) -> f64 {
    if n == 0 || m == 0 {
        return 0.0;
    }
    let h: f64 = (1..=n).map(|r| 1.0 / r as f64).sum();
    let frac = if n > 1 { (m - 1) as f64 / (n - 1) as f64 } else { 0.0 };
    (h + frac * (n as f64 - h)) / n as f64
}

/// Mean AP expected from random rankings, from the per-query non-junk
/// gallery and match counts.
pub fn chance_map(q: &SetLabels, g: &SetLabels, protocol: Protocol) -> Result<f64> {
    let mut total = 0.0;
    let mut missing = Vec::new();
    for i in 0..q.len() {
        let qkey = q.key(i);
        let valid: Vec<usize> = (0..g.len()).filter(|&j| !protocol.is_junk(qkey, g.key(j))).collect();
        let m = valid.iter().filter(|&&j| g.identities[j] == qkey.0).count();
        if m == 0 {
            missing.push(i);
        }
        total += expected_random_ap(valid.len(), m);
    }
    if !missing.is_empty() {
        return Err(Error::NoMatch { queries: missing });
    }
    Ok(total / q.len().max(1) as f64)
}

/// Mean AP of random unit embeddings averaged over `trials` draws.
pub fn simulated_chance_map(
    q: &SetLabels,
    g: &SetLabels,
    protocol: Protocol,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..trials {
        let mut rng = substream(seed, &[u64::MAX, t as u64]);
        let mut draw = |n: usize| {
            let data: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            EmbeddingMatrix::new(n, dim, data).map(EmbeddingMatrix::l2_normalized)
        };
        let qe = draw(q.len())?;
        let ge = draw(g.len())?;
        total += mean_ap(&qe, q, &ge, g, protocol)?;
    }
    Ok(total / trials.max(1) as f64)
}

fn to_matrix(e: &EmbeddingMatrix) -> Result<Matrix> {
    Matrix::from_vec(e.rows(), e.dim(), e.data().to_vec())
}

/// Eval-mode bottleneck and L2 normalization of raw features.
pub fn normalize_features(features: &EmbeddingMatrix, bn: &BnNeck) -> Result<EmbeddingMatrix> {
    let y = bn.forward_eval(&to_matrix(features)?)?;
    Ok(EmbeddingMatrix::new(y.rows(), y.cols(), y.into_vec())?.l2_normalized())
}

/// Bottleneck whose running statistics are the exact mean and unbiased
/// variance of `features`, as if estimated without any learning.
pub fn estimate_bn_statistics(features: &EmbeddingMatrix) -> Result<BnNeck> {
    let (n, d) = (features.rows(), features.dim());
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let mut bn = BnNeck::new(d);
    for j in 0..d {
        let mean = (0..n).map(|i| features.row(i)[j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (features.row(i)[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        bn.running_mean[j] = mean;
        bn.running_var[j] = var;
    }
    Ok(bn)
}

/// Retrieval embeddings of images resized to `input_size`.
pub fn extract_embeddings<E: Encoder>(
    encoder: &E,
    bn: &BnNeck,
    images: &[Image],
    input_size: usize,
) -> Result<EmbeddingMatrix> {
    let resized: Vec<Image> = images.iter().map(|img| resize(img, input_size)).collect();
    normalize_features(&encoder.forward_batch(&resized), bn)
}

pub const HISTOGRAM_BINS: usize = 64;
pub const HISTOGRAM_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub pos_count: usize,
    pub neg_count: usize,
}

/// Positive and negative pair distances on normalized embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub mu_pos: f64,
    pub mu_neg: f64,
    pub bins: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub mu_pos: f64,
    pub mu_neg: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub bins: usize,
    pub range: [f64; 2],
}

fn bin_of(d: f64) -> usize {
    ((d / HISTOGRAM_MAX * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

pub fn distance_report(embeddings: &EmbeddingMatrix, labels: &[usize]) -> Result<DistanceReport> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} embeddings but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::Degenerate(format!("distance report needs at least 2 samples, got {n}")));
    }
    let normalized;
    let e = if embeddings.is_normalized() {
        embeddings
    } else {
        normalized = embeddings.clone().l2_normalized();
        &normalized
    };
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    let mut bins: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
        .map(|b| HistogramBin {
            bin_left: HISTOGRAM_MAX * b as f64 / HISTOGRAM_BINS as f64,
            bin_right: HISTOGRAM_MAX * (b + 1) as f64 / HISTOGRAM_BINS as f64,
            pos_count: 0,
            neg_count: 0,
        })
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(e.row(i), e.row(j)).sqrt();
            let bin = &mut bins[bin_of(d)];
            if labels[i] == labels[j] {
                positive.push(d);
                bin.pos_count += 1;
            } else {
                negative.push(d);
                bin.neg_count += 1;
            }
        }
    }
    if negative.is_empty() {
        return Err(Error::Degenerate("all samples share one identity".into()));
    }
    if positive.is_empty() {
        return Err(Error::Degenerate("no identity has two samples".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(DistanceReport {
        mu_pos: mean(&positive),
        mu_neg: mean(&negative),
        positive,
        negative,
        bins,
    })
}

impl DistanceReport {
    pub fn summary(&self) -> DistanceSummary {
        DistanceSummary {
            mu_pos: self.mu_pos,
            mu_neg: self.mu_neg,
            n_pos: self.positive.len(),
            n_neg: self.negative.len(),
            bins: HISTOGRAM_BINS,
            range: [0.0, HISTOGRAM_MAX],
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Io(e.into()))?;
        for b in &self.bins {
            w.serialize(b).map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.summary())?)?;
        Ok(())
    }
}

/// Input-gradient maps for a query/gallery pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyResult {
    /// Cosine similarity of the two retrieval embeddings.
    pub score: f64,
    /// `H x W` maps in [0, 1].
    pub query_map: Matrix,
    pub gallery_map: Matrix,
    /// Raw input gradients of the score.
    pub query_grad: Image,
    pub gallery_grad: Image,
}

/// Channel max of absolute values, then min-max scaling; a constant map
/// becomes all zeros.
pub fn reduce_gradient(grad: &Image) -> Matrix {
    let (h, w) = (grad.height(), grad.width());
    let mut m = Matrix::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = (0..Image::CHANNELS).map(|c| grad.get(c, y, x).abs()).fold(0.0, f64::max);
            m.set(y, x, v);
        }
    }
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    for v in m.data_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
    m
}

struct EmbeddingGrad {
    embedding: Vec<f64>,
    norm: f64,
}

fn embed<E: Encoder>(encoder: &E, bn: &BnNeck, img: &Image) -> Result<(EmbeddingGrad, E::Tape)> {
    let (f, tape) = encoder.forward_with_tape(img);
    let y = bn.forward_eval(&Matrix::from_vec(1, f.len(), f)?)?.into_vec();
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let embedding = if norm > 0.0 { y.iter().map(|v| v / norm).collect() } else { y };
    Ok((EmbeddingGrad { embedding, norm }, tape))
}

/// d(e_a . e_b)/d f_a through normalization and the eval-mode bottleneck.
fn score_grad_wrt_features(a: &EmbeddingGrad, b: &EmbeddingGrad, bn: &BnNeck, score: f64) -> Vec<f64> {
    if a.norm == 0.0 {
        return vec![0.0; a.embedding.len()];
    }
    a.embedding
        .iter()
        .zip(&b.embedding)
        .enumerate()
        .map(|(j, (ea, eb))| {
            let std = (bn.running_var[j] + crate::reid_head::VARIANCE_FLOOR).sqrt();
            (eb - score * ea) / a.norm / std
        })
        .collect()
}

/// Gradient of the retrieval similarity of two images with respect to
/// each input.
pub fn saliency_pair<E: Encoder>(encoder: &E, bn: &BnNeck, query: &Image, gallery: &Image) -> Result<SaliencyResult> {
    let (eq, tq) = embed(encoder, bn, query)?;
    let (eg, tg) = embed(encoder, bn, gallery)?;
    let score: f64 = eq.embedding.iter().zip(&eg.embedding).map(|(a, b)| a * b).sum();
    let mut scratch = encoder.params().zeros_like();
    let gq = score_grad_wrt_features(&eq, &eg, bn, score);
    let gg = score_grad_wrt_features(&eg, &eq, bn, score);
    let query_grad = encoder
        .backward(&tq, &gq, &mut scratch, true)
        .expect("input gradient requested");
    let gallery_grad = encoder
        .backward(&tg, &gg, &mut scratch, true)
        .expect("input gradient requested");
    Ok(SaliencyResult {
        score,
        query_map: reduce_gradient(&query_grad),
        gallery_map: reduce_gradient(&gallery_grad),
        query_grad,
        gallery_grad,
    })
}

/// Similarity score alone, for finite-difference checks.
pub fn similarity<E: Encoder>(encoder: &E, bn: &BnNeck, query: &Image, gallery: &Image) -> Result<f64> {
    let (a, _) = embed(encoder, bn, query)?;
    let (b, _) = embed(encoder, bn, gallery)?;
    Ok(a.embedding.iter().zip(&b.embedding).map(|(x, y)| x * y).sum())
}

fn heat_color(t: f64) -> [f64; 3] {
    // blue -> cyan -> yellow -> red
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Heat map blended over a grayscale copy of the image.
pub fn heat_overlay(image: &Image, map: &Matrix, alpha: f64) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    if map.rows() != h || map.cols() != w {
        return Err(Error::ShapeMismatch(format!(
            "map is {}x{}, image is {h}x{w}",
            map.rows(),
            map.cols()
        )));
    }
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let gray = (0..Image::CHANNELS).map(|c| image.get(c, y, x)).sum::<f64>() / 3.0;
            let heat = heat_color(map.get(y, x));
            for (c, hc) in heat.iter().enumerate() {
                out.set(c, y, x, (1.0 - alpha) * gray + alpha * hc);
            }
        }
    }
    Ok(out)
}

/// Writes a little-endian f64 C-order array in NumPy `.npy` format.
pub fn write_npy(path: impl AsRef<Path>, shape: &[usize], data: &[f64]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::ShapeMismatch(format!("shape {shape:?} for {} values", data.len())));
    }
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    let shape_txt = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_txt}, }}");
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + 8 * data.len());
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Reads back an array written by [`write_npy`].
pub fn read_npy(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let bad = || Error::Data("not a little-endian f64 .npy file".into());
    if bytes.len() < 10 || &bytes[..8] != b"\x93NUMPY\x01\x00" {
        return Err(bad());
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(bad)?).map_err(|_| bad())?;
    if !header.contains("'<f8'") {
        return Err(bad());
    }
    let open = header.find("'shape': (").ok_or_else(bad)? + 10;
    let close = open + header[open..].find(')').ok_or_else(bad)?;
    let shape: Vec<usize> = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let data: Vec<f64> = bytes[10 + hlen..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if data.len() != shape.iter().product::<usize>() {
        return Err(bad());
    }
    Ok((shape, data))
}
