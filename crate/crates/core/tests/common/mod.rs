//! Independent reference implementations written straight from the
//! definitions, with no shared code paths with the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

/// Batch-hard soft-margin triplet loss: enumerate every (positive,
/// negative) pair per anchor and keep the largest margin.
pub fn triplet_oracle(x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                let m = dist(&x[a], &x[p]) - dist(&x[a], &x[q]);
                if m > worst {
                    worst = m;
                }
            }
        }
        total += (1.0 + worst.exp()).ln();
    }
    total / n as f64
}

pub fn smooth_oracle(class: usize, k: usize, eps: f64) -> Vec<f64> {
    let mut y = Vec::new();
    for j in 0..k {
        if j == class {
            y.push(1.0 - (k as f64 - 1.0) / k as f64 * eps);
        } else {
            y.push(eps / k as f64);
        }
    }
    y
}

/// Plain softmax without max subtraction; callers keep inputs small.
pub fn softmax_plain(z: &[f64], temperature: f64) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| (v / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn ce_oracle(z: &[Vec<f64>], labels: &[usize], eps: f64) -> f64 {
    let mut total = 0.0;
    for (row, &c) in z.iter().zip(labels) {
        let p = softmax_plain(row, 1.0);
        let y = smooth_oracle(c, row.len(), eps);
        for j in 0..row.len() {
            total -= y[j] * p[j].ln();
        }
    }
    total / z.len() as f64
}

/// Self-distillation loss of one sample: teacher rows are the two globals,
/// student rows are globals then locals. Counts the terms it sums.
pub fn dino_oracle_sample(
    student: &[Vec<f64>],
    teacher: &[Vec<f64>],
    center: &[f64],
    tau_s: f64,
    tau_t: f64,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut terms = 0;
    for (t, g) in teacher.iter().enumerate() {
        let centered: Vec<f64> = g.iter().zip(center).map(|(a, c)| a - c).collect();
        let pt = softmax_plain(&centered, tau_t);
        for (v, s) in student.iter().enumerate() {
            if v == t {
                continue;
            }
            let ps = softmax_plain(s, tau_s);
            let mut ce = 0.0;
            for i in 0..ps.len() {
                ce -= pt[i] * ps[i].ln();
            }
            total += ce;
            terms += 1;
        }
    }
    (total / terms as f64, terms)
}

pub fn rmse_oracle_sample(student: &[Vec<f64>], teacher: &[Vec<f64>]) -> (f64, usize) {
    let mut total = 0.0;
    let mut terms = 0;
    for (t, g) in teacher.iter().enumerate() {
        for (v, s) in student.iter().enumerate() {
            if v != t {
                total += dist(s, g);
                terms += 1;
            }
        }
    }
    (total / terms as f64, terms)
}

/// Rank (1-based) of every valid gallery item by counting the items that
/// sort before it.
fn ranks(q: &[f64], gallery: &[Vec<f64>], valid: &[bool]) -> Vec<Option<usize>> {
    let d: Vec<f64> = gallery.iter().map(|g| dist(q, g)).collect();
    (0..gallery.len())
        .map(|j| {
            if !valid[j] {
                return None;
            }
            let before = (0..gallery.len())
                .filter(|&i| valid[i] && (d[i] < d[j] || (d[i] == d[j] && i < j)))
                .count();
            Some(before + 1)
        })
        .collect()
}

pub struct OracleLabels<'a> {
    pub ids: &'a [usize],
    pub cams: &'a [usize],
}

fn valid_mask(qid: usize, qcam: usize, g: &OracleLabels, cross_camera: bool) -> Vec<bool> {
    (0..g.ids.len())
        .map(|j| !(cross_camera && g.ids[j] == qid && g.cams[j] == qcam))
        .collect()
}

/// AP of one query, or None without a valid match.
pub fn ap_oracle(
    q: &[f64],
    qid: usize,
    qcam: usize,
    gallery: &[Vec<f64>],
    g: &OracleLabels,
    cross_camera: bool,
) -> Option<f64> {
    let valid = valid_mask(qid, qcam, g, cross_camera);
    let r = ranks(q, gallery, &valid);
    let matches: Vec<usize> = (0..gallery.len())
        .filter(|&j| valid[j] && g.ids[j] == qid)
        .map(|j| r[j].unwrap())
        .collect();
    if matches.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &rj in &matches {
        let at_or_above = matches.iter().filter(|&&ri| ri <= rj).count();
        sum += at_or_above as f64 / rj as f64;
    }
    Some(sum / matches.len() as f64)
}

pub fn cmc_hit_oracle(
    q: &[f64],
    qid: usize,
    qcam: usize,
    gallery: &[Vec<f64>],
    g: &OracleLabels,
    cross_camera: bool,
    k: usize,
) -> bool {
    let valid = valid_mask(qid, qcam, g, cross_camera);
    let r = ranks(q, gallery, &valid);
    (0..gallery.len()).any(|j| valid[j] && g.ids[j] == qid && r[j].unwrap() <= k)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

/// ||a - b|| / max(||a||, ||b||), with a floor for near-zero vectors.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(&xs);
            xs[i] = orig - h;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// P identities with K members each, labels spread over `0..3P`.
pub fn pk_labels(p: usize, k: usize) -> Vec<usize> {
    (0..p).flat_map(|i| std::iter::repeat_n(3 * i + 1, k)).collect()
}

/// One 3x3 convolution from RGB to 8 channels followed by global average
/// pooling: 3*3*3*8 weights and 8 biases.
#[derive(Clone)]
pub struct SingleConvEncoder {
    spec: ssbver::nn::Conv2dSpec,
    params: ssbver::tensor::ParamSet,
}

impl SingleConvEncoder {
    pub fn new(seed: u64) -> Self {
        let spec = ssbver::nn::Conv2dSpec {
            in_channels: 3,
            out_channels: 8,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let mut r = rng(seed);
        let w: Vec<f64> = (0..spec.weight_len()).map(|_| r.random_range(-0.5..0.5)).collect();
        let mut params = ssbver::tensor::ParamSet::new();
        params.push("conv.weight", ssbver::tensor::Tensor::from_vec(&[8, 3, 3, 3], w).unwrap());
        params.push("conv.bias", ssbver::tensor::Tensor::zeros(&[8]));
        Self { spec, params }
    }
}

impl ssbver::backbone::Encoder for SingleConvEncoder {
    type Tape = (Vec<f64>, usize, usize);

    fn dim(&self) -> usize {
        8
    }

    fn params(&self) -> &ssbver::tensor::ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ssbver::tensor::ParamSet {
        &mut self.params
    }

    fn forward_with_tape(&self, image: &ssbver::datamodel::Image) -> (Vec<f64>, Self::Tape) {
        let (h, w) = (image.height(), image.width());
        let (y, ho, wo) = ssbver::nn::conv2d_forward(
            &self.spec,
            self.params.tensor(0).data(),
            self.params.tensor(1).data(),
            image.data(),
            h,
            w,
        );
        let area = (ho * wo) as f64;
        let pooled = y.chunks(ho * wo).map(|c| c.iter().sum::<f64>() / area).collect();
        (pooled, (image.data().to_vec(), h, w))
    }

    fn backward(
        &self,
        tape: &Self::Tape,
        grad_out: &[f64],
        grads: &mut ssbver::tensor::ParamSet,
        want_input: bool,
    ) -> Option<ssbver::datamodel::Image> {
        let (input, h, w) = tape;
        let n = h * w;
        let g: Vec<f64> = grad_out.iter().flat_map(|&v| std::iter::repeat_n(v / n as f64, n)).collect();
        let weight = self.params.tensor(0).data().to_vec();
        let (gw, gb) = grads.pair_mut(0);
        let d = ssbver::nn::conv2d_backward(&self.spec, &weight, input, *h, *w, &g, gw.data_mut(), gb.data_mut(), want_input);
        d.map(|v| ssbver::datamodel::Image::from_planar(*h, *w, v).unwrap())
    }
}
