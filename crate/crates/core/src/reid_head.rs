//! Supervised re-identification head.
//!
//! The triplet loss constrains raw backbone features `x`; the classifier
//! sees the bottleneck-normalized features `x~` and produces logits
//! `z = W x~ + B`. Both losses are averaged over the batch.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear_backward, linear_forward, log_softmax_scaled, softmax_scaled};
use crate::seeding::{domain, substream};
use crate::tensor::{Matrix, ParamSet, Tensor};

/// Added to the variance before the square root.
pub const VARIANCE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter-free batch-normalization bottleneck with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnNeck {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

/// Values kept from a train-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl BnNeck {
    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    fn check_dim(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "bottleneck has {} dims, features have {}",
                self.dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Normalizes with batch statistics and updates the running ones
    /// (unbiased variance, momentum 0.1).
    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, BnCache)> {
        self.check_dim(x)?;
        let n = x.rows();
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for row in x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in x.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut var {
            *s /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + VARIANCE_FLOOR).sqrt()).collect();
        let mut normalized = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                normalized.set(i, j, (x.get(i, j) - mean[j]) * inv_std[j]);
            }
        }
        let unbias = n as f64 / (n - 1) as f64;
        for j in 0..d {
            self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
            self.running_var[j] =
                (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j] * unbias;
        }
        Ok((
            normalized.clone(),
            BnCache {
                normalized,
                inv_std,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        self.check_dim(x)?;
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.running_mean[j]) / (self.running_var[j] + VARIANCE_FLOOR).sqrt();
            }
        }
        Ok(out)
    }

    /// Gradient through train-mode normalization.
    pub fn backward(&self, cache: &BnCache, grad_out: &Matrix) -> Matrix {
        let (n, d) = (grad_out.rows(), grad_out.cols());
        let mut dx = Matrix::zeros(n, d);
        for j in 0..d {
            let mut sum_g = 0.0;
            let mut sum_gy = 0.0;
            for i in 0..n {
                let g = grad_out.get(i, j);
                sum_g += g;
                sum_gy += g * cache.normalized.get(i, j);
            }
            let (mg, mgy) = (sum_g / n as f64, sum_gy / n as f64);
            for i in 0..n {
                let y = cache.normalized.get(i, j);
                dx.set(i, j, cache.inv_std[j] * (grad_out.get(i, j) - mg - y * mgy));
            }
        }
        dx
    }
}

/// Mode-dispatching wrapper around [`BnNeck`].
pub fn bn_neck(x: &Matrix, state: &mut BnNeck, mode: Mode) -> Result<Matrix> {
    match mode {
        Mode::Train => state.forward_train(x).map(|(y, _)| y),
        Mode::Eval => state.forward_eval(x),
    }
}

/// `k`-way linear classifier over bottleneck features.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    params: ParamSet,
    classes: usize,
    dim: usize,
}

impl Classifier {
    /// Weights ~ N(0, 0.001^2), zero bias.
    pub fn new(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = substream(seed, &[domain::INIT_CLASSIFIER]);
        let normal = Normal::new(0.0, 0.001).expect("positive std");
        let w = (0..classes * dim).map(|_| normal.sample(&mut rng)).collect();
        let mut params = ParamSet::new();
        params.push("weight", Tensor::from_vec(&[classes, dim], w).expect("sized"));
        params.push("bias", Tensor::zeros(&[classes]));
        Self { params, classes, dim }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "classifier expects {} dims, got {}",
                self.dim,
                x.cols()
            )));
        }
        Ok(linear_forward(
            x,
            self.params.tensor(0).data(),
            self.params.tensor(1).data(),
            self.classes,
        ))
    }

    /// Accumulates into `grads` and returns the input gradient.
    pub fn backward(&self, x: &Matrix, grad_logits: &Matrix, grads: &mut ParamSet) -> Matrix {
        let (gw, gb) = grads.pair_mut(0);
        linear_backward(x, self.params.tensor(0).data(), grad_logits, gw.data_mut(), gb.data_mut())
    }
}

/// A scalar loss and its gradient with respect to the loss input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Matrix,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batch-hard soft-margin triplet loss with its feature gradient.
///
/// Per anchor: `log(1 + exp(max_p d(a,p) - min_n d(a,n)))`, averaged over
/// anchors. Ties in the hardest positive or negative go to the lowest index.
pub fn triplet_loss_with_grad(x: &Matrix, labels: &[usize]) -> Result<LossGrad> {
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} features but {} labels",
            labels.len()
        )));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(x.row(i), x.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, x.cols());
    for a in 0..n {
        let mut hard_pos: Option<(usize, f64)> = None;
        let mut hard_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist[a * n + j];
            if labels[j] == labels[a] {
                if hard_pos.is_none_or(|(_, best)| d > best) {
                    hard_pos = Some((j, d));
                }
            } else if hard_neg.is_none_or(|(_, best)| d < best) {
                hard_neg = Some((j, d));
            }
        }
        let ((p, dp), (q, dn)) = match (hard_pos, hard_neg) {
            (Some(p), Some(q)) => (p, q),
            (None, _) => {
                return Err(Error::Mining(format!("anchor {a} (label {}) has no positive", labels[a])))
            }
            (_, None) => {
                return Err(Error::Mining(format!("anchor {a} (label {}) has no negative", labels[a])))
            }
        };
        let margin = dp - dn;
        loss += softplus(margin);
        let s = sigmoid(margin) / n as f64;
        // d||xa - xj|| / dxa = (xa - xj) / ||xa - xj||, zero at coincidence.
        for (j, sign, d) in [(p, s, dp), (q, -s, dn)] {
            if d > 0.0 {
                for c in 0..x.cols() {
                    let u = (x.get(a, c) - x.get(j, c)) / d * sign;
                    grad.row_mut(a)[c] += u;
                    grad.row_mut(j)[c] -= u;
                }
            }
        }
    }
    Ok(LossGrad {
        loss: loss / n as f64,
        grad,
    })
}

pub fn triplet_loss(x: &Matrix, labels: &[usize]) -> Result<f64> {
    triplet_loss_with_grad(x, labels).map(|lg| lg.loss)
}

/// Label-smoothed target: `1 - (k-1)/k * eps` on the true class, `eps / k`
/// elsewhere.
pub fn smooth_targets(class_index: usize, k: usize, epsilon: f64) -> Result<Vec<f64>> {
    if k == 0 || class_index >= k {
        return Err(Error::Range(format!("class {class_index} outside 0..{k}")));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Range(format!("smoothing epsilon {epsilon} outside [0, 1]")));
    }
    let off = epsilon / k as f64;
    let mut y = vec![off; k];
    y[class_index] = 1.0 - (k - 1) as f64 / k as f64 * epsilon;
    Ok(y)
}

/// Label-smoothed softmax cross-entropy, mean over rows, with the logit
/// gradient `(softmax(z) - y) / N`.
pub fn ce_loss_with_grad(logits: &Matrix, labels: &[usize], epsilon: f64) -> Result<LossGrad> {
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} logit rows but {} labels", labels.len())));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, k);
    for (i, &label) in labels.iter().enumerate() {
        let y = smooth_targets(label, k, epsilon)?;
        let log_p = log_softmax_scaled(logits.row(i), 1.0);
        let p = softmax_scaled(logits.row(i), 1.0);
        loss -= y.iter().zip(&log_p).map(|(t, l)| t * l).sum::<f64>();
        for (g, (pj, yj)) in grad.row_mut(i).iter_mut().zip(p.iter().zip(&y)) {
            *g = (pj - yj) / n as f64;
        }
    }
    Ok(LossGrad {
        loss: loss / n as f64,
        grad,
    })
}

pub fn ce_loss(logits: &Matrix, labels: &[usize], epsilon: f64) -> Result<f64> {
    ce_loss_with_grad(logits, labels, epsilon).map(|lg| lg.loss)
}

/// Bottleneck plus classifier, with the smoothing parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ReIdHead {
    pub bn: BnNeck,
    pub classifier: Classifier,
    pub epsilon: f64,
}

/// Losses and feature gradients of one re-id head pass.
#[derive(Debug, Clone)]
pub struct ReIdOutput {
    pub classification: f64,
    pub triplet: f64,
    /// Gradients w.r.t. the raw features, before loss weighting.
    pub grad_from_classification: Matrix,
    pub grad_from_triplet: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReIdHeadConfig {
    pub label_smoothing: f64,
}

impl ReIdHead {
    pub fn new(classes: usize, dim: usize, epsilon: f64, seed: u64) -> Self {
        Self {
            bn: BnNeck::new(dim),
            classifier: Classifier::new(classes, dim, seed),
            epsilon,
        }
    }

    /// Train-mode pass: updates bottleneck statistics and accumulates
    /// classifier gradients into `classifier_grads`.
    pub fn train_step(&mut self, x: &Matrix, labels: &[usize], classifier_grads: &mut ParamSet) -> Result<ReIdOutput> {
        let triplet = triplet_loss_with_grad(x, labels)?;
        let (normalized, cache) = self.bn.forward_train(x)?;
        let logits = self.classifier.forward(&normalized)?;
        let ce = ce_loss_with_grad(&logits, labels, self.epsilon)?;
        let d_norm = self.classifier.backward(&normalized, &ce.grad, classifier_grads);
        let d_x = self.bn.backward(&cache, &d_norm);
        Ok(ReIdOutput {
            classification: ce.loss,
            triplet: triplet.loss,
            grad_from_classification: d_x,
            grad_from_triplet: triplet.grad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Matrix {
        Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn bn_train_output_is_standardized() {
        let x = Matrix::from_rows(&[vec![1.0, 10.0], vec![2.0, -3.0], vec![4.0, 0.5], vec![-1.0, 2.0]]).unwrap();
        let mut bn = BnNeck::new(2);
        let y = bn_neck(&x, &mut bn, Mode::Train).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..4).map(|i| y.get(i, j)).sum::<f64>() / 4.0;
            let var: f64 = (0..4).map(|i| (y.get(i, j) - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert_ne!(bn.running_mean, vec![0.0, 0.0]);
    }

    #[test]
    fn bn_constant_column_maps_to_zero() {
        let x = Matrix::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 5.0]]).unwrap();
        let y = bn_neck(&x, &mut BnNeck::new(2), Mode::Train).unwrap();
        for i in 0..3 {
            assert_eq!(y.get(i, 0), 0.0);
        }
    }

    #[test]
    fn bn_eval_with_neutral_stats_is_near_identity() {
        let x = Matrix::from_rows(&[vec![0.3, -2.0]]).unwrap();
        let y = bn_neck(&x, &mut BnNeck::new(2), Mode::Eval).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn bn_single_row_train_is_degenerate() {
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(bn_neck(&x, &mut BnNeck::new(1), Mode::Train), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn triplet_equal_distances_is_log2() {
        // positives and negatives equidistant for every anchor
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        // a=0: pos 1 at dist 1, negs 2 (1) and 3 (sqrt2) -> hardneg 1
        let loss = triplet_loss(&x, &[0, 0, 1, 1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn triplet_separated_limit_goes_to_zero() {
        let near = triplet_loss(&col(&[0.0, 0.0, 10.0, 10.0]), &[0, 0, 1, 1]).unwrap();
        let far = triplet_loss(&col(&[0.0, 0.0, 30.0, 30.0]), &[0, 0, 1, 1]).unwrap();
        assert!(far > 0.0 && far < near && far < 1e-12);
    }

    #[test]
    fn triplet_hand_instance() {
        // anchors 0 and 3 mine a negative at distance 1.0, anchors 1 and 2 at 0.9
        let x = col(&[0.0, 0.1, 1.0, 1.1]);
        let loss = triplet_loss(&x, &[0, 0, 1, 1]).unwrap();
        let expected = ((-0.9f64).exp().ln_1p() + (-0.8f64).exp().ln_1p()) / 2.0;
        assert!((loss - expected).abs() < 1e-12, "{loss}");
        assert!((loss - 0.356_127).abs() < 1e-6);
    }

    #[test]
    fn triplet_mining_errors() {
        let x = col(&[0.0, 1.0, 2.0]);
        assert!(matches!(triplet_loss(&x, &[0, 1, 1]), Err(Error::Mining(_))));
        assert!(matches!(triplet_loss(&x, &[1, 1, 1]), Err(Error::Mining(_))));
    }

    #[test]
    fn smoothing_values() {
        assert_eq!(smooth_targets(2, 4, 0.0).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        let y = smooth_targets(0, 4, 0.2).unwrap();
        for (a, b) in y.iter().zip([0.85, 0.05, 0.05, 0.05]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(smooth_targets(4, 4, 0.1), Err(Error::Range(_))));
        assert!(matches!(smooth_targets(0, 4, 1.5), Err(Error::Range(_))));
    }

    #[test]
    fn ce_reference_values() {
        let uniform = Matrix::zeros(1, 4);
        assert!((ce_loss(&uniform, &[1], 0.0).unwrap() - 4f64.ln()).abs() < 1e-12);
        let z = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!((ce_loss(&z, &[0], 0.2).unwrap() - 0.326_928).abs() < 1e-6);
        let confident = Matrix::from_rows(&[vec![60.0, 0.0, 0.0]]).unwrap();
        let l = ce_loss(&confident, &[0], 0.0).unwrap();
        assert!(l >= 0.0 && l < 1e-20);
    }

    #[test]
    fn head_step_produces_feature_gradients() {
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.0, 0.3], vec![1.0, -1.0], vec![0.8, -0.7]]).unwrap();
        let mut head = ReIdHead::new(2, 2, 0.2, 0);
        let mut grads = head.classifier.params().zeros_like();
        let out = head.train_step(&x, &[0, 0, 1, 1], &mut grads).unwrap();
        assert!(out.triplet > 0.0 && out.classification > 0.0);
        assert_eq!(out.grad_from_classification.rows(), 4);
        assert!(grads.tensor(0).data().iter().any(|g| *g != 0.0));
    }
}
