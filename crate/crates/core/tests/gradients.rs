//! Analytic gradients against central differences of the reference
//! implementations in `common`.

mod common;

use std::sync::Arc;

use common::*;
use rand::Rng;
use ssbver::backbone::{Encoder, TinyEncoder, TinyEncoderConfig};
use ssbver::datamodel::{Image, ImageSample, PkLayout};
use ssbver::eval::saliency_pair;
use ssbver::reid_head::{ce_loss_with_grad, triplet_loss_with_grad, BnNeck, VARIANCE_FLOOR};
use ssbver::ssl_head::{dino_loss_with_grad, rmse_loss_with_grad, CenterState, ProjectorConfig};
use ssbver::tensor::{Matrix, ParamSet};
use ssbver::trainer::{compute_step, TrainConfig, TrainState};

const STEP: f64 = 1e-4;
const LOSS_TOL: f64 = 1e-4;
const SALIENCY_TOL: f64 = 1e-3;
const NETWORK_STEP: f64 = 1e-6;

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn unflat(x: &[f64], cols: usize) -> Vec<Vec<f64>> {
    x.chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Smallest gap between the hardest and the runner-up positive or negative
/// over all anchors. Central differences straddle the mining switch when
/// this is comparable to the step, so such instances are redrawn.
fn mining_gap(x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let gap = |mut d: Vec<f64>| {
        d.sort_by(f64::total_cmp);
        if d.len() < 2 { f64::INFINITY } else { d[1] - d[0] }
    };
    (0..x.len())
        .map(|a| {
            let pos = (0..x.len()).filter(|&j| j != a && labels[j] == labels[a]).map(|j| -dist(&x[a], &x[j]));
            let neg = (0..x.len()).filter(|&j| labels[j] != labels[a]).map(|j| dist(&x[a], &x[j]));
            gap(pos.collect()).min(gap(neg.collect()))
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn triplet_gradient() {
    let mut r = rng(10);
    for trial in 0..30 {
        let (p, k, d) = (r.random_range(2..4), r.random_range(2..4), r.random_range(2..8));
        let labels = pk_labels(p, k);
        let x = loop {
            let x = random_matrix(&mut r, p * k, d, 1.0);
            if mining_gap(&x, &labels) > 1e-2 {
                break x;
            }
        };
        let analytic = triplet_loss_with_grad(&Matrix::from_rows(&x).unwrap(), &labels).unwrap();
        let numeric = numeric_grad(&flat(&x), STEP, |v| triplet_oracle(&unflat(v, d), &labels));
        let e = rel_error(analytic.grad.data(), &numeric);
        assert!(e < LOSS_TOL, "trial {trial}: relative error {e}");
    }
}

#[test]
fn cross_entropy_gradient() {
    let mut r = rng(11);
    for trial in 0..30 {
        let (n, k) = (r.random_range(1..8), r.random_range(2..6));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let z = random_matrix(&mut r, n, k, 3.0);
        let analytic = ce_loss_with_grad(&Matrix::from_rows(&z).unwrap(), &labels, 0.2).unwrap();
        let numeric = numeric_grad(&flat(&z), STEP, |v| ce_oracle(&unflat(v, k), &labels, 0.2));
        let e = rel_error(analytic.grad.data(), &numeric);
        assert!(e < LOSS_TOL, "trial {trial}: relative error {e}");
    }
}

/// Student rows grouped per sample (globals then locals), teacher rows two
/// per sample.
fn split_views(student: &[Vec<f64>], teacher: &[Vec<f64>], n_local: usize, b: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let v = 2 + n_local;
    (student[b * v..(b + 1) * v].to_vec(), teacher[2 * b..2 * b + 2].to_vec())
}

#[test]
fn self_distillation_gradient() {
    let mut r = rng(12);
    for trial in 0..30 {
        let (samples, n_local, e) = (r.random_range(1..3), r.random_range(0..3), r.random_range(2..8));
        let student = random_matrix(&mut r, samples * (2 + n_local), e, 0.5);
        let teacher = random_matrix(&mut r, samples * 2, e, 0.5);
        let center = CenterState {
            center: random_matrix(&mut r, 1, e, 0.2).remove(0),
            momentum: 0.9,
        };
        let (tau_s, tau_t) = (0.1, r.random_range(0.05..1.0));
        let analytic = dino_loss_with_grad(
            &Matrix::from_rows(&student).unwrap(),
            &Matrix::from_rows(&teacher).unwrap(),
            n_local,
            &center,
            tau_s,
            tau_t,
        )
        .unwrap();
        let numeric = numeric_grad(&flat(&student), STEP, |v| {
            let s = unflat(v, e);
            (0..samples)
                .map(|b| {
                    let (sv, tv) = split_views(&s, &teacher, n_local, b);
                    dino_oracle_sample(&sv, &tv, &center.center, tau_s, tau_t).0
                })
                .sum::<f64>()
                / samples as f64
        });
        let err = rel_error(analytic.grad.data(), &numeric);
        assert!(err < LOSS_TOL, "trial {trial}: relative error {err}");
    }
}

#[test]
fn distance_distillation_gradient() {
    let mut r = rng(13);
    for trial in 0..30 {
        let (samples, n_local, e) = (r.random_range(1..3), r.random_range(0..3), r.random_range(2..8));
        let student = random_matrix(&mut r, samples * (2 + n_local), e, 1.0);
        let teacher = random_matrix(&mut r, samples * 2, e, 1.0);
        let analytic = rmse_loss_with_grad(
            &Matrix::from_rows(&student).unwrap(),
            &Matrix::from_rows(&teacher).unwrap(),
            n_local,
        )
        .unwrap();
        let numeric = numeric_grad(&flat(&student), STEP, |v| {
            let s = unflat(v, e);
            (0..samples)
                .map(|b| {
                    let (sv, tv) = split_views(&s, &teacher, n_local, b);
                    rmse_oracle_sample(&sv, &tv).0
                })
                .sum::<f64>()
                / samples as f64
        });
        let err = rel_error(analytic.grad.data(), &numeric);
        assert!(err < LOSS_TOL, "trial {trial}: relative error {err}");
    }
}

fn small_config(lambda_s: f64) -> TrainConfig {
    let mut cfg = TrainConfig {
        lambda_s,
        pk: PkLayout { p: 2, k: 2 },
        seed: 4,
        ..Default::default()
    };
    cfg.encoder = TinyEncoderConfig {
        dim: 8,
        stage_channels: vec![4, 6],
        blocks_per_stage: 1,
        seed: 4,
    };
    cfg.augment.global_size = 32;
    cfg.augment.local_size = 16;
    cfg.augment.n_local = 1;
    cfg.ssl.projector = ProjectorConfig {
        hidden_dim: 12,
        out_dim: 6,
        hidden_layers: 2,
    };
    // A warmer teacher keeps the targets smooth enough to matter.
    cfg.ssl.temperature.tau_t_start = 0.2;
    cfg.ssl.temperature.tau_t_end = 0.2;
    cfg
}

fn random_image(r: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::from_planar(h, w, (0..3 * h * w).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

fn pick(r: &mut impl Rng, set: &ParamSet, count: usize) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| {
            let t = r.random_range(0..set.len());
            (t, r.random_range(0..set.tensor(t).numel()))
        })
        .collect()
}

/// The summed objective of one training step against perturbations of
/// every trainable group. Thousands of ReLU units sit between a first-layer
/// weight and the loss, so a smaller step keeps the differences off the
/// kinks.
#[test]
fn total_objective_gradient() {
    for lambda_s in [1.0, 0.0] {
        let cfg = small_config(lambda_s);
        let mut r = rng(14);
        let samples: Vec<Arc<ImageSample>> = (0..4)
            .map(|i| Arc::new(ImageSample::new(random_image(&mut r, 40, 36), i / 2, i % 2).unwrap()))
            .collect();
        let labels = vec![0, 0, 1, 1];
        let base = TrainState::new(&cfg, 3).unwrap();
        let mut probe = base.clone();
        let out = compute_step(&mut probe, &cfg, &samples, &labels, 5).unwrap();

        let total_at = |state: &TrainState<TinyEncoder>| {
            let mut s = state.clone();
            compute_step(&mut s, &cfg, &samples, &labels, 5).unwrap().record.l_total
        };
        type Access = fn(&mut TrainState<TinyEncoder>) -> &mut ParamSet;
        let groups: [(&str, &ParamSet, Access); 3] = [
            ("encoder", &out.grads.encoder, |s| s.pair.student.params_mut()),
            ("projector", &out.grads.projector, |s| s.pair.student_projector.params_mut()),
            ("classifier", &out.grads.classifier, |s| s.head.classifier.params_mut()),
        ];
        for (name, grads, access) in groups {
            if lambda_s == 0.0 && name == "projector" {
                assert!(grads.iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
                continue;
            }
            let coords = pick(&mut r, grads, 25);
            let analytic: Vec<f64> = coords.iter().map(|&(t, i)| grads.tensor(t).data()[i]).collect();
            let numeric: Vec<f64> = coords
                .iter()
                .map(|&(t, i)| {
                    let mut up = base.clone();
                    access(&mut up).tensor_mut(t).data_mut()[i] += NETWORK_STEP;
                    let mut down = base.clone();
                    access(&mut down).tensor_mut(t).data_mut()[i] -= NETWORK_STEP;
                    (total_at(&up) - total_at(&down)) / (2.0 * NETWORK_STEP)
                })
                .collect();
            let e = rel_error(&analytic, &numeric);
            assert!(e < LOSS_TOL, "lambda_s {lambda_s}, {name}: relative error {e}");
        }
    }
}

/// Similarity recomputed from the definition: eval-mode standardization,
/// L2 normalization, dot product.
fn similarity_oracle(enc: &TinyEncoder, bn: &BnNeck, a: &Image, b: &Image) -> f64 {
    let embed = |img: &Image| {
        let f = enc.forward(img);
        let y: Vec<f64> = (0..f.len())
            .map(|j| (f[j] - bn.running_mean[j]) / (bn.running_var[j] + VARIANCE_FLOOR).sqrt())
            .collect();
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        y.into_iter().map(|v| v / n).collect::<Vec<f64>>()
    };
    let (ea, eb) = (embed(a), embed(b));
    ea.iter().zip(&eb).map(|(x, y)| x * y).sum()
}

#[test]
fn saliency_gradient() {
    let mut r = rng(15);
    let enc = TinyEncoder::new(TinyEncoderConfig {
        dim: 8,
        stage_channels: vec![4, 6],
        blocks_per_stage: 1,
        seed: 2,
    })
    .unwrap();
    let mut bn = BnNeck::new(8);
    bn.running_mean = random_matrix(&mut r, 1, 8, 0.1).remove(0);
    bn.running_var = (0..8).map(|_| r.random_range(0.5..2.0)).collect();
    for trial in 0..3 {
        let q = random_image(&mut r, 16, 12);
        let g = random_image(&mut r, 16, 12);
        let res = saliency_pair(&enc, &bn, &q, &g).unwrap();
        assert!((res.score - similarity_oracle(&enc, &bn, &q, &g)).abs() < 1e-12);
        let nq = numeric_grad(q.data(), STEP, |v| {
            similarity_oracle(&enc, &bn, &Image::from_planar(16, 12, v.to_vec()).unwrap(), &g)
        });
        let ng = numeric_grad(g.data(), STEP, |v| {
            similarity_oracle(&enc, &bn, &q, &Image::from_planar(16, 12, v.to_vec()).unwrap())
        });
        let eq = rel_error(res.query_grad.data(), &nq);
        let eg = rel_error(res.gallery_grad.data(), &ng);
        assert!(eq < SALIENCY_TOL && eg < SALIENCY_TOL, "trial {trial}: {eq} {eg}");
    }
}
