//! Self-distillation head: MLP projectors, teacher centering and sharpening,
//! the cross-entropy matching loss and its RMSE alternative.
//!
//! Views of one sample are laid out globals first, then locals. For a batch
//! the student projection matrix stacks `2 + L` rows per sample and the
//! teacher matrix stacks 2 rows per sample, both in sample order.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::ViewBundle;
use crate::backbone::{Encoder, StudentTeacherPair};
use crate::error::{Error, Result};
use crate::nn::{entropy, gelu, gelu_grad, linear_backward, linear_forward, log_softmax_scaled, softmax_scaled};
use crate::reid_head::LossGrad;
use crate::seeding::{domain, substream};
use crate::tensor::{Matrix, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub hidden_layers: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 512,
            out_dim: 256,
            hidden_layers: 4,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.out_dim == 0 || self.hidden_layers == 0 {
            return Err(Error::Config(format!(
                "projector needs positive widths and at least one hidden layer, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Parameter count for a projector fed `in_dim` features.
    pub fn param_count(&self, in_dim: usize) -> usize {
        let dims = self.layer_dims(in_dim);
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layer_dims(&self, in_dim: usize) -> Vec<usize> {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.hidden_layers));
        dims.push(self.out_dim);
        dims
    }
}

/// Hidden GELU layers followed by a plain linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    config: ProjectorConfig,
    dims: Vec<usize>,
    params: ParamSet,
}

/// Per-layer inputs and pre-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct ProjectorTape {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl Projector {
    pub fn new(in_dim: usize, config: ProjectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if in_dim == 0 {
            return Err(Error::Config("projector input dimension must be positive".into()));
        }
        let dims = config.layer_dims(in_dim);
        let layers = dims.len() - 1;
        let mut params = ParamSet::new();
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = if l + 1 < layers {
                (2.0 / fan_in as f64).sqrt()
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = substream(seed, &[domain::INIT_PROJECTOR, l as u64]);
            let weight = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            params.push(format!("fc{l}.weight"), Tensor::from_vec(&[fan_out, fan_in], weight)?);
            params.push(format!("fc{l}.bias"), Tensor::zeros(&[fan_out]));
        }
        Ok(Self { config, dims, params })
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.config
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "projector expects {} inputs, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_with_tape(x).map(|(y, _)| y)
    }

    pub fn forward_with_tape(&self, x: &Matrix) -> Result<(Matrix, ProjectorTape)> {
        self.check_input(x)?;
        let layers = self.dims.len() - 1;
        let mut tape = ProjectorTape {
            inputs: Vec::with_capacity(layers),
            pre_activations: Vec::with_capacity(layers),
        };
        let mut h = x.clone();
        for l in 0..layers {
            let z = linear_forward(
                &h,
                self.params.tensor(2 * l).data(),
                self.params.tensor(2 * l + 1).data(),
                self.dims[l + 1],
            );
            tape.inputs.push(h);
            if l + 1 < layers {
                let mut a = z.clone();
                a.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
                tape.pre_activations.push(z);
                h = a;
            } else {
                h = z;
            }
        }
        Ok((h, tape))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, tape: &ProjectorTape, grad_out: &Matrix, grads: &mut ParamSet) -> Matrix {
        let layers = self.dims.len() - 1;
        let mut g = grad_out.clone();
        for l in (0..layers).rev() {
            if l + 1 < layers {
                for (gv, z) in g.data_mut().iter_mut().zip(tape.pre_activations[l].data()) {
                    *gv *= gelu_grad(*z);
                }
            }
            let (gw, gb) = grads.pair_mut(2 * l);
            g = linear_backward(
                &tape.inputs[l],
                self.params.tensor(2 * l).data(),
                &g,
                gw.data_mut(),
                gb.data_mut(),
            );
        }
        g
    }
}

/// Running center of teacher outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterState {
    pub center: Vec<f64>,
    pub momentum: f64,
}

impl CenterState {
    pub fn new(dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Range(format!("center momentum {momentum} outside [0, 1]")));
        }
        Ok(Self {
            center: vec![0.0; dim],
            momentum,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `c <- m c + (1 - m) mean(teacher_outputs)`.
    pub fn update(&mut self, teacher_outputs: &Matrix) -> Result<()> {
        update_center(self, teacher_outputs)
    }
}

pub fn update_center(state: &mut CenterState, teacher_outputs: &Matrix) -> Result<()> {
    let n = teacher_outputs.rows();
    if n == 0 {
        return Err(Error::ShapeMismatch("center update needs at least one row".into()));
    }
    if teacher_outputs.cols() != state.dim() {
        return Err(Error::ShapeMismatch(format!(
            "center has {} dims, teacher outputs {}",
            state.dim(),
            teacher_outputs.cols()
        )));
    }
    let mut mean = vec![0.0; state.dim()];
    for row in teacher_outputs.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let m = state.momentum;
    for (c, s) in state.center.iter_mut().zip(mean) {
        *c = m * *c + (1.0 - m) * (s / n as f64);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub warmup_epochs: u32,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau_s: 0.1,
            tau_t_start: 0.0005,
            tau_t_end: 0.001,
            warmup_epochs: 10,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_s", self.tau_s),
            ("tau_t_start", self.tau_t_start),
            ("tau_t_end", self.tau_t_end),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("temperature {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Teacher temperature for a 0-based epoch.
    pub fn tau_t(&self, epoch: u32) -> f64 {
        if epoch >= self.warmup_epochs {
            return self.tau_t_end;
        }
        let frac = epoch as f64 / self.warmup_epochs as f64;
        self.tau_t_start + (self.tau_t_end - self.tau_t_start) * frac
    }
}

pub fn student_probs(g: &[f64], tau_s: f64) -> Vec<f64> {
    softmax_scaled(g, 1.0 / tau_s)
}

pub fn teacher_probs(g: &[f64], center: &CenterState, tau_t: f64) -> Vec<f64> {
    let shifted: Vec<f64> = g.iter().zip(&center.center).map(|(a, c)| a - c).collect();
    softmax_scaled(&shifted, 1.0 / tau_t)
}

/// Teacher probabilities for every row of `teacher_outputs`.
pub fn teacher_prob_matrix(teacher_outputs: &Matrix, center: &CenterState, tau_t: f64) -> Matrix {
    let mut out = Matrix::zeros(teacher_outputs.rows(), teacher_outputs.cols());
    for i in 0..teacher_outputs.rows() {
        out.row_mut(i)
            .copy_from_slice(&teacher_probs(teacher_outputs.row(i), center, tau_t));
    }
    out
}

/// Number of (teacher view, student view) terms for `n_local` locals.
pub fn pair_count(n_local: usize) -> usize {
    2 * (n_local + 1)
}

fn check_views(student: &Matrix, teacher: &Matrix, n_local: usize) -> Result<usize> {
    let views = 2 + n_local;
    if teacher.rows() == 0 || teacher.rows() % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "teacher matrix needs two rows per sample, got {}",
            teacher.rows()
        )));
    }
    let samples = teacher.rows() / 2;
    if student.rows() != samples * views {
        return Err(Error::ShapeMismatch(format!(
            "student matrix has {} rows, expected {} ({} samples x {} views)",
            student.rows(),
            samples * views,
            samples,
            views
        )));
    }
    if student.cols() != teacher.cols() {
        return Err(Error::ShapeMismatch(format!(
            "student dim {} differs from teacher dim {}",
            student.cols(),
            teacher.cols()
        )));
    }
    Ok(samples)
}

/// Cross-entropy between centered, sharpened teacher distributions on the
/// global views and student distributions on every other view, normalized
/// by the pair count and averaged over samples. The gradient is with
/// respect to the student projections only.
pub fn dino_loss_with_grad(
    student: &Matrix,
    teacher: &Matrix,
    n_local: usize,
    center: &CenterState,
    tau_s: f64,
    tau_t: f64,
) -> Result<LossGrad> {
    let samples = check_views(student, teacher, n_local)?;
    if center.dim() != teacher.cols() {
        return Err(Error::ShapeMismatch(format!(
            "center has {} dims, projections {}",
            center.dim(),
            teacher.cols()
        )));
    }
    let views = 2 + n_local;
    let scale = 1.0 / (pair_count(n_local) * samples) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    for b in 0..samples {
        let pt: Vec<Vec<f64>> = (0..2)
            .map(|t| teacher_probs(teacher.row(2 * b + t), center, tau_t))
            .collect();
        for v in 0..views {
            let row = b * views + v;
            let log_ps = log_softmax_scaled(student.row(row), 1.0 / tau_s);
            let ps = student_probs(student.row(row), tau_s);
            for (t, target) in pt.iter().enumerate() {
                if t == v {
                    continue;
                }
                loss -= scale * target.iter().zip(&log_ps).map(|(p, l)| p * l).sum::<f64>();
                for ((g, s), p) in grad.row_mut(row).iter_mut().zip(&ps).zip(target) {
                    *g += scale * (s - p) / tau_s;
                }
            }
        }
    }
    Ok(LossGrad { loss, grad })
}

pub fn dino_loss_matrices(
    student: &Matrix,
    teacher: &Matrix,
    n_local: usize,
    center: &CenterState,
    tau_s: f64,
    tau_t: f64,
) -> Result<f64> {
    dino_loss_with_grad(student, teacher, n_local, center, tau_s, tau_t).map(|lg| lg.loss)
}

/// Sum of Euclidean distances between student and teacher projections over
/// the same pairs, with the same normalization as the cross-entropy loss.
pub fn rmse_loss_with_grad(student: &Matrix, teacher: &Matrix, n_local: usize) -> Result<LossGrad> {
    let samples = check_views(student, teacher, n_local)?;
    let views = 2 + n_local;
    let scale = 1.0 / (pair_count(n_local) * samples) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    for b in 0..samples {
        for v in 0..views {
            let row = b * views + v;
            for t in 0..2 {
                if t == v {
                    continue;
                }
                let target = teacher.row(2 * b + t);
                let diff: Vec<f64> = student.row(row).iter().zip(target).map(|(s, g)| s - g).collect();
                let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
                loss += scale * norm;
                if norm > 0.0 {
                    for (g, d) in grad.row_mut(row).iter_mut().zip(&diff) {
                        *g += scale * d / norm;
                    }
                }
            }
        }
    }
    Ok(LossGrad { loss, grad })
}

pub fn rmse_loss_matrices(student: &Matrix, teacher: &Matrix, n_local: usize) -> Result<f64> {
    rmse_loss_with_grad(student, teacher, n_local).map(|lg| lg.loss)
}

/// Projects every view of a bundle through both branches.
pub fn project_bundle<E: Encoder>(bundle: &ViewBundle, pair: &StudentTeacherPair<E>) -> Result<(Matrix, Matrix)> {
    let views: Vec<_> = bundle.all_views().cloned().collect();
    let student_feat = pair.student.forward_batch(&views);
    let student_feat = Matrix::from_vec(student_feat.rows(), student_feat.dim(), student_feat.data().to_vec())?;
    let teacher_feat = pair.teacher.forward_batch(&bundle.globals);
    let teacher_feat = Matrix::from_vec(teacher_feat.rows(), teacher_feat.dim(), teacher_feat.data().to_vec())?;
    Ok((
        pair.student_projector.forward(&student_feat)?,
        pair.teacher_projector.forward(&teacher_feat)?,
    ))
}

/// Self-distillation loss of one view bundle.
pub fn dino_loss<E: Encoder>(
    bundle: &ViewBundle,
    pair: &StudentTeacherPair<E>,
    center: &CenterState,
    temps: &TemperatureSchedule,
    epoch: u32,
) -> Result<f64> {
    let (s, t) = project_bundle(bundle, pair)?;
    dino_loss_matrices(&s, &t, bundle.locals.len(), center, temps.tau_s, temps.tau_t(epoch))
}

/// RMSE alternative of one view bundle.
pub fn rmse_loss<E: Encoder>(bundle: &ViewBundle, pair: &StudentTeacherPair<E>) -> Result<f64> {
    let (s, t) = project_bundle(bundle, pair)?;
    rmse_loss_matrices(&s, &t, bundle.locals.len())
}

/// Outcome of one collapse-monitor observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollapseStatus {
    pub mean_entropy: f64,
    pub max_mean_prob: f64,
    pub uniform: bool,
    pub dominant: bool,
}

/// Watches teacher distributions for the two collapse modes: near-uniform
/// outputs sustained over a window, and one dimension dominating.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseMonitor {
    pub entropy_fraction: f64,
    pub window: usize,
    pub dominance_threshold: f64,
    streak: usize,
}

impl Default for CollapseMonitor {
    fn default() -> Self {
        Self {
            entropy_fraction: 0.99,
            window: 50,
            dominance_threshold: 0.9,
            streak: 0,
        }
    }
}

impl CollapseMonitor {
    pub fn streak(&self) -> usize {
        self.streak
    }

    pub fn set_streak(&mut self, streak: usize) {
        self.streak = streak;
    }

    /// `probs` holds one teacher distribution per row.
    pub fn observe(&mut self, probs: &Matrix) -> CollapseStatus {
        let (n, e) = (probs.rows().max(1), probs.cols());
        let mean_entropy = probs.iter_rows().map(entropy).sum::<f64>() / n as f64;
        let mut mean_p = vec![0.0; e];
        for row in probs.iter_rows() {
            for (m, p) in mean_p.iter_mut().zip(row) {
                *m += p / n as f64;
            }
        }
        let max_mean_prob = mean_p.iter().copied().fold(0.0, f64::max);
        if mean_entropy > self.entropy_fraction * (e as f64).ln() {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        CollapseStatus {
            mean_entropy,
            max_mean_prob,
            uniform: self.streak >= self.window,
            dominant: max_mean_prob > self.dominance_threshold,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn default_projector_shape() {
        let p = Projector::new(64, ProjectorConfig::default(), 0).unwrap();
        assert_eq!(p.params().len(), 10);
        assert_eq!(p.params().numel(), ProjectorConfig::default().param_count(64));
        let y = p.forward(&Matrix::zeros(3, 64)).unwrap();
        assert_eq!((y.rows(), y.cols()), (3, 256));
        assert!(p.forward(&Matrix::zeros(1, 63)).is_err());
    }

    #[test]
    fn projector_backward_matches_finite_differences() {
        let cfg = ProjectorConfig {
            hidden_dim: 6,
            out_dim: 4,
            hidden_layers: 4,
        };
        let p = Projector::new(5, cfg, 3).unwrap();
        let x = Matrix::from_vec(2, 5, (0..10).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = Matrix::from_vec(2, 4, (0..8).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let objective = |p: &Projector, x: &Matrix| -> f64 {
            let y = p.forward(x).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = p.forward_with_tape(&x).unwrap();
        let mut grads = p.params().zeros_like();
        let dx = p.backward(&tape, &w, &mut grads);
        let h = 1e-5;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&p, &xp) - objective(&p, &xm)) / (2.0 * h);
            assert!(close(fd, dx.data()[i], 1e-6), "{fd} vs {}", dx.data()[i]);
        }
        for t in 0..p.params().len() {
            for i in 0..p.params().tensor(t).numel() {
                let mut pp = p.clone();
                pp.params_mut().tensor_mut(t).data_mut()[i] += h;
                let mut pm = p.clone();
                pm.params_mut().tensor_mut(t).data_mut()[i] -= h;
                let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * h);
                assert!(close(fd, grads.tensor(t).data()[i], 1e-6));
            }
        }
    }

    #[test]
    fn student_probs_values() {
        let p = student_probs(&[1.0, 0.0], 0.1);
        assert!(close(p[0], 0.999_954_6, 1e-7) && close(p[1], 0.000_045_4, 1e-7));
        assert_eq!(student_probs(&[3.0; 5], 0.1), vec![0.2; 5]);
        let sharp = student_probs(&[0.2, 0.5, 0.1], 1e-4);
        assert!(close(sharp[1], 1.0, 1e-12));
    }

    #[test]
    fn centering_cancels_signal() {
        let mut c = CenterState::new(4, 0.9).unwrap();
        c.center = vec![1.0, 0.0, 0.0, 0.0];
        for tau in [0.0005, 0.04, 10.0] {
            for p in teacher_probs(&[1.0, 0.0, 0.0, 0.0], &c, tau) {
                assert!(close(p, 0.25, 1e-15));
            }
        }
        let neutral = CenterState::new(3, 0.9).unwrap();
        assert_eq!(teacher_probs(&[0.1, 0.4, -0.2], &neutral, 0.3), student_probs(&[0.1, 0.4, -0.2], 0.3));
    }

    #[test]
    fn center_update_values() {
        let batch = Matrix::from_rows(&[vec![0.5, 1.5], vec![1.5, 0.5]]).unwrap();
        let mut c = CenterState::new(2, 0.9).unwrap();
        c.update(&batch).unwrap();
        assert!(close(c.center[0], 0.1, 1e-15) && close(c.center[1], 0.1, 1e-15));
        let mut frozen = CenterState::new(2, 1.0).unwrap();
        frozen.center = vec![0.3, -0.3];
        frozen.update(&batch).unwrap();
        assert_eq!(frozen.center, vec![0.3, -0.3]);
        let mut replace = CenterState::new(2, 0.0).unwrap();
        replace.update(&batch).unwrap();
        assert_eq!(replace.center, vec![1.0, 1.0]);
    }

    #[test]
    fn teacher_temperature_schedule() {
        let s = TemperatureSchedule::default();
        assert_eq!(s.tau_t(0), 0.0005);
        assert!(close(s.tau_t(5), 0.00075, 1e-15));
        assert_eq!(s.tau_t(10), 0.001);
        assert_eq!(s.tau_t(400), 0.001);
    }

    #[test]
    fn uniform_teacher_and_student_give_log_e() {
        let student = Matrix::zeros(4, 4);
        let teacher = Matrix::zeros(2, 4);
        let c = CenterState::new(4, 0.9).unwrap();
        let loss = dino_loss_matrices(&student, &teacher, 2, &c, 0.1, 0.0005).unwrap();
        assert!(close(loss, 4f64.ln(), 1e-12));
    }

    #[test]
    fn rmse_single_pair_value() {
        // L = 0: two globals, two pairs (g1 -> g2, g2 -> g1)
        let student = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let teacher = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let loss = rmse_loss_matrices(&student, &teacher, 0).unwrap();
        assert!(close(loss, 2f64.sqrt(), 1e-12));
        assert_eq!(rmse_loss_matrices(&teacher, &teacher, 0).unwrap(), 0.0);
    }

    #[test]
    fn view_layout_errors() {
        let c = CenterState::new(3, 0.9).unwrap();
        let r = dino_loss_matrices(&Matrix::zeros(5, 3), &Matrix::zeros(2, 3), 2, &c, 0.1, 0.04);
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn monitor_flags_uniform_after_window() {
        let mut m = CollapseMonitor::default();
        let uniform = Matrix::from_vec(2, 4, vec![0.25; 8]).unwrap();
        for step in 1..=50 {
            let s = m.observe(&uniform);
            assert_eq!(s.uniform, step >= 50);
            assert!(!s.dominant);
        }
        let peaked = Matrix::from_rows(&[vec![0.97, 0.01, 0.01, 0.01]]).unwrap();
        let s = m.observe(&peaked);
        assert!(s.dominant && !s.uniform);
        assert_eq!(m.streak(), 0);
    }
}
