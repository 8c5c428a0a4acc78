//! Training loop: view generation, the weighted total loss, AdamW with
//! warmup and decay, teacher EMA and center updates, logging and
//! checkpoints.
//!
//! Re-id losses use the first global view of each sample. The
//! self-distillation branch runs only when its weight is positive.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{global_view, make_view_bundle, AugmentConfig};
use crate::backbone::{Encoder, StudentTeacherPair, TinyEncoder, TinyEncoderConfig};
use crate::checkpoint::save_checkpoint;
use crate::dataio::{DatasetManifest, Split};
use crate::datamodel::{validate_labels, Image, ImageSample, PkLayout};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::reid_head::ReIdHead;
use crate::seeding::{domain, substream};
use crate::ssl_head::{
    dino_loss_with_grad, rmse_loss_with_grad, teacher_prob_matrix, CenterState, CollapseMonitor, Projector,
    ProjectorConfig, TemperatureSchedule,
};
use crate::tensor::{Matrix, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Step,
    Cosine,
}

/// Linear warmup followed by step or cosine decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrConfig {
    pub kind: ScheduleKind,
    /// Peak rate of the step schedule.
    pub base_lr: f64,
    pub gamma: f64,
    pub milestones: Vec<u32>,
    pub cosine_max_lr: f64,
    pub cosine_min_lr: f64,
    pub warmup_epochs: u32,
    /// Fraction of the peak rate at iteration 0.
    pub warmup_rate: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Step,
            base_lr: 5e-4,
            gamma: 0.1,
            milestones: vec![40, 70, 100],
            cosine_max_lr: 1e-4,
            cosine_min_lr: 1.6e-5,
            warmup_epochs: 10,
            warmup_rate: 0.099,
        }
    }
}

impl LrConfig {
    pub fn peak(&self) -> f64 {
        match self.kind {
            ScheduleKind::Step => self.base_lr,
            ScheduleKind::Cosine => self.cosine_max_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr.base_lr", self.base_lr)?;
        positive("lr.cosine_max_lr", self.cosine_max_lr)?;
        positive("lr.cosine_min_lr", self.cosine_min_lr)?;
        if self.cosine_min_lr > self.cosine_max_lr {
            return Err(Error::Config(format!(
                "lr.cosine_min_lr {} exceeds lr.cosine_max_lr {}",
                self.cosine_min_lr, self.cosine_max_lr
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("lr.gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("lr.milestones must be strictly increasing".into()));
        }
        if !(self.warmup_rate > 0.0 && self.warmup_rate <= 1.0) {
            return Err(Error::Config(format!(
                "lr.warmup_rate must lie in (0, 1], got {}",
                self.warmup_rate
            )));
        }
        Ok(())
    }
}

/// Learning rate at a global iteration.
pub fn learning_rate(iteration: u64, iters_per_epoch: u64, lr: &LrConfig, total_epochs: u32) -> f64 {
    let ipe = iters_per_epoch.max(1);
    let peak = lr.peak();
    let warm = lr.warmup_epochs as u64 * ipe;
    if iteration < warm {
        let frac = iteration as f64 / warm as f64;
        return peak * (lr.warmup_rate + (1.0 - lr.warmup_rate) * frac);
    }
    match lr.kind {
        ScheduleKind::Step => {
            let epoch = iteration / ipe;
            let passed = lr.milestones.iter().filter(|&&m| m as u64 <= epoch).count();
            peak * lr.gamma.powi(passed as i32)
        }
        ScheduleKind::Cosine => {
            let span = (total_epochs.saturating_sub(lr.warmup_epochs) as u64 * ipe).max(1);
            let progress = ((iteration - warm) as f64 / span as f64).min(1.0);
            lr.cosine_min_lr
                + (lr.cosine_max_lr - lr.cosine_min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslLossKind {
    Dino,
    Rmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub loss: SslLossKind,
    pub projector: ProjectorConfig,
    pub temperature: TemperatureSchedule,
    pub center_momentum: f64,
    /// When false the center stays at zero.
    pub centering: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            loss: SslLossKind::Dino,
            projector: ProjectorConfig::default(),
            temperature: TemperatureSchedule::default(),
            center_momentum: 0.9,
            centering: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_c: f64,
    pub lambda_t: f64,
    pub lambda_s: f64,
    pub epochs: u32,
    pub pk: PkLayout,
    pub lr: LrConfig,
    pub optimizer: AdamWConfig,
    pub ema_momentum: f64,
    pub label_smoothing: f64,
    pub augment: AugmentConfig,
    /// The encoder seed is taken from `seed`.
    pub encoder: TinyEncoderConfig,
    pub ssl: SslConfig,
    pub checkpoint_every: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_t: 1.0,
            lambda_s: 1.0,
            epochs: 120,
            pk: PkLayout::default(),
            lr: LrConfig::default(),
            optimizer: AdamWConfig::default(),
            ema_momentum: 0.9995,
            label_smoothing: 0.2,
            augment: AugmentConfig::default(),
            encoder: TinyEncoderConfig::default(),
            ssl: SslConfig::default(),
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for short CPU runs of a few hundred iterations on a randomly
    /// initialized encoder: a higher peak rate with a two-epoch warmup, a
    /// faster-moving teacher and a lighter self-distillation weight. The
    /// defaults assume a pretrained backbone and tens of thousands of
    /// iterations, and barely move a scratch encoder in 30 epochs.
    pub fn desk_scale() -> Self {
        let mut cfg = Self {
            epochs: 30,
            lambda_s: 0.1,
            ema_momentum: 0.99,
            ..Self::default()
        };
        cfg.lr.base_lr = 3e-3;
        cfg.lr.warmup_epochs = 2;
        cfg
    }

    /// Supervised-only configuration: no self-distillation, no local views.
    pub fn baseline(mut self) -> Self {
        self.lambda_s = 0.0;
        self.augment.n_local = 0;
        self
    }

    pub fn ssl_active(&self) -> bool {
        self.lambda_s > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_t", self.lambda_t),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.pk.p < 2 || self.pk.k < 2 {
            return Err(Error::Config(format!(
                "pk layout needs P >= 2 and K >= 2 for batch-hard mining, got {:?}",
                self.pk
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("ema_momentum {} outside [0, 1]", self.ema_momentum)));
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1]",
                self.label_smoothing
            )));
        }
        if !(0.0..=1.0).contains(&self.ssl.center_momentum) {
            return Err(Error::Config(format!(
                "ssl.center_momentum {} outside [0, 1]",
                self.ssl.center_momentum
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        self.lr.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        self.encoder_config().validate()?;
        self.ssl.projector.validate()?;
        self.ssl.temperature.validate()
    }

    pub fn encoder_config(&self) -> TinyEncoderConfig {
        TinyEncoderConfig {
            seed: self.seed,
            ..self.encoder.clone()
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: u64,
    pub epoch: u32,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_t")]
    pub l_t: f64,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lr: f64,
    pub tau_t: f64,
    pub entropy_pt: f64,
    #[serde(skip)]
    pub collapse_uniform: bool,
    #[serde(skip)]
    pub collapse_dominant: bool,
    #[serde(skip)]
    pub max_mean_pt: f64,
}

/// Append-only sequence of step records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn push(&mut self, record: TrainRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
        for r in &self.records {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<TrainRecord>, _>>()
            .map_err(csv_error)?;
        Ok(Self { records })
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("train log: {other:?}")),
    }
}

static TRAINING_ACTIVE: AtomicUsize = AtomicUsize::new(0);

/// True while any training run in this process is in progress.
pub fn training_active() -> bool {
    TRAINING_ACTIVE.load(Ordering::SeqCst) > 0
}

/// Marks training as active for its lifetime.
pub struct TrainingGuard(());

impl TrainingGuard {
    pub fn acquire() -> Self {
        TRAINING_ACTIVE.fetch_add(1, Ordering::SeqCst);
        TrainingGuard(())
    }
}

impl Drop for TrainingGuard {
    fn drop(&mut self) {
        TRAINING_ACTIVE.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState<E: Encoder> {
    pub pair: StudentTeacherPair<E>,
    pub head: ReIdHead,
    pub center: CenterState,
    pub optimizer: AdamW,
    pub monitor: CollapseMonitor,
    pub iteration: u64,
    /// Next epoch to run.
    pub epoch: u32,
    /// Number of steps that evaluated the self-distillation branch.
    pub ssl_evaluations: u64,
}

impl<E: Encoder> TrainState<E> {
    pub fn from_encoder(encoder: E, cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        let projector = Projector::new(encoder.dim(), cfg.ssl.projector, cfg.seed)?;
        let head = ReIdHead::new(num_classes, encoder.dim(), cfg.label_smoothing, cfg.seed);
        let center = CenterState::new(projector.out_dim(), cfg.ssl.center_momentum)?;
        let pair = StudentTeacherPair::new(encoder, projector, cfg.ema_momentum)?;
        let optimizer = AdamW::new(
            cfg.optimizer,
            &[
                pair.student.params(),
                pair.student_projector.params(),
                head.classifier.params(),
            ],
        );
        Ok(Self {
            pair,
            head,
            center,
            optimizer,
            monitor: CollapseMonitor::default(),
            iteration: 0,
            epoch: 0,
            ssl_evaluations: 0,
        })
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            encoder: self.pair.student.params().zeros_like(),
            projector: self.pair.student_projector.params().zeros_like(),
            classifier: self.head.classifier.params().zeros_like(),
        }
    }
}

impl TrainState<TinyEncoder> {
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let encoder = TinyEncoder::new(cfg.encoder_config())?;
        Self::from_encoder(encoder, cfg, num_classes)
    }
}

/// Gradients of the student-side parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: ParamSet,
    pub projector: ParamSet,
    pub classifier: ParamSet,
}

/// Losses and gradients of one batch, before any parameter update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: TrainRecord,
    pub grads: Gradients,
    /// Teacher projections of the global views, for the center update.
    pub teacher_outputs: Option<Matrix>,
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Matrix> {
    Matrix::from_rows(rows)
}

/// Forward and backward pass for one P x K batch. Updates bottleneck
/// running statistics and the collapse monitor; parameters are untouched.
pub fn compute_step<E: Encoder>(
    state: &mut TrainState<E>,
    cfg: &TrainConfig,
    samples: &[Arc<ImageSample>],
    labels: &[usize],
    iters_per_epoch: u64,
) -> Result<StepOutput> {
    validate_labels(labels, cfg.pk)?;
    if samples.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples but {} labels",
            samples.len(),
            labels.len()
        )));
    }
    let ssl = cfg.ssl_active();
    let n_local = if ssl { cfg.augment.n_local } else { 0 };
    let views_per_sample = if ssl { 2 + n_local } else { 1 };

    let mut student_views: Vec<Image> = Vec::with_capacity(samples.len() * views_per_sample);
    let mut teacher_views: Vec<Image> = Vec::new();
    for (b, sample) in samples.iter().enumerate() {
        let mut rng = substream(cfg.seed, &[domain::VIEWS, state.iteration, b as u64]);
        if ssl {
            let bundle = make_view_bundle(Arc::clone(sample), &cfg.augment, &mut rng)?;
            teacher_views.extend(bundle.globals.iter().cloned());
            student_views.extend(bundle.globals);
            student_views.extend(bundle.locals);
        } else {
            student_views.push(global_view(sample.pixels(), &cfg.augment, &mut rng).0);
        }
    }

    let mut grads = state.zero_grads();
    let mut features = Vec::with_capacity(student_views.len());
    let mut tapes = Vec::with_capacity(student_views.len());
    for view in &student_views {
        let (f, tape) = state.pair.student.forward_with_tape(view);
        features.push(f);
        tapes.push(tape);
    }
    let all_features = rows_to_matrix(&features)?;
    let first_globals: Vec<usize> = (0..samples.len()).map(|b| b * views_per_sample).collect();
    let x = all_features.select_rows(&first_globals);

    let mut classifier_grads = state.head.classifier.params().zeros_like();
    let reid = state.head.train_step(&x, labels, &mut classifier_grads)?;
    classifier_grads.scale(cfg.lambda_c);
    grads.classifier = classifier_grads;

    let mut feature_grads = Matrix::zeros(all_features.rows(), all_features.cols());
    for (b, &row) in first_globals.iter().enumerate() {
        let gc = reid.grad_from_classification.row(b);
        let gt = reid.grad_from_triplet.row(b);
        for (j, g) in feature_grads.row_mut(row).iter_mut().enumerate() {
            *g += cfg.lambda_c * gc[j] + cfg.lambda_t * gt[j];
        }
    }

    let tau_t = cfg.ssl.temperature.tau_t(state.epoch);
    let mut l_s = 0.0;
    let mut entropy_pt = 0.0;
    let mut collapse = None;
    let mut teacher_outputs = None;
    if ssl {
        state.ssl_evaluations += 1;
        let (gs, proj_tape) = state.pair.student_projector.forward_with_tape(&all_features)?;
        let teacher_features: Vec<Vec<f64>> = teacher_views.iter().map(|v| state.pair.teacher.forward(v)).collect();
        let gt = state.pair.teacher_projector.forward(&rows_to_matrix(&teacher_features)?)?;
        let loss = match cfg.ssl.loss {
            SslLossKind::Dino => dino_loss_with_grad(
                &gs,
                &gt,
                n_local,
                &state.center,
                cfg.ssl.temperature.tau_s,
                tau_t,
            )?,
            SslLossKind::Rmse => rmse_loss_with_grad(&gs, &gt, n_local)?,
        };
        l_s = loss.loss;
        let mut d_gs = loss.grad;
        d_gs.data_mut().iter_mut().for_each(|g| *g *= cfg.lambda_s);
        let d_features = state.pair.student_projector.backward(&proj_tape, &d_gs, &mut grads.projector);
        for (a, b) in feature_grads.data_mut().iter_mut().zip(d_features.data()) {
            *a += b;
        }
        let probs = teacher_prob_matrix(&gt, &state.center, tau_t);
        let status = state.monitor.observe(&probs);
        entropy_pt = status.mean_entropy;
        collapse = Some(status);
        teacher_outputs = Some(gt);
    }

    for (row, tape) in tapes.iter().enumerate() {
        let g = feature_grads.row(row);
        if g.iter().any(|v| *v != 0.0) {
            state.pair.student.backward(tape, g, &mut grads.encoder, false);
        }
    }

    let l_total = cfg.lambda_c * reid.classification + cfg.lambda_t * reid.triplet + cfg.lambda_s * l_s;
    let record = TrainRecord {
        iter: state.iteration,
        epoch: state.epoch,
        l_c: reid.classification,
        l_t: reid.triplet,
        l_s,
        l_total,
        lr: learning_rate(state.iteration, iters_per_epoch, &cfg.lr, cfg.epochs),
        tau_t,
        entropy_pt,
        collapse_uniform: collapse.is_some_and(|s| s.uniform),
        collapse_dominant: collapse.is_some_and(|s| s.dominant),
        max_mean_pt: collapse.map_or(0.0, |s| s.max_mean_prob),
    };
    check_finite(&record)?;
    Ok(StepOutput {
        record,
        grads,
        teacher_outputs,
    })
}

fn check_finite(r: &TrainRecord) -> Result<()> {
    let values = [("L_c", r.l_c), ("L_t", r.l_t), ("L_s", r.l_s), ("L_total", r.l_total)];
    if let Some((name, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            iteration: r.iter,
            detail: format!(
                "{name} = {v} (L_c={}, L_t={}, L_s={}, lr={}, tau_t={})",
                r.l_c, r.l_t, r.l_s, r.lr, r.tau_t
            ),
        });
    }
    Ok(())
}

/// AdamW update of the student encoder, student projector and classifier.
pub fn optimizer_step<E: Encoder>(state: &mut TrainState<E>, grads: &Gradients, lr: f64) -> Result<()> {
    let TrainState {
        pair, head, optimizer, ..
    } = state;
    optimizer.update(
        &mut [
            pair.student.params_mut(),
            pair.student_projector.params_mut(),
            head.classifier.params_mut(),
        ],
        &[&grads.encoder, &grads.projector, &grads.classifier],
        lr,
    )
}

/// Teacher EMA and center update; the only writers of teacher state.
pub fn teacher_step<E: Encoder>(state: &mut TrainState<E>, cfg: &TrainConfig, teacher_outputs: Option<&Matrix>) -> Result<()> {
    state.pair.ema_update()?;
    if let (Some(g), true) = (teacher_outputs, cfg.ssl.centering) {
        state.center.update(g)?;
    }
    Ok(())
}

/// Full training step: gradients, optimizer, EMA, center, counters.
pub fn train_step<E: Encoder>(
    state: &mut TrainState<E>,
    cfg: &TrainConfig,
    samples: &[Arc<ImageSample>],
    labels: &[usize],
    iters_per_epoch: u64,
) -> Result<TrainRecord> {
    let out = compute_step(state, cfg, samples, labels, iters_per_epoch)?;
    optimizer_step(state, &out.grads, out.record.lr)?;
    teacher_step(state, cfg, out.teacher_outputs.as_ref())?;
    state.iteration += 1;
    Ok(out.record)
}

/// Training samples grouped by dense identity.
#[derive(Debug, Clone)]
pub struct IdentityPool {
    pub samples: Vec<Arc<ImageSample>>,
    pub by_identity: BTreeMap<usize, Vec<usize>>,
}

impl IdentityPool {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        let samples: Vec<Arc<ImageSample>> = samples.into_iter().map(Arc::new).collect();
        let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_identity.entry(s.identity()).or_default().push(i);
        }
        Self { samples, by_identity }
    }

    fn eligible(&self, layout: PkLayout) -> Vec<usize> {
        self.by_identity
            .iter()
            .filter(|(_, v)| v.len() >= layout.k)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn iters_per_epoch(&self, layout: PkLayout) -> usize {
        self.eligible(layout).len() / layout.p
    }

    /// Shuffled P x K batches covering each eligible identity at most once.
    pub fn epoch_batches(&self, layout: PkLayout, seed: u64, epoch: u32) -> Result<Vec<Vec<usize>>> {
        let mut ids = self.eligible(layout);
        if ids.len() < layout.p {
            return Err(Error::Data(format!(
                "{} identities have at least {} training images, a batch needs {}",
                ids.len(),
                layout.k,
                layout.p
            )));
        }
        let mut rng = substream(seed, &[domain::SAMPLER, epoch as u64]);
        ids.shuffle(&mut rng);
        let mut batches = Vec::new();
        for chunk in ids.chunks_exact(layout.p) {
            let mut batch = Vec::with_capacity(layout.batch_size());
            for id in chunk {
                let mut pool = self.by_identity[id].clone();
                let (picked, _) = pool.partial_shuffle(&mut rng, layout.k);
                batch.extend_from_slice(picked);
            }
            batches.push(batch);
        }
        Ok(batches)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for the log, checkpoints and effective config.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (for staged runs).
    pub stop_after_epoch: Option<u32>,
    /// Records already produced before a resume.
    pub prior_log: TrainLog,
    /// Called after every step.
    pub on_step: Option<fn(&TrainRecord)>,
}

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";

pub fn epoch_checkpoint_name(epoch: u32) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState<TinyEncoder>,
    pub log: TrainLog,
}

/// Trains from scratch, or continues `resume`, on the manifest's train split.
pub fn run_training(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    resume: Option<TrainState<TinyEncoder>>,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = IdentityPool::new(manifest.load_samples(Split::Train)?);
    let num_classes = manifest.num_train_identities();
    let mut state = match resume {
        Some(s) => {
            if s.head.classifier.classes() != num_classes {
                return Err(Error::Data(format!(
                    "checkpoint classifies {} identities, manifest has {}",
                    s.head.classifier.classes(),
                    num_classes
                )));
            }
            s
        }
        None => TrainState::new(cfg, num_classes)?,
    };
    run_training_on_pool(cfg, &pool, &mut state, opts).map(|log| TrainOutcome { state, log })
}

/// Training loop over an in-memory pool.
pub fn run_training_on_pool(
    cfg: &TrainConfig,
    pool: &IdentityPool,
    state: &mut TrainState<TinyEncoder>,
    opts: RunOptions,
) -> Result<TrainLog> {
    let _guard = TrainingGuard::acquire();
    let ipe = pool.iters_per_epoch(cfg.pk) as u64;
    let mut log = opts.prior_log;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let last = opts.stop_after_epoch.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    while state.epoch < last {
        let epoch = state.epoch;
        for batch in pool.epoch_batches(cfg.pk, cfg.seed, epoch)? {
            let samples: Vec<Arc<ImageSample>> = batch.iter().map(|&i| Arc::clone(&pool.samples[i])).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.identity()).collect();
            let record = train_step(state, cfg, &samples, &labels, ipe)?;
            if let Some(f) = opts.on_step {
                f(&record);
            }
            log.push(record);
        }
        state.epoch = epoch + 1;
        if let Some(dir) = &opts.out_dir {
            let done = state.epoch;
            if done % cfg.checkpoint_every == 0 || done == last {
                save_checkpoint(dir.join("checkpoints").join(epoch_checkpoint_name(done)), state, cfg)?;
                log.write_csv(dir.join(TRAIN_LOG_FILE))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(dir.join(FINAL_CHECKPOINT), state, cfg)?;
        log.write_csv(dir.join(TRAIN_LOG_FILE))?;
    }
    Ok(log)
}
