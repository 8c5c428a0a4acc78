//! Encoders and the student/teacher pair.
//!
//! The teacher is a structurally identical copy of the student whose
//! parameters only ever move through [`ema_update`]:
//!
//! ```text
//! theta_t <- lambda * theta_t + (1 - lambda) * theta_s
//! ```

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingMatrix, Image};
use crate::error::{Error, Result};
use crate::nn::{conv2d_backward, conv2d_forward, Conv2dSpec};
use crate::seeding::{domain, substream};
use crate::ssl_head::Projector;
use crate::tensor::{ParamSet, Tensor};

/// A differentiable image encoder producing a `dim()`-dimensional feature.
///
/// `forward` must be deterministic for fixed parameters, and the order of
/// `params()` must never change after construction.
pub trait Encoder: Clone + Send + Sync {
    /// Activations kept from a forward pass for the matching backward pass.
    type Tape: Send;

    fn dim(&self) -> usize;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    fn forward(&self, image: &Image) -> Vec<f64> {
        self.forward_with_tape(image).0
    }

    fn forward_with_tape(&self, image: &Image) -> (Vec<f64>, Self::Tape);

    /// Accumulates parameter gradients into `grads` (same layout as
    /// `params()`), and returns the input gradient when `want_input` is set.
    fn backward(
        &self,
        tape: &Self::Tape,
        grad_out: &[f64],
        grads: &mut ParamSet,
        want_input: bool,
    ) -> Option<Image>;

    fn forward_batch(&self, images: &[Image]) -> EmbeddingMatrix {
        let d = self.dim();
        let mut data = Vec::with_capacity(images.len() * d);
        for img in images {
            data.extend(self.forward(img));
        }
        EmbeddingMatrix::new(images.len(), d, data).expect("encoder output has dim() entries")
    }
}

/// Fixed input standardization applied before the first convolution.
const INPUT_MEAN: f64 = 0.5;
const INPUT_STD: f64 = 0.25;

/// Configuration of the small reference encoder.
///
/// Each stage opens with a stride-2 3×3 convolution followed by
/// `blocks_per_stage - 1` stride-1 3×3 convolutions, all with ReLU. Global
/// average pooling and a linear map to `dim` finish the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyEncoderConfig {
    pub dim: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub seed: u64,
}

impl Default for TinyEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            stage_channels: vec![16, 32, 64, 64],
            blocks_per_stage: 1,
            seed: 0,
        }
    }
}

/// Parameter budget of the reference encoder.
pub const TINY_ENCODER_MAX_PARAMS: usize = 200_000;

impl TinyEncoderConfig {
    fn conv_specs(&self) -> Vec<Conv2dSpec> {
        let mut specs = Vec::new();
        let mut in_channels = Image::CHANNELS;
        for &c in &self.stage_channels {
            for block in 0..self.blocks_per_stage {
                specs.push(Conv2dSpec {
                    in_channels,
                    out_channels: c,
                    kernel: 3,
                    stride: if block == 0 { 2 } else { 1 },
                    padding: 1,
                });
                in_channels = c;
            }
        }
        specs
    }

    fn last_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&Image::CHANNELS)
    }

    /// Weights plus biases over every layer.
    pub fn param_count(&self) -> usize {
        self.conv_specs().iter().map(Conv2dSpec::param_count).sum::<usize>()
            + self.last_channels() * self.dim
            + self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::Config(format!("encoder dim must be at least 8, got {}", self.dim)));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("stage_channels must be non-empty and positive".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be at least 1".into()));
        }
        let n = self.param_count();
        if n > TINY_ENCODER_MAX_PARAMS {
            return Err(Error::Config(format!(
                "tiny encoder has {n} parameters, limit is {TINY_ENCODER_MAX_PARAMS}"
            )));
        }
        Ok(())
    }
}

/// Conv/ReLU stack, global average pooling, linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyEncoder {
    config: TinyEncoderConfig,
    convs: Vec<Conv2dSpec>,
    params: ParamSet,
}

pub struct TinyTape {
    /// Input to each convolution (the standardized image first), then the
    /// final post-ReLU map.
    activations: Vec<Vec<f64>>,
    sizes: Vec<(usize, usize)>,
    pooled: Vec<f64>,
}

impl TinyEncoder {
    pub fn new(config: TinyEncoderConfig) -> Result<Self> {
        config.validate()?;
        let convs = config.conv_specs();
        let mut rng = substream(config.seed, &[domain::INIT_ENCODER]);
        let mut params = ParamSet::new();
        for (i, spec) in convs.iter().enumerate() {
            let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let w: Vec<f64> = (0..spec.weight_len()).map(|_| normal.sample(&mut rng)).collect();
            params.push(
                format!("conv{i}.weight"),
                Tensor::from_vec(&[spec.out_channels, spec.in_channels, 3, 3], w)?,
            );
            params.push(format!("conv{i}.bias"), Tensor::zeros(&[spec.out_channels]));
        }
        let c = config.last_channels();
        let bound = 1.0 / (c as f64).sqrt();
        let w: Vec<f64> = (0..c * config.dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        params.push("fc.weight", Tensor::from_vec(&[config.dim, c], w)?);
        params.push("fc.bias", Tensor::zeros(&[config.dim]));
        Ok(Self {
            config,
            convs,
            params,
        })
    }

    pub fn config(&self) -> &TinyEncoderConfig {
        &self.config
    }

    /// Number of convolution layers.
    pub fn depth(&self) -> usize {
        self.convs.len()
    }
}

/// The reference encoder with default stages, output width `d` and the given
/// init seed.
pub fn tiny_encoder(d: usize, seed: u64) -> Result<TinyEncoder> {
    TinyEncoder::new(TinyEncoderConfig {
        dim: d,
        seed,
        ..Default::default()
    })
}

impl Encoder for TinyEncoder {
    type Tape = TinyTape;

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_with_tape(&self, image: &Image) -> (Vec<f64>, TinyTape) {
        let (mut h, mut w) = (image.height(), image.width());
        let x: Vec<f64> = image
            .data()
            .iter()
            .map(|v| (v - INPUT_MEAN) / INPUT_STD)
            .collect();
        let mut activations = vec![x];
        let mut sizes = vec![(h, w)];
        for (i, spec) in self.convs.iter().enumerate() {
            let weight = self.params.tensor(2 * i).data();
            let bias = self.params.tensor(2 * i + 1).data();
            let input = activations.last().expect("non-empty");
            let (mut y, ho, wo) = conv2d_forward(spec, weight, bias, input, h, w);
            for v in &mut y {
                *v = v.max(0.0);
            }
            activations.push(y);
            sizes.push((ho, wo));
            (h, w) = (ho, wo);
        }
        let c = self.config.last_channels();
        let last = activations.last().expect("non-empty");
        let area = (h * w) as f64;
        let pooled: Vec<f64> = last.chunks(h * w).map(|p| p.iter().sum::<f64>() / area).collect();
        let fc_w = self.params.tensor(2 * self.convs.len()).data();
        let fc_b = self.params.tensor(2 * self.convs.len() + 1).data();
        let out = (0..self.config.dim)
            .map(|o| {
                fc_b[o]
                    + fc_w[o * c..(o + 1) * c]
                        .iter()
                        .zip(&pooled)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        (
            out,
            TinyTape {
                activations,
                sizes,
                pooled,
            },
        )
    }

    fn backward(
        &self,
        tape: &TinyTape,
        grad_out: &[f64],
        grads: &mut ParamSet,
        want_input: bool,
    ) -> Option<Image> {
        let n_conv = self.convs.len();
        let c = self.config.last_channels();
        let fc_w = self.params.tensor(2 * n_conv).data();
        {
            let gw = grads.tensor_mut(2 * n_conv).data_mut();
            for (o, g) in grad_out.iter().enumerate() {
                for (j, p) in tape.pooled.iter().enumerate() {
                    gw[o * c + j] += g * p;
                }
            }
        }
        {
            let gb = grads.tensor_mut(2 * n_conv + 1).data_mut();
            for (b, g) in gb.iter_mut().zip(grad_out) {
                *b += g;
            }
        }
        let mut d_pooled = vec![0.0; c];
        for (o, g) in grad_out.iter().enumerate() {
            for (j, d) in d_pooled.iter_mut().enumerate() {
                *d += g * fc_w[o * c + j];
            }
        }
        let (h, w) = tape.sizes[n_conv];
        let area = (h * w) as f64;
        let mut grad: Vec<f64> = d_pooled
            .iter()
            .flat_map(|&d| std::iter::repeat_n(d / area, h * w))
            .collect();
        for i in (0..n_conv).rev() {
            let out_act = &tape.activations[i + 1];
            for (g, &a) in grad.iter_mut().zip(out_act) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            let (hi, wi) = tape.sizes[i];
            let need_input = i > 0 || want_input;
            let weight = self.params.tensor(2 * i).data();
            let (gw, gb) = grads.pair_mut(2 * i);
            let d_in = conv2d_backward(
                &self.convs[i],
                weight,
                &tape.activations[i],
                hi,
                wi,
                &grad,
                gw.data_mut(),
                gb.data_mut(),
                need_input,
            );
            match d_in {
                Some(d) => grad = d,
                None => return None,
            }
        }
        let (h0, w0) = tape.sizes[0];
        let data = grad.into_iter().map(|g| g / INPUT_STD).collect();
        Some(Image::from_planar(h0, w0, data).expect("input gradient matches input shape"))
    }
}

/// Elementwise `teacher <- lambda * teacher + (1 - lambda) * student`.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Range(format!("EMA momentum {lambda} outside [0, 1]")));
    }
    teacher.check_layout(student)?;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = lambda * *tv + (1.0 - lambda) * sv;
        }
    }
    Ok(())
}

/// Student and teacher encoders with their self-distillation projectors.
#[derive(Debug, Clone)]
pub struct StudentTeacherPair<E: Encoder> {
    pub student: E,
    pub teacher: E,
    pub student_projector: Projector,
    pub teacher_projector: Projector,
    momentum: f64,
}

impl<E: Encoder> StudentTeacherPair<E> {
    /// The teacher starts as an exact copy of the student.
    pub fn new(student: E, projector: Projector, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Range(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        Ok(Self {
            teacher: student.clone(),
            teacher_projector: projector.clone(),
            student,
            student_projector: projector,
            momentum,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn set_momentum(&mut self, momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Range(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        self.momentum = momentum;
        Ok(())
    }

    /// Moves teacher encoder and projector toward the student.
    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(self.teacher.params_mut(), self.student.params(), self.momentum)?;
        ema_update(
            self.teacher_projector.params_mut(),
            self.student_projector.params(),
            self.momentum,
        )
    }
}
