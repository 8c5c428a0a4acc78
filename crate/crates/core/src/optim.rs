//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "optimizer betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("optimizer eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer over an ordered list of parameter groups. Moment buffers
/// mirror the group layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<ParamSet>,
    pub second_moment: Vec<ParamSet>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, groups: &[&ParamSet]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: groups.iter().map(|g| g.zeros_like()).collect(),
            second_moment: groups.iter().map(|g| g.zeros_like()).collect(),
        }
    }

    /// One update of every group with its matching gradient.
    pub fn update(&mut self, params: &mut [&mut ParamSet], grads: &[&ParamSet], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {} groups, got {} parameter and {} gradient groups",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            p.check_layout(g)?;
            p.check_layout(m)?;
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m_set = &mut self.first_moment[gi];
            let v_set = &mut self.second_moment[gi];
            for t in 0..p.len() {
                let gd = g.tensor(t).data();
                let md = m_set.tensor_mut(t).data_mut();
                let vd = v_set.tensor_mut(t).data_mut();
                let pd = p.tensor_mut(t).data_mut();
                for i in 0..pd.len() {
                    md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                    vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                    let m_hat = md[i] / bc1;
                    let v_hat = vd[i] / bc2;
                    pd[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * pd[i]);
                }
            }
        }
        Ok(())
    }
}
