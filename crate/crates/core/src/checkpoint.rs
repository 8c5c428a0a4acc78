//! Versioned checkpoint archive.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes   "SSBVCKPT"
//! version      u32 LE
//! header_len   u64 LE
//! header       header_len bytes of UTF-8 JSON
//! payload      f64 LE values of every array, in header order
//! ```
//!
//! The header is `{"format", "version", "metadata", "arrays": [{"name",
//! "shape", "offset"}]}` where `offset` counts f64 elements from the start
//! of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{Encoder, TinyEncoder};
use crate::error::{Error, Result};
use crate::reid_head::{BnNeck, ReIdHead};
use crate::tensor::ParamSet;
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"SSBVCKPT";
pub const FORMAT_TAG: &str = "ssbver-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    metadata: Value,
    arrays: Vec<ArrayEntry>,
}

/// Named arrays plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub metadata: Value,
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Archive {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        self.arrays.push((name.into(), shape.to_vec(), data.to_vec()));
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}.{name}"), t.shape(), t.data());
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    fn require(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        match self.get(name) {
            Some((s, d)) if s == shape => Ok(d),
            Some((s, _)) => Err(Error::Checkpoint(format!(
                "array {name} has shape {s:?}, expected {shape:?}"
            ))),
            None => Err(Error::Checkpoint(format!("array {name} is missing"))),
        }
    }

    /// Overwrites every tensor of `params` from `{prefix}.{name}`.
    pub fn fill_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        for (name, t) in params.iter_mut() {
            let shape = t.shape().to_vec();
            let data = self.require(&format!("{prefix}.{name}"), &shape)?;
            t.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, shape, data) in &self.arrays {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!(
                    "array {name}: shape {shape:?} does not match {} values",
                    data.len()
                )));
            }
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += data.len();
        }
        let header = serde_json::to_vec(&Header {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.arrays {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!("unknown format tag {}", header.format)));
        }
        let payload = &bytes[header_end..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset * 8;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("array {} runs past the payload", entry.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((entry.name, entry.shape, data));
        }
        Ok(Self {
            metadata: header.metadata,
            arrays,
        })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainMetadata {
    iteration: u64,
    epoch: u32,
    optimizer_step: u64,
    monitor_streak: usize,
    ssl_evaluations: u64,
    num_classes: usize,
    ema_momentum: f64,
    config: TrainConfig,
}

/// Full training state together with the configuration that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState<TinyEncoder>,
}

const GROUPS: [&str; 3] = ["encoder", "projector", "classifier"];

pub fn state_to_archive(state: &TrainState<TinyEncoder>, cfg: &TrainConfig) -> Result<Archive> {
    let meta = TrainMetadata {
        iteration: state.iteration,
        epoch: state.epoch,
        optimizer_step: state.optimizer.step,
        monitor_streak: state.monitor.streak(),
        ssl_evaluations: state.ssl_evaluations,
        num_classes: state.head.classifier.classes(),
        ema_momentum: state.pair.momentum(),
        config: cfg.clone(),
    };
    let mut a = Archive {
        metadata: serde_json::to_value(meta)?,
        arrays: Vec::new(),
    };
    a.push_params("student.encoder", state.pair.student.params());
    a.push_params("teacher.encoder", state.pair.teacher.params());
    a.push_params("student.projector", state.pair.student_projector.params());
    a.push_params("teacher.projector", state.pair.teacher_projector.params());
    a.push_params("head.classifier", state.head.classifier.params());
    let d = state.head.bn.dim();
    a.push("head.bn.running_mean", &[d], &state.head.bn.running_mean);
    a.push("head.bn.running_var", &[d], &state.head.bn.running_var);
    a.push("ssl.center", &[state.center.dim()], &state.center.center);
    for (g, name) in GROUPS.iter().enumerate() {
        a.push_params(&format!("optim.m.{name}"), &state.optimizer.first_moment[g]);
        a.push_params(&format!("optim.v.{name}"), &state.optimizer.second_moment[g]);
    }
    Ok(a)
}

pub fn state_from_archive(a: &Archive) -> Result<Checkpoint> {
    let meta: TrainMetadata = serde_json::from_value(a.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let cfg = meta.config;
    let mut state = TrainState::new(&cfg, meta.num_classes).map_err(|e| match e {
        Error::Config(m) => Error::Checkpoint(format!("stored config is invalid: {m}")),
        other => other,
    })?;
    a.fill_params("student.encoder", state.pair.student.params_mut())?;
    a.fill_params("teacher.encoder", state.pair.teacher.params_mut())?;
    a.fill_params("student.projector", state.pair.student_projector.params_mut())?;
    a.fill_params("teacher.projector", state.pair.teacher_projector.params_mut())?;
    a.fill_params("head.classifier", state.head.classifier.params_mut())?;
    let d = state.head.bn.dim();
    let e = state.center.dim();
    let mut bn = BnNeck::new(d);
    bn.running_mean = a.require("head.bn.running_mean", &[d])?.to_vec();
    bn.running_var = a.require("head.bn.running_var", &[d])?.to_vec();
    state.head = ReIdHead {
        bn,
        ..state.head
    };
    state.center.center = a.require("ssl.center", &[e])?.to_vec();
    for (g, name) in GROUPS.iter().enumerate() {
        a.fill_params(&format!("optim.m.{name}"), &mut state.optimizer.first_moment[g])?;
        a.fill_params(&format!("optim.v.{name}"), &mut state.optimizer.second_moment[g])?;
    }
    state.optimizer.step = meta.optimizer_step;
    state.iteration = meta.iteration;
    state.epoch = meta.epoch;
    state.ssl_evaluations = meta.ssl_evaluations;
    state.monitor.set_streak(meta.monitor_streak);
    state.pair.set_momentum(meta.ema_momentum)?;
    Ok(Checkpoint { config: cfg, state })
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState<TinyEncoder>, cfg: &TrainConfig) -> Result<()> {
    state_to_archive(state, cfg)?.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    state_from_archive(&Archive::load(path)?)
}
