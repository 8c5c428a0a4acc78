//! Supervised re-identification combined with teacher-student
//! self-distillation, at a scale that trains on a laptop CPU.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod profiler;
pub mod reid_head;
pub mod seeding;
pub mod ssl_head;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
