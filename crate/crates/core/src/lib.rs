//! Noise-robust slot filling: perturbation engine, a small transformer
//! encoder on a tape autodiff core, noise-alignment pre-training,
//! contrastive/adversarial fine-tuning and span-F1 evaluation.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod manifest;
pub mod optim;
pub mod par;
pub mod perturb;
pub mod pipeline;
pub mod pretrain;
pub mod tensor;

pub use error::{Error, Result};
