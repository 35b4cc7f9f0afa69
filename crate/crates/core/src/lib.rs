//! Adversarial pivotal tuning benchmark: small generative models, GAN inversion,
//! generator-tuning attacks against classifiers, evaluation and robustification.

pub mod artifacts;
pub mod attack;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod inversion;
pub mod losses;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod report;
pub mod robustify;
pub mod store;
pub mod tensor;

pub use error::{AptError, Result};
