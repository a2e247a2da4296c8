//! KARL: a single-pass adaptive image tokenizer.
//!
//! An encoder maps an image's 2-D base-token grid plus a target
//! reconstruction error ε to a 1-D sequence of latent tokens and a halting
//! probability per token. Tokens below the halting threshold are kept and
//! decoded in one pass; the number kept is the image's complexity estimate.

pub mod base;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod kc;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod sweep;
pub mod tape;
pub mod training;

pub use base::{BaseTokenizer, Grid2D};
pub use config::{BaseConfig, DataConfig, ExperimentConfig, ModelConfig, TokenMode, TrainConfig};
pub use data::{DatasetSpec, Family, Split};
pub use error::{KarlError, Result};
pub use image::Image;
pub use kc::{kc_one_pass, kc_oracle_search, KCEstimate};
pub use metrics::{MetricReport, ThresholdReport};
pub use model::{HaltingVector, KarlModel, LatentSequence, Passes};
pub use training::{EpsilonCondition, LossTable, TrainReport};
