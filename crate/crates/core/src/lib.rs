//! A small fusion-in-the-backbone vision-language model: a text transformer
//! and a windowed hierarchical image transformer whose top layers exchange
//! information through gated cross-attention, switchable between a dual
//! encoder and a fusion encoder, with contrastive, matching, masked-language
//! and grounding objectives, downstream task adapters and a synthetic data
//! harness.

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;

pub use config::{Config, Objectives, Stage, Task};
pub use error::{Error, Result};
pub use fusion::{count_fusion_params, Backbone, EncoderOutput, FusionConfig, Mode, Strategy};
pub use params::{Group, ParamStore};
