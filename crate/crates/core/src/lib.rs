//! Conditional denoising diffusion with a unified uni-modal / multi-modal
//! noise predictor, uncertainty-aware cross-attention fusion and a
//! divergence-gated choice between the two branch outputs.

pub mod audit;
pub mod config;
pub mod dammp;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{build_ummnet, NetConfig, UMMNet};
pub use numerics::{Graph, Mode, ParamStore, Tensor, Var};
pub use schedule::NoiseSchedule;
pub use trainer::{TrainConfig, Trainer};
