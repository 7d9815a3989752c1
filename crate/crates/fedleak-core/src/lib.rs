//! Core library of the federated-learning data reconstruction lab.
//!
//! The crate simulates FedSGD/FedAvg exchanges over small image models, then
//! attacks the shared updates two ways: iterative gradient inversion and
//! closed-form linear-layer leakage (brightness binning, trap weights, and a
//! scaled identity-convolution front for FedAvg). Reconstructions are scored
//! (PSNR/SSIM, optimal matching), assembled into datasets, and fed back into
//! downstream training so the end-to-end value of leaked data can be
//! measured. Everything is seeded and deterministic: the same inputs produce
//! bit-identical outputs.

pub mod assign;
pub mod data;
pub mod error;
pub mod findiff;
pub mod fl;
pub mod gi;
pub mod gradmatch;
pub mod io;
pub mod leaked;
pub mod lll;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seeds;
pub mod tape;
pub mod tensor;
pub mod train;

pub use data::Dataset;
pub use error::{Error, Result};
pub use fl::{FlAlgorithm, FlConfig, GradientUpdate, UpdateKind};
pub use gradmatch::{Distance, GradMatchCfg};
pub use model::{build_model, LayerSpec, ModelParams, ModelSpec, ParamGrads};
pub use optim::Optimizer;
pub use tape::{ConvGeom, NodeId, Tape};
pub use tensor::Tensor;
