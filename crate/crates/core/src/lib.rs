//! Convolutional networks under plain convolution, batch normalization,
//! weight normalization, group normalization and parametric weights
//! standardization, with analytic gradients, variance-transmission
//! diagnostics and a small SGD training loop.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod layers;
pub mod net;
pub mod norm;
pub mod optim;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use config::{GammaSetting, Precision, RunConfig};
pub use error::{DivergenceReport, Error, Result};
pub use net::{ArchConfig, NetOptions, Network, NormMode, Preset};
pub use norm::{BnConfig, GammaPreset, Mode, PwsConfig};
pub use optim::{Sgd, SgdConfig};
pub use tensor::{Rng, Scalar, Tensor};
pub use train::{evaluate, train_run, TrainOutcome, TrainReport};
