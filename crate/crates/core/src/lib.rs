pub mod adapter;
pub mod attention;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod hpf;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod window;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use params::{Bound, ParamInit, Params};
pub use tensor::{grad_check, Real, Tape, Tensor, Var};
