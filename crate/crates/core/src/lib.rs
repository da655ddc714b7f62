pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod mim;
pub mod network;
pub mod nn;
pub mod pam;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod visualize;

pub use config::MipaConfig;
pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE};
pub use network::{ForwardOutputs, MipaNet};
pub use tensor::{Scalar, Tensor};
