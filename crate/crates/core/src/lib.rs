//! HyMaTE: a hybrid Mamba/Transformer encoder for irregular multivariate
//! time series given as `(time, feature, value)` triplets.

pub mod attention;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod interpret;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod par;
pub mod ssm;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
