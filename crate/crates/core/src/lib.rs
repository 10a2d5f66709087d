#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
