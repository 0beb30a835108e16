#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Multi-scale Retinex and a trainable convolutional low-light enhancer
//! built from the same operations.

pub mod bench;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod retinex;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{MsrNet, MsrNetConfig};
