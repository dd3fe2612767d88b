// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod coupling;
pub mod critical;
pub mod error;
pub mod experiment;
pub mod integrate;
pub mod linalg;
pub mod lyapunov_perron;
pub mod models;
pub mod noise;
pub mod spectral;
pub mod stats;
pub mod system;

pub use error::{Error, Result};
pub mod tracking;
