//! Swin-style single-image super-resolution with a spatial-frequency gated
//! feed-forward sublayer, plus the degradation pipeline, composite loss,
//! metrics, trainer and file formats around it.

pub mod cli;
pub mod config;
pub mod degrade;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod params;
pub mod sfg_ffn;
pub mod trainer;
pub mod verify;
pub mod swin;

pub use error::{Error, Result};
