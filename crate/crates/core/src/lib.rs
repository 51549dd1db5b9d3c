//! Tiny-scale dense vs mixture-of-experts decoder pretraining lab.

pub mod bench;
pub mod budget;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod model;
pub mod report;
pub mod moe;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
