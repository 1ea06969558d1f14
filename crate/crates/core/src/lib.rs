pub mod augment;
pub mod blackbox;
pub mod config;
pub mod datahub;
pub mod defense;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod invert;
pub mod modelzoo;
pub mod pipeline;
pub mod report;
pub mod util;

pub use error::{CoreError, Result};
