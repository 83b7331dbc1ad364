pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod models;
pub mod seed;
pub mod synthdata;
pub mod evalprobe;
pub mod gradcon;
pub mod labeling;
pub mod contrastive;
pub mod baselines;
pub mod cli;
