//! Latent-action language modeling.

pub mod checkpoint;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod generate;
pub mod model;
pub mod run;
pub mod toy;
pub mod train;

pub use error::{CoreError, Result};
