pub mod config;
pub mod diffcore;
pub mod dependency;
pub mod encoder;
pub mod objective;
pub mod pipeline;
pub mod error;
pub mod evaluation;
pub mod special;
pub mod synthdata;

pub use error::{Error, Result};
