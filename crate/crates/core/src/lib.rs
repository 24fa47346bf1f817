pub mod autodiff;
pub mod conv;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod pool;
pub mod train;

pub use error::{Error, Result};
