pub mod cli;
pub mod datapipe;
pub mod decision;
pub mod error;
pub mod eval;
pub mod modelzoo;
pub mod numcore;
pub mod training;

pub use error::{Error, Result};
