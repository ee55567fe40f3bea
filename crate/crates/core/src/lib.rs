pub mod digest;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod io;
pub mod objective;
pub mod synth;
pub mod textgen;
pub mod trainer;

pub use error::{Error, Result};
