pub mod autodiff;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod runner;
pub mod style;
pub mod synth;

pub use error::{Error, Result};
