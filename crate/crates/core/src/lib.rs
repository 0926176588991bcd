pub mod datasynth;
pub mod error;
pub mod evalkit;
pub mod numerics;
pub mod pipeline;
pub mod procter;
pub mod rnnt;
pub mod textproc;

pub use error::{Error, Result};
