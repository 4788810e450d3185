pub mod atoc;
pub mod baselines;
pub mod cfa;
pub mod diffcore;
pub mod dualstream;
pub mod error;
pub mod experiment;
pub mod model;
pub mod mvca;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod signal;
pub mod synth;
pub mod train;
pub mod video;

mod binio;

pub use error::{Error, Result};
