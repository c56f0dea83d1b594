pub mod bundle;
pub mod echo;
pub mod error;
pub mod eval;
pub mod filter;
pub mod format;
pub mod fmcw;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod protocol;
pub mod quant;
pub mod realtime;
pub mod seed;
pub mod session;
pub mod sim;

pub use error::{Error, Result};
