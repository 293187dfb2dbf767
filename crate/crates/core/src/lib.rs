pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod copula;
pub mod oracle;
pub mod nn;
pub(crate) mod io_util;
pub mod synthdata;
pub mod pipeline;
pub mod cli;
