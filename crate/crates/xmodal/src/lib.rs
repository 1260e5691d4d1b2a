//! File formats, configuration, the training pipeline and the command-line
//! front end for unpaired image/text embedding translation.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod formats;
pub mod fsutil;
pub mod pipeline;
pub mod report;

pub use config::Config;
pub use error::{Result, XmodalError};
