pub mod assign;
pub mod blocks;
pub mod config;
pub mod error;
pub mod formats;
pub mod graph;
pub mod graph_io;
pub mod init;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod reparam;
pub mod scaling;
pub mod tensor;

pub use error::{Error, Result};
