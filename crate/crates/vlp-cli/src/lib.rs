//! Training harness, file formats, studies and the `vlp` command line
//! around the `vlp-core` model library.

pub mod baseline;
pub mod checkpoint;
pub mod configfile;
pub mod error;
pub mod export;
pub mod forward;
pub mod study;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use configfile::RunConfig;
pub use error::{CliError, Result};
