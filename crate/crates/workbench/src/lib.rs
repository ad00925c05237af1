//! Project workflow around the `fissura` library: a directory convention,
//! polyline annotation into training crops, an HTTP service for the
//! annotation UI, and the `fissura` command line.

pub mod annotate;
pub mod cli;
pub mod commands;
pub mod error;
pub mod extract;
pub mod layout;
pub mod service;

pub use error::{Result, WorkbenchError};
pub use layout::ProjectLayout;
