//! Sliding-window crack detection on top of a frozen feature extractor.
//!
//! The pipeline: cut an image into overlapping windows ([`imaging`]), embed
//! each window with a pretrained backbone ([`backend`]), persist labelled
//! embeddings ([`store`]), fit a regularised logistic-regression head
//! ([`trainer`]), then stamp confident windows into per-class masks and boxes
//! ([`detector`]). [`evaluator`] scores a model against labelled crops.

pub mod backend;
mod binio;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod imaging;
pub mod store;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
