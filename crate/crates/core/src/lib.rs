//! Key-value hierarchy extraction for form pages.

pub mod checkpoint;
pub mod document;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod hierarchy;
pub mod layout;
pub mod model;
pub mod nn;
pub mod scorer;
pub mod semantic;
pub mod training;
pub mod visual;

pub use error::{Error, Result};
