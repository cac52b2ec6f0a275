//! Prototype-based dataset comparison: learn a bank of discrete visual
//! prototypes over several image datasets, index which prototype every token
//! of every image receives, and compare datasets through those prototypes.

pub mod analytics;
pub mod api;
pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod image_ops;
pub mod index;
pub mod model;
pub mod params;
pub mod probe;
pub mod protosim;
pub mod synthetic;
pub mod tensor_util;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
