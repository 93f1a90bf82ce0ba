//! Graph learning with random-regular rewiring and edge-mediated attention.

pub mod config;
pub mod dataset;
pub mod encode;
pub mod error;
pub mod graph;
pub mod model;
pub mod nn;
pub mod rewire;
pub mod seed;
pub mod train;

pub use error::{GrassError, Result};
