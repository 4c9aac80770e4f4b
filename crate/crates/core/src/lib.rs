//! Event-driven spiking token selection with sparse top-K attention.
//!
//! The pipeline runs event streams through heterogeneous LIF encoders,
//! extracts per-token spike-timing cues, weights tokens by those cues,
//! gates them with a learned top-K policy and classifies with attention over
//! only the surviving tokens. Every multiply in the attention path is
//! counted so the `O(K^2)` cost is measurable.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod cues;
pub mod encoder;
pub mod error;
pub mod events;
pub mod gating;
pub mod model;
pub mod neuron;
pub mod opcount;
pub mod params;
pub mod pgm;
pub mod selftest;
pub mod surrogate;
pub mod temporal;
pub mod tensor;
pub mod train;
pub mod variance;

pub use error::{Error, Result};
