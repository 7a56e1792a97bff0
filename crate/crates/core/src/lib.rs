//! Speech emotion recognition conditioned on speaker identity.
//!
//! Two convolutional-recurrent towers share one architecture: a speaker
//! classifier trained first and then frozen, and an emotion classifier that
//! attends over both towers' frame sequences through a query-key-value
//! layer. Everything down to the differentiation is implemented here.

pub mod container;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
