//! Cross-view geo-localization with a rotation-equivariant backbone and a
//! super-node graph head: numerics, model, data pipeline, training loop,
//! retrieval evaluation, and the on-disk embedding/checkpoint formats.

pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod retrieval;
pub mod selfcheck;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
