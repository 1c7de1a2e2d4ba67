//! Brain MRI vision-language pre-training at desk scale: rule-based
//! report decomposition, hierarchical image–report contrastive alignment
//! and a query-based diagnosis head with attention grounding.

pub mod ard;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod io;
pub mod params;
pub mod config;
pub mod encoders;
pub mod alignment;
pub mod cvp;
pub mod corpus;
pub mod model;
pub mod trainer;
pub mod synth;
pub mod metrics;
pub mod pipeline;
pub mod selfcheck;
