//! Region Comparison Network: interpretable few-shot image classification by
//! region-level matching, meta-generated region weights, region activation
//! maps and class-level prototype-region statistics.

pub mod backbone;
pub mod episodes;
pub mod error;
pub mod explainer;
pub mod gradcheck;
pub mod interpret;
mod layers;
pub mod matcher;
pub mod model;
pub mod reference;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
