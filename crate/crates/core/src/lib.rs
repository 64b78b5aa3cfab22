//! Style-disentangled segmentation laboratory.

pub mod evalbench;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod reasoner;
pub mod seed;
pub mod styletext;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
