pub mod analysis;
pub mod engine;
pub mod fitting;
pub mod models;
pub mod rng;
pub mod sequence;
pub mod signal;
pub mod substrate;
