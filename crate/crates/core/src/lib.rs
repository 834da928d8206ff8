//! Decoupled two-stage training of visual-relation models with alternating
//! class-balanced sampling, on synthetic long-tailed scene-graph corpora.

pub mod cli;
pub mod datagen;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod sampling;
pub mod seed;
pub mod trainer;
