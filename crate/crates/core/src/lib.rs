//! Communicative vision-language decoding on a synthetic micro-world.

pub mod decoder;
pub mod eval;
pub mod geometry;
pub mod lm;
pub mod model;
pub mod grammar;
pub mod numerics;
pub mod pipeline;
pub mod raster;
pub mod trainer;
pub mod vision;
pub mod world;

pub use geometry::BBox;
