//! Camera relocalization against a surfel map.

pub mod binio;
pub mod database;
pub mod descriptor;
pub mod evaluation;
pub mod geometry;
pub mod pipeline;
pub mod relocalizer;
pub mod surfel_map;
pub mod simulator;
pub mod surfel_opt;
