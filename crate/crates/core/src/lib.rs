pub mod config;
pub mod dataset;
pub mod error;
pub mod geodesy;
pub mod mining;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod retrieval;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
pub use geodesy::{geodesic_distance, CellIndex, GeoPoint, MercatorLayout, RegionLayout};
