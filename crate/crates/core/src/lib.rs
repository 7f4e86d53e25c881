//! Staple-crop production forecasting from multi-resolution biogeophysical rasters.

pub mod io;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod selection;
pub mod season;
pub mod forest;
pub mod mlp;
pub mod report;
pub mod pipeline;
