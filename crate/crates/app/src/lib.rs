pub mod cli;
pub mod error;
pub mod raster;
pub mod segmenter;
pub mod service;
