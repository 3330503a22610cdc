//! File formats, configuration and dataset layout.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod images;
pub mod pointgrid;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::PipelineConfig;
pub use dataset::{discover, load_sample, DatasetSample, Split};
pub use pointgrid::{read_point_grid, write_point_grid};
