//! Online Gaussian-splat mapping of evolving scenes.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod dsa;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod keyframes;
pub mod loss;
pub mod map;
pub mod mapfile;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod presets;
pub mod raster;
pub mod scene;
pub mod ssim;

pub use error::{Error, Result};
pub use geometry::{Camera, Gaussian, Intrinsics, Splat2D};
pub use grid::{ColorImage, DepthMap, Grid, Mask};
pub use map::{GaussianId, GaussianMap, IdSet};
pub use raster::{render, DepthMode, RenderOptions, RenderOutput};
