//! File formats, PNG handling and the command-line driver around
//! `posegraph-core`.

pub mod checkpoint;
pub mod coco;
pub mod config;
pub mod imageio;
pub mod cli;
pub mod overlay;
