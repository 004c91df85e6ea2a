//! The `birdfit` command-line pipeline as a library: configuration, the
//! synthetic multi-bird scene, the stages behind each subcommand, the
//! experiment grid and overlay rendering.

pub mod config;
pub mod error;
pub mod grid;
pub mod pipeline;
pub mod render;
pub mod scene;

pub use error::{CliError, Result};
