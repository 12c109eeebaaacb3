//! Configuration, procedural references, image output, experiment drivers
//! and the command-line front end.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod ppm;
pub mod templates;

pub use config::{ExperimentConfig, Manifest, OUTPUT_ROOT_ENV};
pub use ppm::{read_ppm, write_ppm};
pub use templates::{render_template, style_population, StyleTemplate};
