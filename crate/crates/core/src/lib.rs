//! Shape-prior driven organ segmentation on synthetic two-modality
//! phantoms: data format, preprocessing, landmarks, the five networks,
//! the shape generator, losses, metrics, training and the CLI.

pub mod arch;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod figures;
pub mod generator;
pub mod landmarks;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod phantoms;
pub mod preprocess;
pub mod trainer;
pub mod volume;
