//! Face anti-spoofing through disentangled liveness/content representations.
//!
//! Images are encoded into liveness and content features; liveness features
//! are swapped between live and spoof pairs and the translated images are
//! supervised by reconstruction, adversarial, LBP-texture and depth losses.
//! Classification fuses the magnitudes of the estimated LBP and depth maps.
//!
//! Module map:
//! - [`dataio`]: synthetic data, manifests, balanced batches
//! - [`texture`]: LBP code maps and texture targets
//! - [`nets`]: encoder, decoder, auxiliary nets, discriminators, checkpoints
//! - [`losses`]: every loss term and the weighted generator objective
//! - [`trainer`]: depth pretraining and the alternating adversarial loop
//! - [`eval`]: scoring, thresholds, PAD metrics, translation artifacts

pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod raster;
pub mod texture;
pub mod trainer;

pub use error::{Error, Result};
