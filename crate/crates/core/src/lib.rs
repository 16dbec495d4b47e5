//! Multi-domain image-to-image translation GAN with a multi-task styling
//! network, a multi-branch discriminator, Frechet-distance evaluation, and
//! a presentation-attack-detection experiment harness.
//!
//! Everything runs in f64 on the CPU with hand-written backward passes;
//! training is bitwise reproducible for a fixed seed, including across
//! checkpoint/resume boundaries.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod fid;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod pad;
pub mod trainer;
pub mod translate;

pub use config::Config;
pub use data::{Dataset, DomainRegistry, ImageSample, Provenance, Split};
pub use error::{Error, Result};
pub use fid::{FeatureExtractor, GaussianStats};
pub use losses::{LossReport, LossWeights};
pub use networks::{Discriminator, Generator, Model, NetConfig, StyleCode, StylingNetwork};
pub use pad::{PadResult, ScoreSet};
pub use trainer::{TrainConfig, TrainState};
pub use translate::ExperimentId;
