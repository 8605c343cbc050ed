//! Visual sound-source localization that erases audio-visual interference.
//!
//! The pipeline runs in two stages over a synthetic latent-feature world:
//!
//! 1. single-source correspondence learning, prototype extraction by
//!    clustering, and the audio instance identifier, which learns one
//!    distinguishing step per pseudo-class so that quiet sources inside an
//!    uneven mixture still reach their prototype;
//! 2. the cross-modal referrer, which masks class visual maps with
//!    class-specific audio similarity (silent objects), weights audio scores
//!    by binarized visual mass (off-screen sounds), and aligns the two class
//!    distributions with a symmetric KL objective.
//!
//! [`pipeline`] ties the stages together behind the `ier` command line tool.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evaluate;
pub mod identifier;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod prototypes;
pub mod referrer;
pub mod tensor_io;
pub mod world;

pub use config::ExperimentConfig;
pub use error::{IerError, Result};
pub use numerics::{FeatureGrid, Matrix, SimilarityMap};
