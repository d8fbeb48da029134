//! Siamese person re-identification training on a synthetic proposal world.
//!
//! The embedding network maps proposal features to unit vectors. Training
//! combines an on-line pairing loss (OLP) against a FIFO feature dictionary
//! with a hard-example-priority softmax (HEP) over a selected class pool.


pub mod checkpoint;
pub mod dictionary;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod hep;
pub mod linalg;
pub mod network;
pub mod olp;
pub mod sgd;
pub mod sim;
pub mod train;


pub use dictionary::{FeatureDictionary, IdentityLabel};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport};
pub use hep::{ClassifierHead, HepConfig, SelectionPool};
pub use linalg::DenseMatrix;
pub use network::{EmbeddingConfig, EmbeddingNetwork};
pub use olp::{olp_gradient, olp_loss, OlpBatch, Subgroup};
pub use sgd::SgdConfig;
pub use sim::{build_world, IdentityWorld, WorldConfig};
pub use train::{train_iteration, LossMode, MetricsRow, RunConfig, TrainState};
