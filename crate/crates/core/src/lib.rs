//! Segmentation-for-classification pipeline for osteoporosis screening on
//! synthetic hand radiographs.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`diffcore`]: dense `f64` tensors with a per-step reverse-mode tape.
//! - [`mixunet`]: mixture of latent-modulated probabilistic decoder modules
//!   with a routing function over pooled encoder features.
//! - [`otcoupling`]: the optimal-transport training loss - IoU-based pair
//!   costs, an inequality-relaxed entropic coupling solver, a brute-force
//!   oracle, and the composite transport + routing-KL objective.
//! - [`cropaug`]: geometric/photometric augmentation and spatially
//!   constrained multi-crop view sampling with rejection.
//! - [`pretrain`]: contrastive pretraining (NT-Xent over multi-crop views)
//!   with a trust-ratio optimizer and cosine schedule.
//! - [`clsfinetune`]: linear-probe fine-tuning, subject-level probability
//!   averaging and the classification metric suite.
//! - [`dataio`]: synthetic dataset generators, PGM raster I/O, mask-driven
//!   patch extraction and subject-wise splits.
//! - [`pipeline`]: stage orchestration shared by the CLI and the tests.

pub mod clsfinetune;
pub mod cropaug;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod mixunet;
pub mod otcoupling;
pub mod pipeline;
pub mod pretrain;
pub mod rng;

pub use diffcore::{ParamStore, Tape, Tensor, Var};
pub use error::{Error, Result};
