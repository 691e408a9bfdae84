//! Two-stage learning on 1-bit SAR imagery.
//!
//! The crate is organised bottom-up:
//!
//! - [`ndgrad`]: dense tensors, a define-by-run tape with reverse-mode
//!   differentiation, and AdamW.
//! - [`sarsim`]: echo simulation, sign quantization and Range-Doppler
//!   processing that turn a reflectivity map into paired 1-bit / 16-bit images.
//! - [`features`]: HOG descriptors and radar-cube mean aggregation.
//! - [`model`]: the dual-branch cross-feature reconstruction network and the
//!   multi-scale fusion classifier.
//! - [`losses`]: reconstruction, consistency, alignment, batch-hard triplet and
//!   focal objectives.
//! - [`pipeline`]: dataset synthesis, augmentation, sampling, and the
//!   pre-train / HOG / fine-tune stages.
//! - [`metrics`]: confusion matrices, per-class and macro metrics, PSNR.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.
//! Reductions are always performed in a fixed order so results do not depend
//! on the thread count.

pub mod error;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ndgrad;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod sarsim;

pub use error::{Error, Result};
