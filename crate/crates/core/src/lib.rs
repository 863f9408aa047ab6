//! Multi-view low-light image enhancement.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense NCHW tensors, a reverse-mode tape and a finite-difference
//!   gradient oracle, plus the `RCTN` snapshot format.
//! - [`image_io`]: RGB images (PNG / PPM), masks and triplet manifests.
//! - [`synthesis`]: darkening, Gaussian-Poisson noise and the similarity gate
//!   used to build low-light triplets from normal-light views.
//! - [`alignment`]: patch partition and windowed top-K correlation search with a
//!   brute-force reference.
//! - [`network`]: encoder, recurrent enhancement/alignment/fusion units and the
//!   output head.
//! - [`losses`] and [`metrics`]: training objective and evaluation measures.
//! - [`trainer`]: augmentation, Adam, schedule, checkpoints and the train loop.
//! - [`gradsuite`]: finite-difference checks over every op and one full unit.

pub mod alignment;
pub mod error;
pub mod gradsuite;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod synthesis;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub use image_io::ImageRGB;
pub use tensor::{Scalar, Tape, Tensor, Var};
