//! Unsupervised multi-stage displacement and strain estimation for
//! quasi-static ultrasound elastography.
//!
//! The crate covers the full pipeline: RF data I/O ([`rfdata`]), a synthetic
//! phantom generator with analytic ground truth ([`phantom`]), field
//! mathematics ([`fieldops`]), unsupervised losses ([`losses`]), the
//! single-stage displacement network ([`network`]), residual stage stacking
//! ([`multistage`]), strain image metrics ([`metrics`]) and the training and
//! evaluation harness ([`harness`]).

pub mod error;
pub mod fieldops;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod multistage;
pub mod network;
pub mod phantom;
pub mod rfdata;

pub use error::{Error, ErrorKind, Result};
