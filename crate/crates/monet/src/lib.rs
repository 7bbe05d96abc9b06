//! MONet: multi-scale overlap detection for localizing duplicated regions
//! between image pairs.
//!
//! The pipeline encodes both images into per-scale feature maps, scores
//! candidate patch pairs with a learned overlap detector, searches for
//! matches hierarchically from coarse to fine patches, and decodes the
//! per-scale overlap score maps into two binary masks. The crate also ships
//! the synthetic training-data generator, the ranking/BCE losses with the
//! two-phase training schedule, and an MCC evaluation harness.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod network;
pub mod pyramid;
pub mod search;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{MonetError, Result};
