//! Masked contrastive language-image alignment at desk scale.
//!
//! The training objective combines four terms:
//!
//! * integrity-weighted bidirectional InfoNCE on pooled embeddings
//!   ([`contrastive`], weights from [`patching::integrity_weights`]),
//! * sentence-patch matching through an IPOT transport plan ([`ot_align`]),
//! * masked image prediction ([`mip`]),
//!
//! all built on a small reverse-mode tape ([`numerics`]) and tiny transformer
//! encoders ([`encoders`]). [`trainer`] wires them into a training loop over
//! synthetic paired data with retrieval and alignment evaluation.

pub mod contrastive;
pub mod encoders;
pub mod error;
pub mod mip;
pub mod numerics;
pub mod ot_align;
pub mod patching;
pub mod trainer;

pub use error::{Error, Result};
