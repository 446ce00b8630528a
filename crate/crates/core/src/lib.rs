//! Backdoor-based black-box watermarking at desk scale: the forward baseline
//! schemes, the reverse-backdoor scheme with hash-chained labels and a Merkle
//! commitment, the capsulation attack, the CAScore estimator, and the
//! owner/judge/service verification protocol.

pub mod attack;
pub mod cli;
pub mod evidence;
pub mod image;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod scheme;
pub mod seed;
pub mod triggers;

pub use image::Image;
pub use scheme::{Code, IdentityKey, Label, SchemeParams};
