//! Desk-scale stand-ins for the protected network.
//!
//! The judge and the adversary only ever see a [`BlackBoxModel`]: a label for
//! each queried image. [`Mlp`] is a one-hidden-layer classifier trained on a
//! [`SyntheticDataset`]; [`OracleModel`] answers from lookup tables with
//! configurable noise so protocol experiments can run without training.

mod dataset;
mod mlp;
mod oracle;

use std::sync::Arc;

pub use dataset::{gen_dataset, DatasetError, SyntheticDataset};
pub use mlp::{embed_backdoor, train, EmbedHyper, Mlp, ModelError, TrainHyper};
pub use oracle::OracleModel;

use crate::image::Image;
use crate::scheme::Label;

/// A label-producing service. `position` is the index of the query within the
/// caller's session; deterministic models ignore it.
pub trait BlackBoxModel: Send + Sync {
    fn query(&self, x: &Image, position: u64) -> Label;
}

impl<M: BlackBoxModel + ?Sized> BlackBoxModel for &M {
    fn query(&self, x: &Image, position: u64) -> Label {
        (**self).query(x, position)
    }
}

impl<M: BlackBoxModel + ?Sized> BlackBoxModel for Box<M> {
    fn query(&self, x: &Image, position: u64) -> Label {
        (**self).query(x, position)
    }
}

impl<M: BlackBoxModel + ?Sized> BlackBoxModel for Arc<M> {
    fn query(&self, x: &Image, position: u64) -> Label {
        (**self).query(x, position)
    }
}

/// Fraction of `(image, expected)` pairs the model answers correctly.
/// Query positions are the pair indices. Returns 0 for an empty input.
pub fn accuracy<'a, M, I>(model: &M, pairs: I) -> f64
where
    M: BlackBoxModel + ?Sized,
    I: IntoIterator<Item = (&'a Image, Label)>,
{
    let (mut hits, mut total) = (0usize, 0usize);
    for (i, (x, want)) in pairs.into_iter().enumerate() {
        total += 1;
        if model.query(x, i as u64) == want {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
