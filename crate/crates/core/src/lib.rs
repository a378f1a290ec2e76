//! Learned hierarchical region grouping for object proposals.
//!
//! The pipeline over-segments an image ([`overseg`]), describes each region
//! ([`regionfeat`]), and merges regions bottom-up with a small recursive
//! network ([`rnnmodel`]) that scores every candidate merge and predicts an
//! objectness probability for every node of the resulting tree.
//! [`training`] fits the network with a structured max-margin loss and
//! [`inference`] produces ranked proposals with randomized top-k merging.
//! [`evalkit`] measures proposal recall.

pub mod error;
pub mod evalkit;
pub mod forest;
pub mod imagecore;
pub mod inference;
pub mod nnet;
pub mod overseg;
pub mod pipeline;
pub mod regionfeat;
pub mod rng;
pub mod rnnmodel;
pub mod training;

pub use error::{Error, Result};
