//! Collaborative filtering on bipartite user-item graphs with target-guided
//! graph convolution.
//!
//! The engine trains 0-order embeddings under a BPR objective and builds
//! higher-order user/item representations by aggregating K-level propagation
//! trees. Three aggregation schemes share one propagation path:
//!
//! - `interactive`: each tree's aggregations are softmax-weighted by child
//!   similarity to the *other* tree's root (the prediction target),
//! - `self_guided`: weights come from similarity to the tree's own root,
//! - `lightgcn_norm`: static `1/sqrt(deg(p)*deg(c))` degree normalization.
//!
//! Modules follow the pipeline: [`data`] ingests or synthesizes interaction
//! datasets, [`graph`] stores adjacency and samples propagation trees,
//! [`model`] runs the forward pass, [`grad`] produces exact analytic gradients
//! (with a finite-difference oracle), [`train`] drives BPR/Adam epochs, and
//! [`eval`] computes full-ranking Recall@K / NDCG@K. [`cli`] ties the pieces
//! to the `iagcn` binary.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod graph;
pub mod model;
pub mod snapshot;
pub mod train;

pub use error::{Error, Result};
