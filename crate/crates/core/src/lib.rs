//! Mixture-of-clustered-experts at desk scale.
//!
//! Sequences are embedded, assigned to an expert group by a k-means model,
//! and every token of the sequence is then routed to the top-k adapter
//! experts of that group. The crate contains the full stack needed to train
//! and inspect such a model from scratch:
//!
//! - [`tensor`]: 64-bit tensors with a reverse-mode tape and gradient checker
//! - [`embedding`]: deterministic feature-hashing sequence embedder and embedding files
//! - [`clustering`]: k-means, nearest-centroid prediction and elbow selection
//! - [`moce`]: adapter experts, group routers, dual-stage routing, load balancing
//! - [`model`]: toy decoder-only transformer with upcycled MoCE feed-forward layers
//! - [`harness`]: datasets, configuration, training/evaluation pipeline, reports, ablations

pub mod clustering;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod moce;
pub mod model;
pub mod rng;
pub mod tensor;

pub use clustering::{ClusterAssignment, ElbowReport, KMeansModel};
pub use embedding::{EmbeddingSet, SequenceEmbedding};
pub use error::{MoceError, Result};
pub use moce::{MoceLayer, RoutingMode, RoutingRecord};
pub use model::{MoceModel, ModelConfig};
pub use tensor::{Activation, Tape, Tensor, Var};
