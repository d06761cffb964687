//! Unsupervised graph-level anomaly detection with an asymmetric
//! source/target pair: a pre-trained GCN encoder followed by a reversible
//! graph coupling flow acts as the source, a GIN acts as the target, and
//! their disagreement on a test graph is its anomaly score.

pub mod artifacts;
pub mod error;
pub mod features;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod source;
pub mod synthetic;
pub mod tape;
pub mod target;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
