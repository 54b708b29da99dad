//! From-scratch deep-learning library for binary cataract screening on eye
//! fundus images.
//!
//! The library implements a CNN-LSTM classifier (three conv/pool/batchnorm
//! sets, dropout, flatten, a ReLU dense layer, two LSTM layers, and a sigmoid
//! output head) entirely in safe Rust, with every layer's backward pass
//! hand-written and checkable against central finite differences. Nothing is
//! delegated to an autodiff framework; the point of the crate is that each
//! gradient can be verified independently.
//!
//! Organization:
//!
//! - [`tensor`]: dense row-major f64 arrays and the arithmetic primitives.
//! - [`layers`]: forward/backward for each layer type, each returning an
//!   explicit cache consumed by its backward.
//! - [`model`]: the assembled network, parameter initialization, and the
//!   `FNET` checkpoint format.
//! - [`data`]: ODIR-style CSV ingestion, class balancing, rotation
//!   augmentation, group-aware train/test splitting, and manifests.
//! - [`train`]: binary cross-entropy, Adam, and the training loop.
//! - [`metrics`]: confusion matrix, scalar metrics, ROC and AUC.
//! - [`gradcheck`]: the finite-difference verification suite.
//! - [`oracles`]: independent reference implementations (naive loops, scalar
//!   recurrences) used by the verification suite and tests. These never feed
//!   the production path.
//!
//! Determinism is a hard requirement throughout: reductions use a fixed
//! summation order, all randomness flows through seeded streams derived from
//! one master seed, and checkpoints round-trip bit-exactly.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
