//! Probabilistic cross-modal embeddings.
//!
//! Every input (an image view or a report section) is embedded as a diagonal
//! Gaussian. Pairs are scored with the contrastive stochastic distance (CSD),
//! turned into a match probability by a learnable logistic, and trained with a
//! binary cross-entropy objective plus a variational-information-bottleneck
//! KL penalty. The crate also ships a small dual-encoder trainer with
//! hand-written backpropagation, a synthetic many-to-many dataset generator
//! and an evaluation kit for retrieval, selective prediction, calibration and
//! corruption robustness.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.
//! Reductions are always performed in a fixed order, so both builds produce
//! bit-identical results.

pub mod error;
pub mod eval;
pub mod gaussian;
pub mod matrix;
pub mod objective;
pub mod par;
pub mod perturb;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use gaussian::{BceMode, GaussianEmbedding, GradBundle, MatchScalars};
pub use matrix::Matrix;
pub use objective::{LossBreakdown, LossConfig, MatchMatrix};
pub use perturb::{Grid, PerturbKind, PerturbSpec};
pub use store::EmbeddingStore;
pub use synth::{SynthConfig, SynthDataset, SynthStudy};
