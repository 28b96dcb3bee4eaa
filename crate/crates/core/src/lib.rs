//! Contrastive representation learning with hard-negative importance weighting.
//!
//! Negatives in an InfoNCE batch are re-weighted by mixing three per-pair scores:
//!
//! * **uncertainty**: dot product of last-layer cross-entropy gradients computed
//!   against pseudo-labels drawn from a similarity posterior over the batch anchors,
//! * **anchor similarity**: cosine similarity between anchor and negative embeddings,
//! * **representativeness**: mean cosine distance of a negative to the other negatives.
//!
//! The crate is split along the training pipeline:
//!
//! | module      | contents                                                     |
//! |-------------|--------------------------------------------------------------|
//! | [`numerics`]| dense matrices, normalization, softmax, seeded RNG           |
//! | [`encoder`] | small ReLU MLP with a bias-free linear head, backprop, optimizers, checkpoints |
//! | [`scoring`] | component scores, aggregation, uniform / similarity-only baselines |
//! | [`loss`]    | InfoNCE and the weighted variant with analytic gradients     |
//! | [`data`]    | synthetic mixtures, CSV ingestion, augmentation, batching    |
//! | [`trainer`] | the training loop, config, metrics and run directories       |
//! | [`eval`]    | linear probe, KNN, negative audits, class-restricted sweep   |
//! | [`gradcheck`] | finite-difference suites used by the CLI and tests         |

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod firewall;
pub mod gradcheck;
pub mod loss;
pub mod numerics;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{ExclusionMask, Matrix, SeededRng};
