//! Desk-scale simulator of split federated learning (SFL) with an
//! honest-but-curious server running model-inversion attacks, plus the
//! attacker-aware training / bottleneck / resistance-transfer defense stack
//! and five perturbation- or regularization-based baselines.
//!
//! The crate is organized bottom-up:
//! - [`tensor`], [`layers`], [`loss`], [`optim`]: a fixed-operator
//!   reverse-mode differentiation engine for sequential CNN stacks.
//! - [`zoo`]: splittable classifiers, bottleneck insertion, inversion-model
//!   tiers L0-L3 and FLOP accounting.
//! - [`data`], [`checkpoint`]: IDX ingestion, synthetic fixtures, client
//!   partitioning and a versioned checkpoint format.
//! - [`metrics`]: MSE / SSIM / PSNR / accuracy.
//! - [`protocol`]: the SFL-V2 training loop with federated averaging and
//!   client sampling.
//! - [`attack`]: the server-side training-based model-inversion attack.
//! - [`defense`]: attacker-aware min-max training, resistance transfer and
//!   the baseline defenses.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod defense;
pub mod error;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod testing;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
