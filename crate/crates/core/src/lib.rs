//! Search for inborn-robust sparse subnetworks ("scratch tickets") inside
//! frozen randomly initialized networks, and build the random-switch defense
//! on top of them.
//!
//! The crate is self-contained and `no_std` + `alloc`: a dense tensor type
//! with reverse-mode automatic differentiation, a fixed splittable PRNG,
//! network presets with four weight initializers, score-driven top-k masking
//! with straight-through gradients, gradient attacks (FGSM, FGSM-RS, PGD
//! under L-inf and L2), the outer search/training loops, and evaluation
//! machinery (transfer matrices, randomized-switch inference, feature
//! distance probes). File formats, dataset ingestion, and the CLI live in
//! the companion `rst-workbench` crate.
//!
//! Everything is deterministic: identical seeds and configurations produce
//! bit-identical masks, checkpoints, and evaluation numbers.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod init;
pub mod mask;
pub mod netspec;
pub mod network;
pub mod prng;
pub mod search;
pub mod sgd;
pub mod tape;
pub mod tensor;

#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;
#[cfg(any(test, feature = "gradcheck"))]
pub mod oracle;

mod scalar;

pub use attack::{ensemble_perturb, eot_perturb, input_keys, perturb, AttackConfig, AttackNorm};
pub use checkpoint::{NormStats, Provenance, TicketCheckpoint};
pub use data::DataSplit;
pub use error::{Error, Result};
pub use eval::{
    evaluate, feature_distance, r2s_evaluate, r2s_predict, transfer_matrix, AdaptiveAttack,
    EvalReport, R2sMode, R2sPolicy, R2sReport, RobustResult, TransferMatrix,
};
pub use init::{InitMethod, InitSpec};
pub use mask::{binarize_topk, BitMask, MaskedParameter, SparsityPattern};
pub use netspec::{LayerSpec, NetworkSpec};
pub use network::{ForwardOut, Network, NormState};
pub use prng::Prng;
pub use search::{
    finetune_ticket, search_rst, search_rtt, train_dense, EpochStats, FinetuneMode, SearchOutcome,
    TrainMode,
};
pub use sgd::{Schedule, Sgd};
pub use tape::{BatchStats, Reduction, Tape, Var};
pub use tensor::Tensor;

/// Scalar type used throughout. `f64` by default; the `single-precision`
/// feature switches experiment builds to `f32`. Gradient checks require the
/// default.
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;
