//! Online multi-level contrastive representation distillation (OMCRD) for
//! fNIRS emotion recognition.
//!
//! `M` peer networks are trained jointly. Each peer extracts a region-level
//! and a channel-level embedding, classifies from both, and learns from its
//! peers through label-softened distillation and a cross-network
//! inter-subject contrastive loss at both levels. After training the best
//! peer is kept and its projection heads are dropped.
//!
//! The crate is `no_std` (with `alloc`); the `std` feature enables threaded
//! peer passes in [`trainer::TrainMode::Fast`].

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use data::{Dataset, Emotion, FnirsRecord, Signal, SplitPlan, SynthConfig, Task, CLASS_COUNT};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossTerms, LossWeights};
pub use model::{ExtractorKind, PeerConfig, PeerEnsemble, PeerNet, Phase};
pub use real::Real;
pub use tensor::Tensor;
pub use trainer::{EpochLog, FoldResult, TrainConfig, TrainMode};
