//! Group-relative policy optimization over synthetic patient cohorts.
//!
//! The crate wires eight pieces into one reproducible pipeline:
//!
//! - [`env`]: a seeded linear-Gaussian cohort MDP: hidden patient groups
//!   with their own dynamics, multi-modal noisy observations, quadratic
//!   distance-to-target rewards.
//! - [`nn`]: the small dense-network toolkit (matrices, MLPs, Adam, finite
//!   difference gradient audits) everything else builds on.
//! - [`fusion`]: the multi-channel encoder (per-modality causal
//!   convolutions, multi-head self-attention, and a sigmoid gate over the
//!   concatenated channels) with hand-derived backward passes.
//! - [`cluster`]: patient embeddings and k-means (k-means++ seeding, empty
//!   cluster repair) that discover the treatment groups.
//! - [`advantage`]: discounted returns, a learned value baseline, and the
//!   group-relative advantage blending individual gain, group gain, and a
//!   divergence penalty.
//! - [`grpo`]: the clipped-surrogate policy objective with per-group KL
//!   regularization, exact analytic gradients, and the training loop.
//! - [`search`]: genetic-algorithm global search over action sequences
//!   refined per patient by UCB1 Monte Carlo tree search.
//! - [`experiment`]: config loading, seed splitting, artifact persistence,
//!   ablations, and gradient checks behind the CLI.
//!
//! Every stochastic component draws from a labeled stream split off one
//! master seed, so any run is reproducible byte for byte from its config.

pub mod advantage;
pub mod cluster;
pub mod env;
mod error;
pub mod experiment;
pub mod fusion;
pub mod grpo;
pub mod nn;
pub mod search;
pub mod seeding;

pub use advantage::{AdvantageBatch, AdvantageHyper, AdvantageRow, ValueParams};
pub use cluster::{GroupAssignment, PatientEmbedding};
pub use env::{Cohort, CohortConfig, PatientState, StepRecord, Trajectory};
pub use error::{Error, Result};
pub use experiment::{Checkpoint, ExperimentConfig, SearchReport};
pub use fusion::{FusedFeatures, FusionConfig, FusionParams, ModalitySeries};
pub use grpo::{FrozenPolicy, GrpoConfig, PolicyParams, TrainOutput};
pub use nn::{Activation, DenseLayer, Matrix, Mlp};
pub use search::{Chromosome, GaConfig, MctsConfig, RefineResult, SearchNode};
