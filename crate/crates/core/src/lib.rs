//! Dynamic-width speculative beam decoding (DSBD).
//!
//! A small draft model grows a forest of beam-sampling trajectories; the large
//! model scores every forest node in one batched pass and the verifier accepts
//! draft beams layer by layer so that the output follows the large model's
//! beam-sampling distribution exactly. The number of beams kept per layer is
//! chosen on the fly from the draft/target agreement.
//!
//! Modules, bottom-up:
//! - [`token_model`]: model interface and seeded Markov toy models
//! - [`warping`]: top-k / top-p
//! - [`beam_ref`]: reference multinomial and beam sampling, enumeration oracle
//! - [`draft_forest`]: draft forest growth, DFS order, topology masks
//! - [`width_policy`]: acceptance probabilities and the dynamic width
//! - [`verifier`]: layer-by-layer draft verification
//! - [`engine`]: generation loops and metrics

pub mod beam_ref;
pub mod distribution;
pub mod draft_forest;
pub mod engine;
pub mod error;
pub mod token_model;
pub mod verifier;
pub mod warping;
pub mod width_policy;

pub use beam_ref::{Beam, BeamSet, JointIndex};
pub use distribution::Distribution;
pub use error::{DecodeError, Result};
pub use token_model::{MarkovModel, Metered, ModelPair, Token, TokenModel, Vocabulary};
pub use warping::WarpSpec;
