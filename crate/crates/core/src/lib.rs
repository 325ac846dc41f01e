//! Self-play preference optimization on synthetic, fully enumerable games.
//!
//! Exact multiplicative-weight self-play, the square-loss regression that
//! approximates it, the pairwise loss family, a token-level soft-value lab,
//! normalizing-factor limits, and an end-to-end iterative harness.

pub mod error;
pub mod exact_solver;
pub mod games;
pub mod losses;
pub mod numeric;
pub mod partition_lab;
pub mod policy;
pub mod preference;
pub mod rng;
pub mod selfplay;
pub mod token_mdp;

pub use error::{Result, SppoError};
pub use policy::{MixturePolicy, SoftmaxPolicy, TabularPolicy};
pub use preference::{GameSpec, PreferenceOracle, PromptId, PromptWeights};
