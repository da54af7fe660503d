//! mind-kit: scenario-tree behavior planning over Gaussian-mixture scene
//! predictions.
//!
//! The pipeline, end to end:
//!
//! 1. [`world`] loads a scenario file (lane graph, observation history,
//!    route command, agent policies).
//! 2. [`predictor`] turns an observation history into a weighted set of
//!    joint futures, each a per-entity sequence of positional Gaussians
//!    ([`gmm`]).
//! 3. [`aime`] grows a scenario tree by re-invoking the predictor at
//!    branch points chosen from the growth rate of predicted uncertainty,
//!    pruning and merging scenarios by interaction modality.
//! 4. [`contingency`] optimizes a trajectory tree against each policy
//!    sub-tree with a tree-structured iLQR.
//! 5. [`policy`] scores the candidate trajectory trees and selects one.
//! 6. [`sim`] closes the loop: replan every step in a deterministic
//!    multi-agent simulator and record metrics.
//!
//! The `mind-kit` CLI (separate crate) exposes each stage as a subcommand.

pub mod aime;
pub mod canon;
pub mod config;
pub mod contingency;
pub mod geom;
pub mod gmm;
pub mod plot;
pub mod policy;
pub mod predictor;
pub mod sim;
pub mod world;

mod guide;

pub use config::RunConfig;
