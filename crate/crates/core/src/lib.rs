//! Bayesian record linkage across noisy categorical databases with a jointly
//! fitted downstream linear regression.
//!
//! Records are linked through a random-partition model over a latent linkage
//! structure; four prior regimes are supported (uniform labels, uniform
//! partitions, Pitman-Yor, and a bipartite-constrained Pitman-Yor). The
//! hit-and-miss measurement model gives exact marginal cluster likelihoods
//! for the categorical features, and an optional Gaussian regression layer
//! propagates linkage uncertainty into coefficient posteriors while feeding
//! regression evidence back into the matching process.

pub mod corpus;
pub mod datagen;
pub mod eval;
pub mod hitmiss;
pub mod numeric;
pub mod partition;
pub mod priors;
pub mod regression;
pub mod sampler;
pub mod testing;

pub use corpus::{Corpus, RegressionData};
pub use partition::{Constraint, DbLayout, LinkageState, MoveTarget, PartitionSummary, RecordId};
pub use priors::{PartitionPrior, PypMoments, PypParams};
