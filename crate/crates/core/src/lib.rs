//! Pool-based active learning benchmark engine.
//!
//! A run starts from a few random labeled candidates and repeatedly asks a
//! [`engine::Proposer`] for the next unlabeled candidate until the pool
//! optimum has been observed. Proposers cover four surrogate models with UCB
//! acquisition, a random walk, and an LLM that proposes free text which is
//! matched back onto the pool.

pub mod acquisition;
pub mod analytics;
pub mod bnn;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod forest;
pub mod gbt;
pub mod gpr;
pub mod llm;
pub mod rng;
pub mod surrogate;

pub use dataset::{Candidate, Dataset, DatasetRef, DatasetSpec, Goal, SyntheticKind};
pub use engine::{
    run_active_learning, PromptFormat, ProposalContext, ProposalOutcome, Proposer, ProposerKind,
    RunConfig, StepRecord, Trajectory, TrajectoryHeader,
};
pub use error::{ClientError, Error, Result};

use surrogate::{RandomWalkProposer, SurrogateKind, SurrogateProposer};

/// Builds the proposer named by `config.proposer`.
pub fn make_proposer(config: &RunConfig) -> Result<Box<dyn Proposer + Send>> {
    Ok(match config.proposer {
        ProposerKind::RandomWalk => Box::new(RandomWalkProposer::new(config.seed)),
        ProposerKind::Llm => Box::new(llm::LlmProposer::from_config(config)?),
        kind => {
            let sk = SurrogateKind::from_proposer(kind).expect("surrogate proposer");
            Box::new(SurrogateProposer::new(sk, config.alpha, config.seed, config.model))
        }
    })
}
