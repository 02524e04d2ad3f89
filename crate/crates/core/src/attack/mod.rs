//! Gradient inversion: recover the private transitions behind a leaked TD gradient.

mod candidate;
mod multistart;
mod objective;
mod pca;
mod prior;
mod rgia;

pub use candidate::{CandidateBatch, Relaxation};
pub use multistart::{
    consistency_embedding, multistart_analysis, multistart_with_seeds, start_seed,
    write_consistency_csv, ConsistencyReport, ConsistencyRow, StartResult,
};
pub use objective::{
    reg_dynamics, reg_reward, reg_reward_grad, reg_state, total_objective, AttackProblem,
    ObjectiveTerms, RegWeights,
};
pub use pca::{pca_project, PcaProjection};
pub use prior::{
    dataset_id, estimate_state_prior, train_transition_model, PriorSize, StatePrior,
    TransitionModel, TransitionModelConfig, PRIOR_FLOOR,
};
pub use rgia::{rgia_attack, AttackConfig, Divergence, ReconstructionResult};
