//! Block-level self-reconstruction regularizer.
//!
//! For every tapped block: sample a fraction ρ of token positions, project
//! the sampled block input through H1 and the sampled block output through
//! H2, optionally standardize both, predict the (detached) input branch from
//! the output branch with G, and penalize the distance. Block losses are
//! summed and weighted by λ in the total objective.

mod config;
mod head;
mod loss;
mod plan;
mod sampling;

pub(crate) use config::str_enum;
pub use config::{Alignment, LossType, NormAxes, SimConfig, StopgradMode};
pub use head::{head_param_count, Projector, SimHead, SimHeads};
pub use loss::{
    apply_stopgrad, block_sim_loss, combine_losses, normalize_tokens, sim_distance, tap_block_loss, total_sim_loss,
    BlockSample, SimLoss, SimLossReport, TargetStage,
};
pub use plan::{plan_taps, stride_index_map, SimTap, TapPlan, TapSite};
pub use sampling::{sample_count, sample_token_indices};
