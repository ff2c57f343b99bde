//! Deterministic training loop, evaluation, ablation sweeps and PCA reports.

mod ablate;
mod optim;
mod pca;
mod run;

pub use ablate::{ablate, mean_std, run_name, Ablation, AblationRow, CellStats};
pub use optim::{coupled_grads, ema_update, grad_global_norm, sgd_step, SgdState};
pub use pca::{pca2, Pca2};
pub use run::{
    argmax_accuracy, build, evaluate, fit, load_data, model_input_shape, train, BlockTrace, Built, MetricsRow,
    RunArtifacts, Split, Trained,
};
