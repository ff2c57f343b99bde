//! Finite-difference checks of the combined objective on tiny models.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{finite_diff_check, GradCheckReport};
use crate::config::{ModelKind, TrainConfig};
use crate::error::Result;
use crate::rng;
use crate::sim::{total_sim_loss, Alignment, LossType, StopgradMode};
use crate::tensor::Tensor;
use crate::train::build;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
const BATCH: usize = 2;

/// A tiny configuration of `kind` with SIM on or off and λ = 1.
pub fn check_config(kind: ModelKind, sim: bool, loss_type: LossType, stopgrad: StopgradMode) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed: 11,
        ..TrainConfig::default()
    };
    cfg.model.kind = kind;
    match kind {
        ModelKind::Mlp => {
            cfg.model.widths = vec![5, 4];
            cfg.model.classes = 3;
        }
        ModelKind::Resnet => {
            cfg.model.stage_channels = vec![2, 3];
            cfg.model.blocks_per_stage = 1;
            cfg.model.in_channels = 1;
            cfg.model.input_hw = 4;
            cfg.model.classes = 2;
        }
    }
    cfg.sim_enabled = sim;
    cfg.sim.rho = 0.5;
    cfg.sim.lambda = 1.0;
    cfg.sim.proj_hidden = 4;
    cfg.sim.proj_dim = 3;
    cfg.sim.alignment = Alignment::StrideAlign;
    cfg.sim.loss_type = loss_type;
    cfg.sim.stopgrad_mode = stopgrad;
    cfg
}

fn input_shape(cfg: &TrainConfig) -> Vec<usize> {
    match cfg.model.kind {
        ModelKind::Mlp => vec![3],
        ModelKind::Resnet => vec![cfg.model.in_channels, cfg.model.input_hw, cfg.model.input_hw],
    }
}

/// Tape-vs-finite-difference report for task + λ·sim on one fixed batch.
pub fn gradcheck(cfg: &TrainConfig, step: f64) -> Result<GradCheckReport> {
    let shape = input_shape(cfg);
    let mut built = build::<f64>(cfg, &shape, cfg.model.classes)?;
    let mut r = rng::keyed(cfg.seed, &[0x6763]);
    // Zero biases leave dead units exactly on the ReLU kink, where central
    // differences see half a slope.
    let ids: Vec<_> = built.store.ids_by_name().collect();
    for id in ids {
        let p = built.store.get_mut(id);
        if p.name.ends_with("bias") {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = 0.1 * r.sample::<f64, _>(StandardNormal));
        }
    }
    let mut sample_shape = vec![BATCH];
    sample_shape.extend_from_slice(&shape);
    let data: Vec<f64> = (0..sample_shape.iter().product::<usize>())
        .map(|_| r.sample(StandardNormal))
        .collect();
    let x = Tensor::new(sample_shape, data)?;
    let labels: Vec<usize> = (0..BATCH).map(|i| i % cfg.model.classes).collect();
    let lambda = cfg.sim.lambda;
    finite_diff_check(&built.store, step, |tape, binds| {
        let xv = tape.constant(x.clone());
        let out = built.model.forward_with_taps(tape, binds, xv)?;
        let task = tape.softmax_cross_entropy(out.logits, &labels)?;
        if !built.sim_active {
            return Ok(task);
        }
        let sim = total_sim_loss(tape, binds, &out.taps, &built.heads, &built.sim, 0)?;
        let weighted = tape.scale(sim.loss, lambda);
        tape.add(task, weighted)
    })
}

/// Every loss type under both stop-gradient modes, or the plain task loss
/// when `sim` is off. Labels read `loss_type/stopgrad_mode`.
pub fn gradcheck_suite(kind: ModelKind, sim: bool, step: f64) -> Result<Vec<(String, GradCheckReport)>> {
    if !sim {
        let cfg = check_config(kind, false, LossType::MseNormalized, StopgradMode::Literal);
        return Ok(vec![("task".into(), gradcheck(&cfg, step)?)]);
    }
    let mut out = Vec::new();
    for loss in [LossType::Mse, LossType::MseNormalized, LossType::L1, LossType::Cosine] {
        for mode in [StopgradMode::Literal, StopgradMode::Feature] {
            let cfg = check_config(kind, true, loss, mode);
            out.push((format!("{}/{}", loss.as_str(), mode.as_str()), gradcheck(&cfg, step)?));
        }
    }
    Ok(out)
}
