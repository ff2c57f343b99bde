use super::config::{LossType, NormAxes, SimConfig, StopgradMode};
use super::head::{SimHead, SimHeads};
use super::plan::SimTap;
use super::sampling::sample_token_indices;
use crate::autodiff::{Bindings, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Standardize a B×n×D tensor: (h − μ) / (σ + ε) with population σ.
///
/// `Token` statistics are per (batch, channel) over the n tokens and fall
/// back to `Flat` when n == 1.
pub fn normalize_tokens<T: Real>(tape: &mut Tape<T>, h: Var, mode: NormAxes, eps: f64) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("normalize_tokens needs B×n×D, got {s:?}")));
    }
    if s[1] == 0 {
        return Err(Error::Degenerate("normalize_tokens with n = 0".into()));
    }
    let axes: &[usize] = match mode {
        NormAxes::Token if s[1] >= 2 => &[1],
        _ => &[1, 2],
    };
    let (mean, var) = tape.moments(h, axes)?;
    let std = tape.sqrt(var);
    let denom = tape.add_scalar(std, T::lit(eps));
    let centered = tape.sub(h, mean)?;
    tape.div(centered, denom)
}

/// Where along the target branch a stop-gradient may be inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetStage {
    /// sampled block input, before H1
    Raw,
    /// after H1 (and normalization)
    Processed,
}

/// Detach `v` iff `mode` places the stop-gradient at `stage`.
pub fn apply_stopgrad<T: Real>(tape: &mut Tape<T>, v: Var, mode: StopgradMode, stage: TargetStage) -> Var {
    match (mode, stage) {
        (StopgradMode::Literal, TargetStage::Processed) | (StopgradMode::Feature, TargetStage::Raw) => tape.detach(v),
        _ => v,
    }
}

/// Distance between target and prediction, both B×n×D.
pub fn sim_distance<T: Real>(tape: &mut Tape<T>, target: Var, pred: Var, loss_type: LossType) -> Result<Var> {
    if tape.shape(target) != tape.shape(pred) {
        return Err(Error::Dimension(format!(
            "target {:?} vs prediction {:?}",
            tape.shape(target),
            tape.shape(pred)
        )));
    }
    match loss_type {
        LossType::Mse | LossType::MseNormalized => {
            let d = tape.sub(pred, target)?;
            let sq = tape.square(d);
            tape.mean(sq)
        }
        LossType::L1 => {
            let d = tape.sub(pred, target)?;
            let a = tape.abs(d);
            tape.mean(a)
        }
        LossType::Cosine => {
            let axis = tape.shape(target).len() - 1;
            let floor = T::lit(1e-8);
            let dot = tape.mul(target, pred)?;
            let dot = tape.sum_axes(dot, &[axis])?;
            let norm = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
                let sq = tape.square(v);
                let s = tape.sum_axes(sq, &[axis])?;
                let n = tape.sqrt(s);
                Ok(tape.clamp_min(n, floor))
            };
            let nt = norm(tape, target)?;
            let np = norm(tape, pred)?;
            let denom = tape.mul(nt, np)?;
            let cos = tape.div(dot, denom)?;
            let mean = tape.mean(cos)?;
            let neg = tape.scale(mean, -T::one());
            Ok(tape.add_scalar(neg, T::one()))
        }
    }
}

/// Loss of one block given the projected target branch `target` (from the
/// block input) and the projected output branch `pred_input`.
///
/// For `mse_normalized` both branches are standardized first; in literal
/// stop-gradient mode the processed target is detached here.
pub fn block_sim_loss<T: Real>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    target: Var,
    pred_input: Var,
    head: &SimHead,
    cfg: &SimConfig,
) -> Result<Var> {
    if tape.shape(target) != tape.shape(pred_input) {
        return Err(Error::Dimension(format!(
            "target {:?} vs predictor input {:?}",
            tape.shape(target),
            tape.shape(pred_input)
        )));
    }
    let (target, pred_input) = if cfg.loss_type == LossType::MseNormalized {
        (
            normalize_tokens(tape, target, cfg.norm_axes, cfg.epsilon)?,
            normalize_tokens(tape, pred_input, cfg.norm_axes, cfg.epsilon)?,
        )
    } else {
        (target, pred_input)
    };
    let target = apply_stopgrad(tape, target, cfg.stopgrad_mode, TargetStage::Processed);
    let pred = head.g.forward_tokens(tape, binds, pred_input)?;
    sim_distance(tape, target, pred, cfg.loss_type)
}

/// Token indices actually gathered for one block in one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSample {
    pub block_index: usize,
    pub input_indices: Vec<usize>,
    pub output_indices: Vec<usize>,
}

impl BlockSample {
    /// Both branches read the same spatial positions (after alignment).
    pub fn aligned(&self, index_map: Option<&[usize]>) -> bool {
        match index_map {
            None => self.input_indices == self.output_indices,
            Some(m) => {
                self.input_indices.len() == self.output_indices.len()
                    && self
                        .output_indices
                        .iter()
                        .zip(&self.input_indices)
                        .all(|(&o, &i)| m[o] == i)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimLossReport {
    pub per_block: Vec<(usize, f64)>,
    pub total: f64,
    pub sampled_counts: Vec<usize>,
    pub samples: Vec<BlockSample>,
}

#[derive(Debug)]
pub struct SimLoss {
    /// Scalar on the tape; a constant 0 when there are no taps.
    pub loss: Var,
    pub report: SimLossReport,
}

/// Seed of the sampling stream for (block, step).
pub(crate) fn sampling_rng(cfg: &SimConfig, block_index: usize, step: u64) -> rng::Rng {
    rng::keyed(rng::derive_seed(cfg.sim_seed, "sampling"), &[block_index as u64, step])
}

/// Loss of one tapped block. `indices` overrides sampling; `None` uses every token.
pub fn tap_block_loss<T: Real>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    tap: &SimTap,
    head: &SimHead,
    cfg: &SimConfig,
    output_indices: Option<&[usize]>,
) -> Result<(Var, BlockSample)> {
    let n_in = tape.shape(tap.input_tokens)[1];
    let n_out = tape.shape(tap.output_tokens)[1];
    if tap.index_map.is_none() && n_in != n_out {
        return Err(Error::Contract(format!(
            "block {} has {n_in} input and {n_out} output tokens but no alignment map",
            tap.block_index
        )));
    }
    let (z_in, z_out, sample) = match output_indices {
        Some(out_idx) => {
            let in_idx: Vec<usize> = match &tap.index_map {
                Some(m) => out_idx.iter().map(|&j| m[j]).collect(),
                None => out_idx.to_vec(),
            };
            let z_in = tape.index_select_tokens(tap.input_tokens, &in_idx)?;
            let z_out = tape.index_select_tokens(tap.output_tokens, out_idx)?;
            let sample = BlockSample {
                block_index: tap.block_index,
                input_indices: in_idx,
                output_indices: out_idx.to_vec(),
            };
            (z_in, z_out, sample)
        }
        None => {
            let z_in = match &tap.index_map {
                Some(m) => tape.index_select_tokens(tap.input_tokens, m)?,
                None => tap.input_tokens,
            };
            let all: Vec<usize> = (0..n_out).collect();
            let sample = BlockSample {
                block_index: tap.block_index,
                input_indices: tap.index_map.as_ref().map_or_else(|| all.clone(), |m| m.to_vec()),
                output_indices: all,
            };
            (z_in, tap.output_tokens, sample)
        }
    };
    let z_in = apply_stopgrad(tape, z_in, cfg.stopgrad_mode, TargetStage::Raw);
    let h_in = head.h1.project(tape, binds, z_in)?;
    let h_out = head.h2.project(tape, binds, z_out)?;
    let loss = block_sim_loss(tape, binds, h_in, h_out, head, cfg)?;
    Ok((loss, sample))
}

/// Sum of block losses over all taps, in block-index order.
///
/// Each block samples once per step from its own substream keyed by
/// (sim_seed, block_index, step), shared by both branches and the whole batch.
pub fn total_sim_loss<T: Real>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    taps: &[SimTap],
    heads: &SimHeads,
    cfg: &SimConfig,
    step: u64,
) -> Result<SimLoss> {
    let mut ordered: Vec<&SimTap> = taps.iter().collect();
    ordered.sort_by_key(|t| t.block_index);
    let mut report = SimLossReport::default();
    let mut total: Option<Var> = None;
    for tap in ordered {
        let head = heads
            .get(tap.block_index)
            .ok_or_else(|| Error::Contract(format!("no SIM head for tapped block {}", tap.block_index)))?;
        let n_out = tape.shape(tap.output_tokens)[1];
        let idx = sample_token_indices(n_out, cfg.rho, &mut sampling_rng(cfg, tap.block_index, step))?;
        let (loss, sample) = tap_block_loss(tape, binds, tap, head, cfg, Some(&idx))?;
        report.per_block.push((tap.block_index, tape.scalar(loss).as_f64()));
        report.sampled_counts.push(idx.len());
        report.samples.push(sample);
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    let loss = match total {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    report.total = tape.scalar(loss).as_f64();
    Ok(SimLoss { loss, report })
}

/// task + λ·sim, both terms differentiable.
pub fn combine_losses<T: Real>(tape: &mut Tape<T>, task: Var, sim: Var, lambda: f64) -> Result<Var> {
    for (name, v) in [("task", task), ("sim", sim)] {
        if tape.value(v).len() != 1 {
            return Err(Error::Contract(format!("{name} loss is not a scalar")));
        }
        let x = tape.scalar(v);
        if !x.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {x}")));
        }
    }
    if !lambda.is_finite() {
        return Err(Error::Numeric(format!("lambda is {lambda}")));
    }
    let weighted = tape.scale(sim, T::lit(lambda));
    tape.add(task, weighted)
}
