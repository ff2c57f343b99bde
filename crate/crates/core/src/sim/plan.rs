use std::sync::Arc;

use super::config::{Alignment, SimConfig};
use crate::autodiff::Var;
use crate::model::{BlockSpec, Model};

/// One tapped block and how its output tokens line up with its input tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TapSite {
    pub block_index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_tokens: usize,
    pub out_tokens: usize,
    /// Output token j reads input token `map[j]`; `None` means identity.
    pub index_map: Option<Arc<Vec<usize>>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TapPlan {
    pub sites: Vec<TapSite>,
    /// Set when no block is eligible and SIM is a no-op.
    pub warning: Option<String>,
}

impl TapPlan {
    pub fn site(&self, block_index: usize) -> Option<&TapSite> {
        self.sites.iter().find(|s| s.block_index == block_index)
    }

    pub fn block_indices(&self) -> Vec<usize> {
        self.sites.iter().map(|s| s.block_index).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

/// Captured token views of one block's input and output for a forward pass.
#[derive(Clone, Debug)]
pub struct SimTap {
    pub block_index: usize,
    /// B×N_in×C_in
    pub input_tokens: Var,
    /// B×N_out×C_out
    pub output_tokens: Var,
    pub index_map: Option<Arc<Vec<usize>>>,
}

/// Strided index map j ↦ row(j)·s·W_in + col(j)·s, if it lands injectively
/// inside the input grid.
pub fn stride_index_map(spec: &BlockSpec) -> Option<Vec<usize>> {
    let (h_in, w_in) = spec.in_hw;
    let (h_out, w_out) = spec.out_hw;
    let s = spec.stride;
    if s <= 1 || (h_out - 1) * s >= h_in || (w_out - 1) * s >= w_in {
        return None;
    }
    let map: Vec<usize> = (0..h_out * w_out)
        .map(|j| (j / w_out) * s * w_in + (j % w_out) * s)
        .collect();
    let mut seen = vec![false; h_in * w_in];
    for &i in &map {
        if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
            return None;
        }
    }
    Some(map)
}

/// Decide which blocks get a SIM head. Channel changes are always fine since
/// the two projectors absorb them; token-count changes depend on `alignment`.
pub fn plan_taps(model: &Model, config: &SimConfig) -> TapPlan {
    plan_from_specs(model.block_specs(), config.alignment)
}

pub(crate) fn plan_from_specs(specs: &[BlockSpec], alignment: Alignment) -> TapPlan {
    let mut sites = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let index_map = if spec.in_tokens() == spec.out_tokens() {
            None
        } else if alignment == Alignment::StrideAlign {
            match stride_index_map(spec) {
                Some(m) => Some(Arc::new(m)),
                None => continue,
            }
        } else {
            continue;
        };
        sites.push(TapSite {
            block_index: i,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            in_tokens: spec.in_tokens(),
            out_tokens: spec.out_tokens(),
            index_map,
        });
    }
    let warning = sites
        .is_empty()
        .then(|| format!("no eligible blocks under {alignment}; SIM is a no-op"));
    TapPlan { sites, warning }
}
