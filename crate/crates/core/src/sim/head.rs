use super::config::SimConfig;
use super::plan::TapPlan;
use crate::autodiff::{Bindings, Group, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::Linear;
use crate::rng;
use crate::tensor::Real;

/// Three affine layers, ReLU after the first two.
#[derive(Clone, Debug)]
pub struct Projector {
    pub layers: [Linear; 3],
}

impl Projector {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_width: usize,
        cfg: &SimConfig,
        rng: &mut rng::Rng,
    ) -> Result<Self> {
        let h = cfg.proj_hidden;
        let l0 = Linear::new(store, &format!("{prefix}.l0"), Group::SimHead, in_width, h, rng)?;
        let l1 = Linear::new(store, &format!("{prefix}.l1"), Group::SimHead, h, h, rng)?;
        let l2 = Linear::new(store, &format!("{prefix}.l2"), Group::SimHead, h, cfg.proj_dim, rng)?;
        Ok(Projector { layers: [l0, l1, l2] })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width
    }

    pub fn out_width(&self) -> usize {
        self.layers[2].out_width
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// B×n×C → B×n×D, token by token.
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, binds: &Bindings, tokens: Var) -> Result<Var> {
        let c = tape.shape(tokens).last().copied();
        if tape.shape(tokens).len() != 3 || c != Some(self.in_width()) {
            return Err(Error::Dimension(format!(
                "projector expects B×n×{}, got {:?}",
                self.in_width(),
                tape.shape(tokens)
            )));
        }
        let h = self.layers[0].forward_tokens(tape, binds, tokens)?;
        let h = tape.relu(h);
        let h = self.layers[1].forward_tokens(tape, binds, h)?;
        let h = tape.relu(h);
        self.layers[2].forward_tokens(tape, binds, h)
    }
}

/// Projectors for the block input (`h1`) and output (`h2`) plus the
/// single-layer predictor `g`.
#[derive(Clone, Debug)]
pub struct SimHead {
    pub block_index: usize,
    pub h1: Projector,
    pub h2: Projector,
    pub g: Linear,
}

impl SimHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        block_index: usize,
        c_in: usize,
        c_out: usize,
        cfg: &SimConfig,
        rng: &mut rng::Rng,
    ) -> Result<Self> {
        let prefix = format!("sim.block{block_index:02}");
        let h1 = Projector::new(store, &format!("{prefix}.h1"), c_in, cfg, rng)?;
        let h2 = Projector::new(store, &format!("{prefix}.h2"), c_out, cfg, rng)?;
        let g = Linear::new(
            store,
            &format!("{prefix}.g"),
            Group::SimHead,
            cfg.proj_dim,
            cfg.proj_dim,
            rng,
        )?;
        Ok(SimHead { block_index, h1, h2, g })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.h1.param_ids();
        ids.extend(self.h2.param_ids());
        ids.extend([self.g.weight, self.g.bias]);
        ids
    }
}

/// One head per tapped block, in plan order.
#[derive(Clone, Debug, Default)]
pub struct SimHeads {
    heads: Vec<SimHead>,
}

impl SimHeads {
    /// Heads draw from a stream of their own, derived from `cfg.sim_seed`.
    pub fn new<T: Real>(plan: &TapPlan, cfg: &SimConfig, store: &mut ParamStore<T>) -> Result<Self> {
        let mut rng = rng::stream(cfg.sim_seed, "heads");
        let heads = plan
            .sites
            .iter()
            .map(|s| SimHead::new(store, s.block_index, s.in_channels, s.out_channels, cfg, &mut rng))
            .collect::<Result<_>>()?;
        Ok(SimHeads { heads })
    }

    pub fn from_heads(heads: Vec<SimHead>) -> Self {
        SimHeads { heads }
    }

    pub fn get(&self, block_index: usize) -> Option<&SimHead> {
        self.heads.iter().find(|h| h.block_index == block_index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SimHead> {
        self.heads.iter()
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

/// Closed-form parameter count of one head.
pub fn head_param_count(c_in: usize, c_out: usize, cfg: &SimConfig) -> usize {
    let (h, d) = (cfg.proj_hidden, cfg.proj_dim);
    let projector = |c: usize| (c * h + h) + (h * h + h) + (h * d + d);
    projector(c_in) + projector(c_out) + d * d + d
}
