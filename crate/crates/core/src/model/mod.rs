//! Small models with an ordered block list that SIM can tap into.
//!
//! Two families: a plain MLP of affine+ReLU blocks and a residual CNN whose
//! blocks are conv-ReLU-conv plus shortcut, followed by ReLU.

mod layers;

use rand::SeedableRng;

pub use layers::{Conv, Linear};

use crate::autodiff::{Bindings, Group, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sim::{SimTap, TapPlan};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// affine + ReLU
    Linear,
    /// conv-ReLU-conv + shortcut, then ReLU
    ResidualConv,
}

/// Static description of one block's input/output features.
///
/// Linear blocks have a 1×1 grid, so they expose a single token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub stride: usize,
}

impl BlockSpec {
    pub fn in_tokens(&self) -> usize {
        self.in_hw.0 * self.in_hw.1
    }

    pub fn out_tokens(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }

    pub fn shape_preserving(&self) -> bool {
        self.in_hw == self.out_hw && self.in_channels == self.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    /// `None` is the identity shortcut; otherwise a strided 1×1 convolution.
    pub shortcut: Option<Conv>,
}

impl ResidualBlock {
    fn forward<T: Real>(&self, tape: &mut Tape<T>, binds: &Bindings, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, binds, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, binds, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(tape, binds, x)?,
            None => x,
        };
        let y = tape.add(h, skip)?;
        Ok(tape.relu(y))
    }

    fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + self.shortcut.as_ref().map_or(0, Conv::param_count)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Linear(Linear),
    Residual(ResidualBlock),
}

impl Block {
    fn forward<T: Real>(&self, tape: &mut Tape<T>, binds: &Bindings, x: Var) -> Result<Var> {
        match self {
            Block::Linear(l) => {
                let y = l.forward(tape, binds, x)?;
                Ok(tape.relu(y))
            }
            Block::Residual(r) => r.forward(tape, binds, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Block::Linear(l) => l.param_count(),
            Block::Residual(r) => r.param_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResNetSpec {
    pub in_channels: usize,
    pub input_hw: (usize, usize),
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub classes: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    stem: Option<Conv>,
    blocks: Vec<Block>,
    specs: Vec<BlockSpec>,
    head: Linear,
    /// Per-sample input shape, e.g. `[d]` or `[c, h, w]`.
    input_shape: Vec<usize>,
    classes: usize,
    taps: Option<TapPlan>,
}

/// Logits plus one tap per eligible block (empty when taps are disabled).
#[derive(Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub taps: Vec<SimTap>,
}

/// MLP: one linear block per consecutive pair of `widths`, then a classifier.
pub fn build_mlp<T: Real>(widths: &[usize], classes: usize, seed: u64) -> Result<(Model, ParamStore<T>)> {
    if widths.len() < 2 {
        return Err(Error::config(
            "model.widths",
            format!("need at least 2 widths, got {}", widths.len()),
        ));
    }
    if widths.contains(&0) || classes == 0 {
        return Err(Error::config("model.widths", "widths and classes must be positive"));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut blocks = Vec::new();
    let mut specs = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        let l = Linear::new(
            &mut store,
            &format!("blocks.{i:02}.fc"),
            Group::Base,
            pair[0],
            pair[1],
            &mut rng,
        )?;
        blocks.push(Block::Linear(l));
        specs.push(BlockSpec {
            kind: BlockKind::Linear,
            in_channels: pair[0],
            out_channels: pair[1],
            in_hw: (1, 1),
            out_hw: (1, 1),
            stride: 1,
        });
    }
    let head = Linear::new(
        &mut store,
        "head",
        Group::Base,
        *widths.last().unwrap(),
        classes,
        &mut rng,
    )?;
    Ok((
        Model {
            stem: None,
            blocks,
            specs,
            head,
            input_shape: vec![widths[0]],
            classes,
            taps: None,
        },
        store,
    ))
}

/// Stem conv, residual stages (stride 2 at the entry of every stage after
/// the first), global average pooling, affine classifier.
pub fn build_small_resnet<T: Real>(spec: &ResNetSpec, seed: u64) -> Result<(Model, ParamStore<T>)> {
    let bad = spec.in_channels == 0
        || spec.input_hw.0 == 0
        || spec.input_hw.1 == 0
        || spec.stage_channels.is_empty()
        || spec.stage_channels.contains(&0)
        || spec.blocks_per_stage == 0
        || spec.classes == 0;
    if bad {
        return Err(Error::config("model", format!("invalid resnet spec {spec:?}")));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c0 = spec.stage_channels[0];
    let stem = Conv::new(&mut store, "stem", spec.in_channels, c0, 3, 1, 1, &mut rng)?;

    let mut blocks = Vec::new();
    let mut specs = Vec::new();
    let (mut channels, mut hw) = (c0, spec.input_hw);
    for (s, &width) in spec.stage_channels.iter().enumerate() {
        for j in 0..spec.blocks_per_stage {
            let stride = if s > 0 && j == 0 { 2 } else { 1 };
            let i = blocks.len();
            let conv1 = Conv::new(
                &mut store,
                &format!("blocks.{i:02}.conv1"),
                channels,
                width,
                3,
                stride,
                1,
                &mut rng,
            )?;
            let conv2 = Conv::new(
                &mut store,
                &format!("blocks.{i:02}.conv2"),
                width,
                width,
                3,
                1,
                1,
                &mut rng,
            )?;
            let shortcut = if stride != 1 || channels != width {
                Some(Conv::new(
                    &mut store,
                    &format!("blocks.{i:02}.shortcut"),
                    channels,
                    width,
                    1,
                    stride,
                    0,
                    &mut rng,
                )?)
            } else {
                None
            };
            let out_hw = (conv1.out_extent(hw.0), conv1.out_extent(hw.1));
            specs.push(BlockSpec {
                kind: BlockKind::ResidualConv,
                in_channels: channels,
                out_channels: width,
                in_hw: hw,
                out_hw,
                stride,
            });
            blocks.push(Block::Residual(ResidualBlock { conv1, conv2, shortcut }));
            channels = width;
            hw = out_hw;
        }
    }
    let head = Linear::new(&mut store, "head", Group::Base, channels, spec.classes, &mut rng)?;
    Ok((
        Model {
            stem: Some(stem),
            blocks,
            specs,
            head,
            input_shape: vec![spec.in_channels, spec.input_hw.0, spec.input_hw.1],
            classes: spec.classes,
            taps: None,
        },
        store,
    ))
}

impl Model {
    pub fn block_specs(&self) -> &[BlockSpec] {
        &self.specs
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn taps_enabled(&self) -> bool {
        self.taps.is_some()
    }

    pub fn tap_plan(&self) -> Option<&TapPlan> {
        self.taps.as_ref()
    }

    pub fn enable_taps(&mut self, plan: TapPlan) {
        self.taps = Some(plan);
    }

    pub fn disable_taps(&mut self) {
        self.taps = None;
    }

    /// Parameter count by enumerating layer shapes.
    pub fn param_count(&self) -> usize {
        self.stem.as_ref().map_or(0, Conv::param_count)
            + self.blocks.iter().map(Block::param_count).sum::<usize>()
            + self.head.param_count()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, binds: &Bindings, x: Var) -> Result<Var> {
        Ok(self.run(tape, binds, x, false)?.logits)
    }

    /// Forward pass that also captures the token view of every tapped block's
    /// input and output. Logits are identical to [`Model::forward`].
    pub fn forward_with_taps<T: Real>(&self, tape: &mut Tape<T>, binds: &Bindings, x: Var) -> Result<ModelOutput> {
        self.run(tape, binds, x, true)
    }

    fn run<T: Real>(&self, tape: &mut Tape<T>, binds: &Bindings, x: Var, capture: bool) -> Result<ModelOutput> {
        let s = tape.shape(x);
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "model expects B×{:?} input, got {:?}",
                self.input_shape, s
            )));
        }
        let mut h = x;
        if let Some(stem) = &self.stem {
            let y = stem.forward(tape, binds, h)?;
            h = tape.relu(y);
        }
        let plan = if capture { self.taps.as_ref() } else { None };
        let mut taps = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let input = h;
            h = block.forward(tape, binds, h)?;
            if let Some(site) = plan.and_then(|p| p.site(i)) {
                let input_tokens = tape.to_tokens(input)?;
                let output_tokens = tape.to_tokens(h)?;
                taps.push(SimTap {
                    block_index: i,
                    input_tokens,
                    output_tokens,
                    index_map: site.index_map.clone(),
                });
            }
        }
        if self.stem.is_some() {
            let pooled = tape.mean_axes(h, &[2, 3])?;
            let c = tape.shape(pooled)[1];
            let b = tape.shape(pooled)[0];
            h = tape.reshape(pooled, &[b, c])?;
        }
        let logits = self.head.forward(tape, binds, h)?;
        Ok(ModelOutput { logits, taps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{plan_taps, Alignment, SimConfig};
    use crate::tensor::Tensor;

    fn small_resnet() -> ResNetSpec {
        ResNetSpec {
            in_channels: 1,
            input_hw: (16, 16),
            stage_channels: vec![8, 16],
            blocks_per_stage: 2,
            classes: 3,
        }
    }

    #[test]
    fn mlp_param_count() {
        let (m, store) = build_mlp::<f64>(&[2, 16, 16], 2, 1).unwrap();
        assert_eq!(m.blocks().len(), 2);
        assert_eq!(m.param_count(), 2 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2);
        assert_eq!(m.param_count(), 354);
        assert_eq!(store.count_elements(None), 354);
    }

    #[test]
    fn mlp_requires_two_widths() {
        assert!(matches!(build_mlp::<f64>(&[], 2, 0), Err(Error::Config { .. })));
        assert!(matches!(build_mlp::<f64>(&[4], 2, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = build_mlp::<f64>(&[3, 5, 4], 2, 42).unwrap();
        let (_, b) = build_mlp::<f64>(&[3, 5, 4], 2, 42).unwrap();
        let (_, c) = build_mlp::<f64>(&[3, 5, 4], 2, 43).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        assert_ne!(a.snapshot(), c.snapshot());
    }

    #[test]
    fn identity_mlp_is_relu() {
        let (m, mut store) = build_mlp::<f64>(&[4, 4], 4, 0).unwrap();
        let Block::Linear(l) = &m.blocks()[0] else {
            unreachable!()
        };
        let mut eye = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        store.get_mut(l.weight).tensor = eye.clone();
        store.get_mut(m.head.weight).tensor = eye;
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_f64(vec![1, 4], &[0.0, 1.5, 2.0, 0.25]).unwrap());
        let y = m.forward(&mut tape, &binds, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.5, 2.0, 0.25]);
    }

    #[test]
    fn resnet_block_structure() {
        let (m, store) = build_small_resnet::<f64>(&small_resnet(), 3).unwrap();
        assert_eq!(m.blocks().len(), 4);
        let preserving = m.block_specs().iter().filter(|s| s.shape_preserving()).count();
        assert_eq!(preserving, 3);
        assert_eq!(m.block_specs()[2].stride, 2);
        assert_eq!(m.block_specs()[2].out_hw, (8, 8));
        assert_eq!(store.count_elements(None), m.param_count());
        // stem 1·8·9, stage 1 two blocks of 2·8·8·9, stage 2 entry 8·16·9 + 16·16·9 + 8·16,
        // stage 2 block 2·16·16·9, classifier 16·3 + 3
        let expect = 72 + 2 * 1152 + (1152 + 2304 + 128) + 4608 + 51;
        assert_eq!(m.param_count(), expect);
    }

    #[test]
    fn resnet_logit_shape() {
        let (m, store) = build_small_resnet::<f64>(&small_resnet(), 3).unwrap();
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(vec![2, 1, 16, 16], 0.5));
        let y = m.forward(&mut tape, &binds, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);

        let bad = tape.constant(Tensor::zeros(vec![2, 1, 8, 8]));
        assert!(matches!(m.forward(&mut tape, &binds, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let (m, mut store) = build_small_resnet::<f64>(&small_resnet(), 9).unwrap();
        let Block::Residual(r) = &m.blocks()[1] else {
            unreachable!()
        };
        assert!(r.shortcut.is_none());
        for id in [r.conv1.kernel, r.conv2.kernel] {
            let t = &mut store.get_mut(id).tensor;
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape, false);
        let data: Vec<f64> = (0..2 * 8 * 16 * 16).map(|i| ((i * 37) % 11) as f64 / 7.0).collect();
        let x = tape.constant(Tensor::from_f64(vec![2, 8, 16, 16], &data).unwrap());
        let y = m.blocks()[1].forward(&mut tape, &binds, x).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn taps_are_read_only() {
        let (mut m, store) = build_mlp::<f64>(&[2, 8, 8], 3, 5).unwrap();
        let plan = plan_taps(&m, &SimConfig::default());
        m.enable_taps(plan);
        let input = Tensor::from_f64(vec![3, 2], &[0.1, -0.4, 1.0, 2.0, -3.0, 0.5]).unwrap();

        let mut tape = Tape::new();
        let binds = store.bind(&mut tape, true);
        let x = tape.constant(input.clone());
        let out = m.forward_with_taps(&mut tape, &binds, x).unwrap();
        assert_eq!(out.taps.len(), 2);
        assert_eq!(tape.shape(out.taps[0].input_tokens), &[3, 1, 2]);
        assert_eq!(tape.shape(out.taps[0].output_tokens), &[3, 1, 8]);
        let tapped = tape.value(out.logits).clone();

        let mut tape2 = Tape::new();
        let binds2 = store.bind(&mut tape2, true);
        let x2 = tape2.constant(input);
        let plain = m.forward(&mut tape2, &binds2, x2).unwrap();
        assert_eq!(&tapped, tape2.value(plain));

        m.disable_taps();
        let mut tape3 = Tape::new();
        let binds3 = store.bind(&mut tape3, true);
        let x3 = tape3.constant(Tensor::zeros(vec![1, 2]));
        assert!(m.forward_with_taps(&mut tape3, &binds3, x3).unwrap().taps.is_empty());
    }

    #[test]
    fn resnet_taps_follow_alignment_policy() {
        let (mut m, _) = build_small_resnet::<f64>(&small_resnet(), 3).unwrap();
        let plan = plan_taps(&m, &SimConfig::default());
        assert_eq!(plan.block_indices(), vec![0, 1, 3]);
        m.enable_taps(plan);
        let cfg = SimConfig {
            alignment: Alignment::StrideAlign,
            ..SimConfig::default()
        };
        assert_eq!(plan_taps(&m, &cfg).block_indices(), vec![0, 1, 2, 3]);
    }
}
