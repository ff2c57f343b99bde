//! Post-hoc summaries of a finished run directory.

use std::path::Path;

use crate::autodiff::{Group, Tape};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::output;
use crate::rng::SeedStreams;
use crate::sim::plan_taps;
use crate::tensor::Tensor;
use crate::train::{build, load_data, pca2, MetricsRow, Pca2};

const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overhead {
    pub base_params: usize,
    pub head_params: usize,
}

impl Overhead {
    pub fn ratio(&self) -> f64 {
        self.head_params as f64 / self.base_params as f64
    }
}

/// Base vs SIM-head parameter counts for `cfg`'s model. A run trained without
/// SIM reports the heads it would have had at the configured (or default) rho.
pub fn overhead(cfg: &TrainConfig) -> Result<Overhead> {
    let mut cfg = cfg.clone();
    cfg.sim_enabled = true;
    if cfg.sim.rho == 0.0 {
        cfg.sim.rho = crate::sim::SimConfig::default().rho;
    }
    let streams = SeedStreams::from_master(cfg.seed);
    let (train, _) = load_data(&cfg, streams.data)?;
    let built = build::<f64>(&cfg, train.feature_shape(), train.class_count)?;
    Ok(Overhead {
        base_params: built.store.count_elements(Some(Group::Base)),
        head_params: built.store.count_elements(Some(Group::SimHead)),
    })
}

/// Two-component projection of one tapped block's output features.
#[derive(Clone, Debug)]
pub struct BlockProjection {
    pub block_index: usize,
    pub labels: Vec<usize>,
    pub pca: Pca2,
}

/// `pca2` of each tapped block's output on the test split, with the final
/// parameters of the run loaded. Spatial tokens are averaged per sample.
pub fn block_projections(cfg: &TrainConfig, params: &crate::autodiff::ParamSnapshot) -> Result<Vec<BlockProjection>> {
    let streams = SeedStreams::from_master(cfg.seed);
    let (train, test) = load_data(cfg, streams.data)?;
    let mut built = build::<f64>(cfg, train.feature_shape(), train.class_count)?;
    built.store.load_snapshot(params)?;
    if !built.model.taps_enabled() {
        let plan = plan_taps(&built.model, &built.sim);
        built.model.enable_taps(plan);
    }
    let blocks = built.model.tap_plan().map_or_else(Vec::new, |p| p.block_indices());
    let mut rows: Vec<(usize, Vec<f64>)> = blocks.iter().map(|_| (0, Vec::new())).collect();
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let (x, _) = test.gather::<f64>(chunk);
        let mut tape = Tape::new();
        let binds = built.store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = built.model.forward_with_taps(&mut tape, &binds, xv)?;
        for tap in &out.taps {
            let k = blocks
                .iter()
                .position(|&b| b == tap.block_index)
                .expect("tap from plan");
            let v = tape.value(tap.output_tokens);
            let (n, c) = (v.shape()[1], v.shape()[2]);
            for sample in v.data().chunks(n * c) {
                let mut mean = vec![0.0; c];
                for token in sample.chunks(c) {
                    mean.iter_mut().zip(token).for_each(|(m, &t)| *m += t);
                }
                rows[k].1.extend(mean.iter().map(|m| m / n as f64));
                rows[k].0 = c;
            }
        }
    }
    blocks
        .iter()
        .zip(rows)
        .map(|(&b, (c, data))| {
            let features = Tensor::new(vec![test.len(), c], data)?;
            Ok(BlockProjection {
                block_index: b,
                labels: test.labels.clone(),
                pca: pca2(&features)?,
            })
        })
        .collect()
}

pub const PCA_HEADER: &str = "label,pc1,pc2";

pub fn projection_csv(p: &BlockProjection) -> String {
    let mut out = format!("{PCA_HEADER}\n");
    for (label, xy) in p.labels.iter().zip(p.pca.projection.data().chunks(2)) {
        out.push_str(&format!(
            "{label},{},{}\n",
            output::format_real(xy[0]),
            output::format_real(xy[1])
        ));
    }
    out
}

/// Loaded contents of a run directory written by [`output::write_run`].
pub struct RunDir {
    pub config: TrainConfig,
    pub metrics: Vec<MetricsRow>,
    pub params: crate::autodiff::ParamSnapshot,
}

pub fn read_run(dir: &Path) -> Result<RunDir> {
    if !dir.is_dir() {
        return Err(Error::Usage(format!("{} is not a run directory", dir.display())));
    }
    Ok(RunDir {
        config: TrainConfig::load(dir.join("config.resolved"))?,
        metrics: output::read_metrics_csv(dir.join("metrics.csv"))?,
        params: output::read_snapshot(dir.join("params.json"))?,
    })
}
