use crate::autodiff::{Group, ParamSnapshot, ParamStore, Tape};
use crate::config::{DataKind, ModelKind, Precision, TrainConfig};
use crate::data::{self, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::model::{build_mlp, build_small_resnet, Model, ResNetSpec};
use crate::rng::{derive_keyed, derive_seed, SeedStreams};
use crate::sim::{combine_losses, plan_taps, total_sim_loss, SimConfig, SimHeads};
use crate::tensor::{Real, Tensor};

use super::optim::{coupled_grads, ema_update, grad_global_norm, sgd_step, SgdState};

const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub split: Split,
    pub task_loss: f64,
    pub sim_loss: f64,
    pub total_loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub grad_norm_ema: f64,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    pub step: u64,
    pub block_index: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    /// One train row per step, one test row per epoch.
    pub metrics: Vec<MetricsRow>,
    /// Recorded when `output.per_block_trace` is set.
    pub per_block_sim: Option<Vec<BlockTrace>>,
    pub final_params_digest: u64,
    pub snapshot: ParamSnapshot,
    /// Digest of the base-group parameters after every epoch.
    pub base_digests: Vec<u64>,
    pub tapped_blocks: Vec<usize>,
    pub warnings: Vec<String>,
}

impl RunArtifacts {
    pub fn train_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.metrics.iter().filter(|r| r.split == Split::Train)
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.metrics
            .iter()
            .rev()
            .find(|r| r.split == Split::Test)
            .map(|r| r.accuracy)
    }

    pub fn mean_sim_loss(&self) -> f64 {
        let (sum, n) = self
            .train_rows()
            .fold((0.0, 0usize), |(s, n), r| (s + r.sim_loss, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// A model with its parameters and (possibly empty) SIM heads.
#[derive(Clone, Debug)]
pub struct Built<T> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub heads: SimHeads,
    /// `cfg.sim` with the run's derived `sim_seed`.
    pub sim: SimConfig,
    pub sim_active: bool,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub artifacts: RunArtifacts,
    pub built: Built<T>,
    pub train: Dataset,
    pub test: Dataset,
}

/// Per-sample input shape the configured model expects.
pub fn model_input_shape(cfg: &TrainConfig, feature_len: usize) -> Result<Vec<usize>> {
    match cfg.model.kind {
        ModelKind::Mlp => Ok(vec![feature_len]),
        ModelKind::Resnet => {
            let (c, hw) = (cfg.model.in_channels, cfg.model.input_hw);
            if c * hw * hw != feature_len {
                return Err(Error::config(
                    "model.input_hw",
                    format!("{c}×{hw}×{hw} input does not match {feature_len} features per sample"),
                ));
            }
            Ok(vec![c, hw, hw])
        }
    }
}

/// Train and test splits, reshaped for the configured model.
pub fn load_data(cfg: &TrainConfig, data_seed: u64) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let (train, test) = match d.kind {
        DataKind::Blobs | DataKind::NoisyBlobs => {
            let train = data::gen_blobs(d.n, d.classes, d.dim, d.noise, derive_keyed(data_seed, &[0]))?;
            let test = data::gen_blobs(d.test_n, d.classes, d.dim, d.noise, derive_keyed(data_seed, &[1]))?;
            let train = if d.kind == DataKind::NoisyBlobs {
                data::gen_noisy_labels(&train, d.flip_rate, derive_keyed(data_seed, &[2]))?
            } else {
                train
            };
            (train, test)
        }
        DataKind::Csv => (
            data::load_csv(&d.train_path, &d.label_column, None)?,
            data::load_csv(&d.test_path, &d.label_column, None)?,
        ),
        DataKind::Idx => (
            data::load_idx(&d.train_images, &d.train_labels)?,
            data::load_idx(&d.test_images, &d.test_labels)?,
        ),
    };
    if train.feature_len() != test.feature_len() {
        return Err(Error::Dimension(format!(
            "train has {} features per sample, test {}",
            train.feature_len(),
            test.feature_len()
        )));
    }
    let k = train.class_count.max(test.class_count);
    let shape = model_input_shape(cfg, train.feature_len())?;
    let mut train = train.reshaped(&shape)?;
    let mut test = test.reshaped(&shape)?;
    train.class_count = k;
    test.class_count = k;
    Ok((train, test))
}

/// Model, parameters and heads for `cfg`, drawing from the named streams.
pub fn build<T: Real>(cfg: &TrainConfig, input_shape: &[usize], data_classes: usize) -> Result<Built<T>> {
    let streams = SeedStreams::from_master(cfg.seed);
    let classes = if cfg.model.classes == 0 {
        data_classes
    } else {
        cfg.model.classes
    };
    if classes < data_classes {
        return Err(Error::config(
            "model.classes",
            format!("{classes} classes but the data has {data_classes}"),
        ));
    }
    let (mut model, mut store) = match cfg.model.kind {
        ModelKind::Mlp => {
            let mut widths = vec![input_shape.iter().product()];
            widths.extend_from_slice(&cfg.model.widths);
            build_mlp::<T>(&widths, classes, streams.init)?
        }
        ModelKind::Resnet => {
            let spec = ResNetSpec {
                in_channels: input_shape[0],
                input_hw: (input_shape[1], input_shape[2]),
                stage_channels: cfg.model.stage_channels.clone(),
                blocks_per_stage: cfg.model.blocks_per_stage,
                classes,
            };
            build_small_resnet::<T>(&spec, streams.init)?
        }
    };
    let sim = SimConfig {
        sim_seed: streams.sim,
        ..cfg.sim.clone()
    };
    let mut warnings = Vec::new();
    let sim_active = cfg.sim_active();
    let heads = if sim_active {
        let plan = plan_taps(&model, &sim);
        warnings.extend(plan.warning.clone());
        let heads = SimHeads::new(&plan, &sim, &mut store)?;
        model.enable_taps(plan);
        heads
    } else {
        SimHeads::default()
    };
    Ok(Built {
        model,
        store,
        heads,
        sim,
        sim_active,
        warnings,
    })
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn argmax_accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Mean cross-entropy and accuracy over `ds`, without recording gradients.
pub fn evaluate<T: Real>(model: &Model, store: &ParamStore<T>, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Degenerate("evaluation on an empty dataset".into()));
    }
    let (mut loss, mut hits) = (0.0, 0.0);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, y) = ds.gather::<T>(chunk);
        let mut tape = Tape::new();
        let binds = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let logits = model.forward(&mut tape, &binds, xv)?;
        let ce = tape.softmax_cross_entropy(logits, &y)?;
        loss += tape.scalar(ce).as_f64() * chunk.len() as f64;
        hits += argmax_accuracy(tape.value(logits), &y) * chunk.len() as f64;
    }
    let n = ds.len() as f64;
    Ok((loss / n, hits / n))
}

fn finite_or(step: u64, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            step: step as usize,
            term: term.into(),
        })
    }
}

/// Full training run at precision `T`.
pub fn fit<T: Real>(cfg: &TrainConfig) -> Result<Trained<T>> {
    cfg.validate()?;
    let streams = SeedStreams::from_master(cfg.seed);
    let (train, test) = load_data(cfg, streams.data)?;
    let mut built = build::<T>(cfg, train.feature_shape(), train.class_count)?;
    let plan = BatchPlan {
        batch_size: cfg.optim.batch_size,
        shuffle_seed: derive_seed(streams.data, "shuffle"),
        drop_last: cfg.optim.drop_last,
    };
    let lambda = cfg.sim.lambda;
    let mut state = SgdState::new(&built.store);
    let mut metrics = Vec::new();
    let mut per_block = cfg.output.per_block_trace.then(Vec::new);
    let mut base_digests = Vec::new();
    let (mut ema, mut grad_norm) = (None, 0.0);
    let mut step: u64 = 0;

    for epoch in 0..cfg.optim.epochs {
        let lr = cfg.optim.lr_at(epoch);
        for batch in data::batches(train.len(), &plan, epoch as u64)? {
            let (x, y) = train.gather::<T>(&batch);
            let mut tape = Tape::new();
            let binds = built.store.bind(&mut tape, true);
            let xv = tape.constant(x);
            let out = built.model.forward_with_taps(&mut tape, &binds, xv)?;
            let task = tape.softmax_cross_entropy(out.logits, &y)?;
            let task_v = finite_or(step, "task_loss", tape.scalar(task).as_f64())?;

            let (root, sim_v) = if built.sim_active {
                let sim = total_sim_loss(&mut tape, &binds, &out.taps, &built.heads, &built.sim, step)?;
                let sim_v = finite_or(step, "sim_loss", sim.report.total)?;
                if let Some(trace) = per_block.as_mut() {
                    trace.extend(sim.report.per_block.iter().map(|&(b, l)| BlockTrace {
                        step,
                        block_index: b,
                        loss: l,
                    }));
                }
                let root = combine_losses(&mut tape, task, sim.loss, lambda).map_err(|_| Error::Diverged {
                    step: step as usize,
                    term: "total_loss".into(),
                })?;
                (root, sim_v)
            } else {
                (task, 0.0)
            };

            let grads = tape.backward(root)?;
            let raw = built.store.collect_grads(&binds, &grads);
            let coupled = coupled_grads(&built.store, &raw, &cfg.optim);
            grad_norm = finite_or(step, "grad_norm", grad_global_norm(&built.store, &coupled))?;
            let smoothed = ema_update(ema, grad_norm, cfg.output.ema_beta);
            ema = Some(smoothed);
            let accuracy = argmax_accuracy(tape.value(out.logits), &y);
            drop(tape);
            sgd_step(&mut built.store, &raw, lr, &cfg.optim, &mut state)?;

            metrics.push(MetricsRow {
                step,
                epoch,
                split: Split::Train,
                task_loss: task_v,
                sim_loss: sim_v,
                total_loss: task_v + lambda * sim_v,
                accuracy,
                grad_norm,
                grad_norm_ema: smoothed,
                lr,
                seed: cfg.seed,
            });
            step += 1;
        }
        let (test_loss, test_acc) = evaluate(&built.model, &built.store, &test)?;
        metrics.push(MetricsRow {
            step,
            epoch,
            split: Split::Test,
            task_loss: test_loss,
            sim_loss: 0.0,
            total_loss: test_loss,
            accuracy: test_acc,
            grad_norm,
            grad_norm_ema: ema.unwrap_or(0.0),
            lr,
            seed: cfg.seed,
        });
        base_digests.push(built.store.snapshot().group(Group::Base).digest());
    }

    let snapshot = built.store.snapshot();
    let artifacts = RunArtifacts {
        config: cfg.clone(),
        metrics,
        per_block_sim: per_block,
        final_params_digest: snapshot.digest(),
        snapshot,
        base_digests,
        tapped_blocks: built.model.tap_plan().map_or_else(Vec::new, |p| p.block_indices()),
        warnings: built.warnings.clone(),
    };
    Ok(Trained {
        artifacts,
        built,
        train,
        test,
    })
}

/// Train at the configured precision.
pub fn train(cfg: &TrainConfig) -> Result<RunArtifacts> {
    match cfg.optim.precision {
        Precision::F32 => Ok(fit::<f32>(cfg)?.artifacts),
        Precision::F64 => Ok(fit::<f64>(cfg)?.artifacts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(epochs: usize) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.data.n = 64;
        c.data.test_n = 32;
        c.data.dim = 4;
        c.model.widths = vec![8];
        c.sim.proj_dim = 4;
        c.sim.proj_hidden = 4;
        c.optim.epochs = epochs;
        c.optim.batch_size = 16;
        c
    }

    #[test]
    fn accuracy_ties_go_to_lowest_index() {
        let logits = Tensor::<f64>::from_f64(vec![3, 2], &[1.0, 1.0, 0.0, 2.0, 5.0, -1.0]).unwrap();
        assert_eq!(argmax_accuracy(&logits, &[0, 1, 0]), 1.0);
        assert_eq!(argmax_accuracy(&logits, &[1, 1, 0]), 2.0 / 3.0);
    }

    #[test]
    fn constant_logit_model_scores_half() {
        let cfg = TrainConfig {
            sim_enabled: false,
            ..small(1)
        };
        let (_, test) = load_data(&cfg, 3).unwrap();
        let test = Dataset {
            labels: (0..test.len()).map(|i| i % 2).collect(),
            class_count: 2,
            ..test
        };
        let mut b = build::<f64>(&cfg, test.feature_shape(), 2).unwrap();
        for id in b.store.ids().collect::<Vec<_>>() {
            let p = b.store.get_mut(id);
            let v = if p.name == "head.bias" {
                vec![10.0, 0.0]
            } else {
                vec![0.0; p.tensor.len()]
            };
            p.tensor = Tensor::from_f64(p.tensor.shape().to_vec(), &v).unwrap();
        }
        let before = b.store.snapshot().digest();
        let r1 = evaluate(&b.model, &b.store, &test).unwrap();
        let r2 = evaluate(&b.model, &b.store, &test).unwrap();
        assert_eq!(r1.1, 0.5);
        assert_eq!(r1, r2);
        assert_eq!(b.store.snapshot().digest(), before);
    }

    #[test]
    fn rows_and_accounting() {
        let a = train(&small(2)).unwrap();
        assert_eq!(a.metrics.len(), 2 * 4 + 2);
        for r in a.train_rows() {
            assert!((r.total_loss - r.task_loss - 0.005 * r.sim_loss).abs() <= 1e-9);
            assert!(r.sim_loss > 0.0 && r.grad_norm.is_finite());
        }
        assert_eq!(a.base_digests.len(), 2);
        assert_eq!(a.tapped_blocks, vec![0]);
    }

    #[test]
    fn disabled_sim_matches_zero_lambda_base_trajectory() {
        let off = train(&TrainConfig {
            sim_enabled: false,
            ..small(3)
        })
        .unwrap();
        let mut zero = small(3);
        zero.sim.lambda = 0.0;
        let zero = train(&zero).unwrap();
        assert_eq!(off.base_digests, zero.base_digests);
        assert!(off.train_rows().all(|r| r.sim_loss == 0.0));
        assert!(zero.train_rows().any(|r| r.sim_loss > 0.0));
    }

    #[test]
    fn same_config_same_digest() {
        let a = train(&small(2)).unwrap();
        let b = train(&small(2)).unwrap();
        assert_eq!(a.final_params_digest, b.final_params_digest);
        assert_eq!(a.metrics, b.metrics);
        let mut c = small(2);
        c.seed = 1;
        assert_ne!(train(&c).unwrap().final_params_digest, a.final_params_digest);
    }

    #[test]
    fn separable_blobs_are_fit() {
        let mut c = small(50);
        c.data.classes = 2;
        c.data.noise = 0.0;
        c.sim_enabled = false;
        c.optim.precision = Precision::F64;
        let t = fit::<f64>(&c).unwrap();
        assert_eq!(t.artifacts.train_rows().count(), 200);
        let (_, acc) = evaluate(&t.built.model, &t.built.store, &t.train).unwrap();
        assert_eq!(acc, 1.0);
    }
}
