//! Run configuration: a flat `section.key = value` text format.
//!
//! Every key has a default, so an empty file is a valid config. Unknown keys,
//! malformed lines and out-of-range values are rejected with the line number
//! and key.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sim::{str_enum, SimConfig};

str_enum!(ModelKind {
    Mlp => "mlp",
    Resnet => "resnet",
});

str_enum!(DataKind {
    Blobs => "blobs",
    NoisyBlobs => "noisy-blobs",
    Csv => "csv",
    Idx => "idx",
});

str_enum!(LrScheduleKind {
    Constant => "constant",
    Step => "step",
});

str_enum!(Precision {
    F32 => "f32",
    F64 => "f64",
});

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// MLP hidden widths; the input width comes from the data.
    pub widths: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// CNN input is `in_channels × input_hw × input_hw`.
    pub in_channels: usize,
    pub input_hw: usize,
    /// 0 means "as many as the training data has".
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub n: usize,
    pub test_n: usize,
    pub classes: usize,
    pub dim: usize,
    pub noise: f64,
    /// Applies to the training split of `noisy-blobs`; test labels stay clean.
    pub flip_rate: f64,
    pub train_path: String,
    pub test_path: String,
    pub label_column: String,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrScheduleKind,
    /// Epochs at which a `step` schedule multiplies the rate by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub drop_last: bool,
    pub precision: Precision,
    /// Whether weight decay also applies to SIM head parameters.
    pub decay_sim_heads: bool,
}

impl OptimConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrScheduleKind::Constant => self.lr,
            LrScheduleKind::Step => {
                let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
                self.lr * self.gamma.powi(k as i32)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: String,
    pub per_block_trace: bool,
    pub ema_beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub sim_enabled: bool,
    /// `sim.rho = 0` disables SIM just like `sim.enabled = false`.
    /// `sim_seed` is not a config key; it is derived from `seed`.
    pub sim: SimConfig,
    pub seed: u64,
    pub output: OutputConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig {
                kind: ModelKind::Mlp,
                widths: vec![64, 64],
                stage_channels: vec![96, 192],
                blocks_per_stage: 1,
                in_channels: 1,
                input_hw: 8,
                classes: 0,
            },
            data: DataConfig {
                kind: DataKind::Blobs,
                n: 512,
                test_n: 512,
                classes: 4,
                dim: 16,
                noise: 1.0,
                flip_rate: 0.2,
                train_path: String::new(),
                test_path: String::new(),
                label_column: "label".into(),
                train_images: String::new(),
                train_labels: String::new(),
                test_images: String::new(),
                test_labels: String::new(),
            },
            optim: OptimConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                epochs: 30,
                batch_size: 64,
                lr_schedule: LrScheduleKind::Constant,
                milestones: Vec::new(),
                gamma: 0.1,
                drop_last: false,
                precision: Precision::F32,
                decay_sim_heads: true,
            },
            sim_enabled: true,
            sim: SimConfig::default(),
            seed: 0,
            output: OutputConfig {
                dir: "out".into(),
                per_block_trace: false,
                ema_beta: 0.98,
            },
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "model.kind",
    "model.widths",
    "model.stage_channels",
    "model.blocks_per_stage",
    "model.in_channels",
    "model.input_hw",
    "model.classes",
    "data.kind",
    "data.n",
    "data.test_n",
    "data.classes",
    "data.dim",
    "data.noise",
    "data.flip_rate",
    "data.train_path",
    "data.test_path",
    "data.label_column",
    "data.train_images",
    "data.train_labels",
    "data.test_images",
    "data.test_labels",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.epochs",
    "optim.batch_size",
    "optim.lr_schedule",
    "optim.milestones",
    "optim.gamma",
    "optim.drop_last",
    "optim.precision",
    "optim.decay_sim_heads",
    "sim.enabled",
    "sim.rho",
    "sim.lambda",
    "sim.proj_dim",
    "sim.proj_hidden",
    "sim.epsilon",
    "sim.loss_type",
    "sim.stopgrad_mode",
    "sim.norm_axes",
    "sim.alignment",
    "seeds.master",
    "output.dir",
    "output.per_block_trace",
    "output.ema_beta",
];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse::<usize>(x.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Set one key from its textual value (no range checks).
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (m, d, o) = (&mut self.model, &mut self.data, &mut self.optim);
        match key {
            "model.kind" => m.kind = parse(v)?,
            "model.widths" => m.widths = parse_list(v)?,
            "model.stage_channels" => m.stage_channels = parse_list(v)?,
            "model.blocks_per_stage" => m.blocks_per_stage = parse(v)?,
            "model.in_channels" => m.in_channels = parse(v)?,
            "model.input_hw" => m.input_hw = parse(v)?,
            "model.classes" => m.classes = parse(v)?,
            "data.kind" => d.kind = parse(v)?,
            "data.n" => d.n = parse(v)?,
            "data.test_n" => d.test_n = parse(v)?,
            "data.classes" => d.classes = parse(v)?,
            "data.dim" => d.dim = parse(v)?,
            "data.noise" => d.noise = parse(v)?,
            "data.flip_rate" => d.flip_rate = parse(v)?,
            "data.train_path" => d.train_path = v.to_string(),
            "data.test_path" => d.test_path = v.to_string(),
            "data.label_column" => d.label_column = v.to_string(),
            "data.train_images" => d.train_images = v.to_string(),
            "data.train_labels" => d.train_labels = v.to_string(),
            "data.test_images" => d.test_images = v.to_string(),
            "data.test_labels" => d.test_labels = v.to_string(),
            "optim.lr" => o.lr = parse(v)?,
            "optim.momentum" => o.momentum = parse(v)?,
            "optim.weight_decay" => o.weight_decay = parse(v)?,
            "optim.epochs" => o.epochs = parse(v)?,
            "optim.batch_size" => o.batch_size = parse(v)?,
            "optim.lr_schedule" => o.lr_schedule = parse(v)?,
            "optim.milestones" => o.milestones = parse_list(v)?,
            "optim.gamma" => o.gamma = parse(v)?,
            "optim.drop_last" => o.drop_last = parse(v)?,
            "optim.precision" => o.precision = parse(v)?,
            "optim.decay_sim_heads" => o.decay_sim_heads = parse(v)?,
            "sim.enabled" => self.sim_enabled = parse(v)?,
            "sim.rho" => self.sim.rho = parse(v)?,
            "sim.lambda" => self.sim.lambda = parse(v)?,
            "sim.proj_dim" => self.sim.proj_dim = parse(v)?,
            "sim.proj_hidden" => self.sim.proj_hidden = parse(v)?,
            "sim.epsilon" => self.sim.epsilon = parse(v)?,
            "sim.loss_type" => self.sim.loss_type = parse(v)?,
            "sim.stopgrad_mode" => self.sim.stopgrad_mode = parse(v)?,
            "sim.norm_axes" => self.sim.norm_axes = parse(v)?,
            "sim.alignment" => self.sim.alignment = parse(v)?,
            "seeds.master" => self.seed = parse(v)?,
            "output.dir" => self.output.dir = v.to_string(),
            "output.per_block_trace" => self.output.per_block_trace = parse(v)?,
            "output.ema_beta" => self.output.ema_beta = parse(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Textual value of one key; `set(key, &get(key))` is the identity.
    pub fn get(&self, key: &str) -> Option<String> {
        let (m, d, o) = (&self.model, &self.data, &self.optim);
        Some(match key {
            "model.kind" => m.kind.to_string(),
            "model.widths" => join(&m.widths),
            "model.stage_channels" => join(&m.stage_channels),
            "model.blocks_per_stage" => m.blocks_per_stage.to_string(),
            "model.in_channels" => m.in_channels.to_string(),
            "model.input_hw" => m.input_hw.to_string(),
            "model.classes" => m.classes.to_string(),
            "data.kind" => d.kind.to_string(),
            "data.n" => d.n.to_string(),
            "data.test_n" => d.test_n.to_string(),
            "data.classes" => d.classes.to_string(),
            "data.dim" => d.dim.to_string(),
            "data.noise" => d.noise.to_string(),
            "data.flip_rate" => d.flip_rate.to_string(),
            "data.train_path" => d.train_path.clone(),
            "data.test_path" => d.test_path.clone(),
            "data.label_column" => d.label_column.clone(),
            "data.train_images" => d.train_images.clone(),
            "data.train_labels" => d.train_labels.clone(),
            "data.test_images" => d.test_images.clone(),
            "data.test_labels" => d.test_labels.clone(),
            "optim.lr" => o.lr.to_string(),
            "optim.momentum" => o.momentum.to_string(),
            "optim.weight_decay" => o.weight_decay.to_string(),
            "optim.epochs" => o.epochs.to_string(),
            "optim.batch_size" => o.batch_size.to_string(),
            "optim.lr_schedule" => o.lr_schedule.to_string(),
            "optim.milestones" => join(&o.milestones),
            "optim.gamma" => o.gamma.to_string(),
            "optim.drop_last" => o.drop_last.to_string(),
            "optim.precision" => o.precision.to_string(),
            "optim.decay_sim_heads" => o.decay_sim_heads.to_string(),
            "sim.enabled" => self.sim_enabled.to_string(),
            "sim.rho" => self.sim.rho.to_string(),
            "sim.lambda" => self.sim.lambda.to_string(),
            "sim.proj_dim" => self.sim.proj_dim.to_string(),
            "sim.proj_hidden" => self.sim.proj_hidden.to_string(),
            "sim.epsilon" => self.sim.epsilon.to_string(),
            "sim.loss_type" => self.sim.loss_type.to_string(),
            "sim.stopgrad_mode" => self.sim.stopgrad_mode.to_string(),
            "sim.norm_axes" => self.sim.norm_axes.to_string(),
            "sim.alignment" => self.sim.alignment.to_string(),
            "seeds.master" => self.seed.to_string(),
            "output.dir" => self.output.dir.clone(),
            "output.per_block_trace" => self.output.per_block_trace.to_string(),
            "output.ema_beta" => self.output.ema_beta.to_string(),
            _ => return None,
        })
    }

    /// True when the SIM term is actually computed.
    pub fn sim_active(&self) -> bool {
        self.sim_enabled && self.sim.rho > 0.0
    }

    /// Range checks; the error names the first offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        let (m, d, o) = (&self.model, &self.data, &self.optim);
        if m.widths.is_empty() || m.widths.contains(&0) {
            return bad("model.widths", "needs at least one positive width".into());
        }
        if m.stage_channels.is_empty() || m.stage_channels.contains(&0) {
            return bad("model.stage_channels", "needs at least one positive width".into());
        }
        for (key, v) in [
            ("model.blocks_per_stage", m.blocks_per_stage),
            ("model.in_channels", m.in_channels),
            ("model.input_hw", m.input_hw),
            ("data.classes", d.classes),
            ("data.dim", d.dim),
            ("data.test_n", d.test_n),
            ("optim.epochs", o.epochs),
            ("optim.batch_size", o.batch_size),
            ("sim.proj_dim", self.sim.proj_dim),
            ("sim.proj_hidden", self.sim.proj_hidden),
        ] {
            if v == 0 {
                return bad(key, "must be >= 1".into());
            }
        }
        if matches!(d.kind, DataKind::Blobs | DataKind::NoisyBlobs) && d.n < d.classes {
            return bad(
                "data.n",
                format!("{} is smaller than data.classes = {}", d.n, d.classes),
            );
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return bad("data.noise", format!("{} must be finite and >= 0", d.noise));
        }
        if !(0.0..1.0).contains(&d.flip_rate) {
            return bad("data.flip_rate", format!("{} is outside [0,1)", d.flip_rate));
        }
        let paths: &[(&str, &String)] = match d.kind {
            DataKind::Csv => &[("data.train_path", &d.train_path), ("data.test_path", &d.test_path)],
            DataKind::Idx => &[
                ("data.train_images", &d.train_images),
                ("data.train_labels", &d.train_labels),
                ("data.test_images", &d.test_images),
                ("data.test_labels", &d.test_labels),
            ],
            _ => &[],
        };
        for (key, p) in paths {
            if p.is_empty() {
                return bad(key, format!("required for data.kind = {}", d.kind));
            }
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad("optim.lr", format!("{} must be > 0", o.lr));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad("optim.momentum", format!("{} is outside [0,1)", o.momentum));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return bad("optim.weight_decay", format!("{} must be >= 0", o.weight_decay));
        }
        if o.milestones.windows(2).any(|w| w[0] >= w[1]) || o.milestones.iter().any(|&x| x >= o.epochs) {
            return bad(
                "optim.milestones",
                format!("must be strictly increasing and < optim.epochs = {}", o.epochs),
            );
        }
        if !(o.gamma > 0.0 && o.gamma.is_finite()) {
            return bad("optim.gamma", format!("{} must be > 0", o.gamma));
        }
        if !(0.0..=1.0).contains(&self.sim.rho) {
            return bad("sim.rho", format!("{} is outside (0,1] (0 disables SIM)", self.sim.rho));
        }
        SimConfig {
            rho: 1.0,
            ..self.sim.clone()
        }
        .validate()?;
        if !(0.0..1.0).contains(&self.output.ema_beta) {
            return bad("output.ema_beta", format!("{} is outside [0,1)", self.output.ema_beta));
        }
        Ok(())
    }

    /// Parse config text on top of the defaults and validate it.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut lines: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line: Some(line),
                    key: content.to_string(),
                    msg: "expected `key = value`".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if let Some(first) = lines.get(key) {
                return Err(Error::Config {
                    line: Some(line),
                    key: key.into(),
                    msg: format!("duplicate key, first set on line {first}"),
                });
            }
            cfg.set(key, value).map_err(|msg| Error::Config {
                line: Some(line),
                key: key.into(),
                msg,
            })?;
            lines.insert(key.to_string(), line);
        }
        cfg.validate().map_err(|e| match e {
            Error::Config { key, msg, .. } => Error::Config {
                line: lines.get(&key).copied(),
                key,
                msg,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse_str(&text)
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let v = self.get(key).expect("every listed key has a value");
            out.push_str(&format!("{key} = {v}\n"));
        }
        out
    }
}
