//! Byte-stable output files: metrics and sweep CSVs, parameter dumps.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamSnapshot;
use crate::error::{Error, Result};
use crate::train::{AblationRow, BlockTrace, CellStats, MetricsRow, RunArtifacts, Split};

pub const METRICS_HEADER: &str =
    "step,epoch,split,task_loss,sim_loss,total_loss,accuracy,grad_norm,grad_norm_ema,lr,seed";
pub const ABLATION_HEADER: &str = "rho,lambda,seed,final_test_acc,mean_sim_loss,status";
pub const CELLS_HEADER: &str = "rho,lambda,runs,completed,mean_test_acc,std_test_acc,mean_sim_loss,std_sim_loss";
pub const PER_BLOCK_HEADER: &str = "step,block,sim_loss";
pub const TRACE_HEADER: &str = "step,epoch,task_loss,sim_loss,grad_norm,grad_norm_ema";

/// Nine significant digits. Plain notation for exponents in [-5, 8],
/// scientific otherwise; zero is `0.00000000`.
pub fn format_real(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0.00000000".into();
    }
    // Exponent after rounding to 9 digits, so 9.9999999996 counts as 1e1.
    let sci = format!("{x:.8e}");
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if (-5..=8).contains(&exp) {
        format!("{:.*}", (8 - exp) as usize, x)
    } else {
        sci
    }
}

fn opt_real(x: Option<f64>) -> String {
    x.map(format_real).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.epoch,
            r.split.as_str(),
            format_real(r.task_loss),
            format_real(r.sim_loss),
            format_real(r.total_loss),
            format_real(r.accuracy),
            format_real(r.grad_norm),
            format_real(r.grad_norm_ema),
            format_real(r.lr),
            r.seed
        ));
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            format_real(r.rho),
            format_real(r.lambda),
            r.seed,
            opt_real(r.final_test_acc),
            opt_real(r.mean_sim_loss),
            r.status()
        ));
    }
    out
}

pub fn cells_csv(cells: &[CellStats]) -> String {
    let mut out = format!("{CELLS_HEADER}\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            format_real(c.rho),
            format_real(c.lambda),
            c.runs,
            c.completed,
            format_real(c.mean_test_acc),
            format_real(c.std_test_acc),
            format_real(c.mean_sim_loss),
            format_real(c.std_sim_loss)
        ));
    }
    out
}

pub fn per_block_csv(trace: &[BlockTrace]) -> String {
    let mut out = format!("{PER_BLOCK_HEADER}\n");
    for t in trace {
        out.push_str(&format!("{},{},{}\n", t.step, t.block_index, format_real(t.loss)));
    }
    out
}

/// Train rows reduced to the columns of a gradient-norm trace plot.
pub fn grad_norm_trace_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in rows.iter().filter(|r| r.split == Split::Train) {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.epoch,
            format_real(r.task_loss),
            format_real(r.sim_loss),
            format_real(r.grad_norm),
            format_real(r.grad_norm_ema)
        ));
    }
    out
}

pub fn write_file(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    write_file(path, metrics_csv(rows))
}

/// `config.resolved`, `metrics.csv`, `params.json`, `digest.txt` and, when
/// traced, `per_block_sim.csv`.
pub fn write_run(dir: impl AsRef<Path>, a: &RunArtifacts) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    write_file(dir.join("config.resolved"), a.config.to_text())?;
    write_metrics_csv(dir.join("metrics.csv"), &a.metrics)?;
    let json = serde_json::to_string_pretty(&a.snapshot).map_err(|e| Error::format_at("params.json", e.to_string()))?;
    write_file(dir.join("params.json"), json + "\n")?;
    write_file(dir.join("digest.txt"), format!("{:016x}\n", a.final_params_digest))?;
    if let Some(trace) = &a.per_block_sim {
        write_file(dir.join("per_block_sim.csv"), per_block_csv(trace))?;
    }
    Ok(())
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<ParamSnapshot> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format_at(format!("{} line {}", path.display(), e.line()), e.to_string()))
}

/// Parse a file written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::format_at(path.display().to_string(), e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::format_at(path.display().to_string(), e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != METRICS_HEADER {
        return Err(Error::format_at(
            format!("{} line 1", path.display()),
            format!("unexpected header `{header}`"),
        ));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::format_at(path.display().to_string(), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |col: &str| {
            Error::format_at(
                format!("{} line {line}, column {col}", path.display()),
                "unparsable value",
            )
        };
        let real = |i: usize, col: &str| rec[i].parse::<f64>().map_err(|_| bad(col));
        let split = match &rec[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(bad("split")),
        };
        rows.push(MetricsRow {
            step: rec[0].parse().map_err(|_| bad("step"))?,
            epoch: rec[1].parse().map_err(|_| bad("epoch"))?,
            split,
            task_loss: real(3, "task_loss")?,
            sim_loss: real(4, "sim_loss")?,
            total_loss: real(5, "total_loss")?,
            accuracy: real(6, "accuracy")?,
            grad_norm: real(7, "grad_norm")?,
            grad_norm_ema: real(8, "grad_norm_ema")?,
            lr: real(9, "lr")?,
            seed: rec[10].parse().map_err(|_| bad("seed"))?,
        });
    }
    Ok(rows)
}
