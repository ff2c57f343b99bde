use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::error::{Error, Result};

use super::run::{train, RunArtifacts};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub rho: f64,
    pub lambda: f64,
    pub seed: u64,
    pub final_test_acc: Option<f64>,
    pub mean_sim_loss: Option<f64>,
    /// `None` for a completed run, otherwise the error message.
    pub error: Option<String>,
}

impl AblationRow {
    pub fn status(&self) -> &'static str {
        if self.error.is_none() {
            "ok"
        } else {
            "failed"
        }
    }
}

/// Mean and population standard deviation over the completed seeds of one
/// (rho, lambda) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub rho: f64,
    pub lambda: f64,
    pub runs: usize,
    pub completed: usize,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub mean_sim_loss: f64,
    pub std_sim_loss: f64,
}

#[derive(Debug)]
pub struct Ablation {
    /// Grid order: rho outermost, then lambda, then seed.
    pub rows: Vec<AblationRow>,
    pub cells: Vec<CellStats>,
    pub runs: Vec<Option<RunArtifacts>>,
}

/// Directory name of one run inside the sweep directory.
pub fn run_name(rho: f64, lambda: f64, seed: u64) -> String {
    format!("rho{rho}_lambda{lambda}_seed{seed}")
}

/// Mean and population standard deviation; (NaN, NaN) for no values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cell_stats(rows: &[AblationRow], rho: f64, lambda: f64) -> CellStats {
    let cell: Vec<&AblationRow> = rows.iter().filter(|r| r.rho == rho && r.lambda == lambda).collect();
    let acc: Vec<f64> = cell.iter().filter_map(|r| r.final_test_acc).collect();
    let sim: Vec<f64> = cell.iter().filter_map(|r| r.mean_sim_loss).collect();
    let (mean_test_acc, std_test_acc) = mean_std(&acc);
    let (mean_sim_loss, std_sim_loss) = mean_std(&sim);
    CellStats {
        rho,
        lambda,
        runs: cell.len(),
        completed: acc.len(),
        mean_test_acc,
        std_test_acc,
        mean_sim_loss,
        std_sim_loss,
    }
}

/// Train the full rho × lambda × seed cross-product on `jobs` threads.
///
/// With `out_dir`, each run writes its files to its own subdirectory. A failed
/// run becomes a failed row; the sweep carries on.
pub fn ablate(
    base: &TrainConfig,
    rhos: &[f64],
    lambdas: &[f64],
    seeds: &[u64],
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<Ablation> {
    if rhos.is_empty() || lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("rho, lambda and seed grids must be nonempty".into()));
    }
    let mut grid = Vec::new();
    for &rho in rhos {
        for &lambda in lambdas {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.sim.rho = rho;
                cfg.sim.lambda = lambda;
                cfg.seed = seed;
                let dir = out_dir.map(|d| d.join(run_name(rho, lambda, seed)));
                if let Some(d) = &dir {
                    cfg.output.dir = d.display().to_string();
                }
                cfg.validate()?;
                grid.push((cfg, dir));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<RunArtifacts>> = pool.install(|| {
        grid.par_iter()
            .map(|(cfg, dir): &(TrainConfig, Option<PathBuf>)| {
                let a = train(cfg)?;
                if let Some(d) = dir {
                    crate::output::write_run(d, &a)?;
                }
                Ok(a)
            })
            .collect()
    });

    let mut rows = Vec::with_capacity(grid.len());
    let mut runs = Vec::with_capacity(grid.len());
    for ((cfg, _), r) in grid.iter().zip(results) {
        let (row, run) = match r {
            Ok(a) => (
                AblationRow {
                    rho: cfg.sim.rho,
                    lambda: cfg.sim.lambda,
                    seed: cfg.seed,
                    final_test_acc: a.final_test_accuracy(),
                    mean_sim_loss: Some(a.mean_sim_loss()),
                    error: None,
                },
                Some(a),
            ),
            Err(e) => (
                AblationRow {
                    rho: cfg.sim.rho,
                    lambda: cfg.sim.lambda,
                    seed: cfg.seed,
                    final_test_acc: None,
                    mean_sim_loss: None,
                    error: Some(format!("error[{}]: {e}", e.code())),
                },
                None,
            ),
        };
        rows.push(row);
        runs.push(run);
    }
    let mut cells = Vec::new();
    for &rho in rhos {
        for &lambda in lambdas {
            cells.push(cell_stats(&rows, rho, lambda));
        }
    }
    Ok(Ablation { rows, cells, runs })
}
