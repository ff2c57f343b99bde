//! Command-line dispatch. Exit codes: 0 success, 1 runtime error, 2 usage.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checks::{gradcheck_suite, DEFAULT_STEP, TOLERANCE};
use crate::config::{ModelKind, TrainConfig};
use crate::data::{gen_blobs, gen_noisy_labels, Dataset};
use crate::error::{Error, Result};
use crate::output::{self, format_real};
use crate::report;
use crate::rng::derive_seed;
use crate::train::{ablate, train};

#[derive(Parser, Debug)]
#[command(
    name = "rhosim",
    version,
    about = "Block-level self-reconstruction regularizer experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CheckModel {
    Mlp,
    Resnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GenKind {
    Blobs,
    NoisyBlobs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run and write its output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare tape gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_enum)]
        model: CheckModel,
        #[arg(long, value_enum)]
        sim: OnOff,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        eps: f64,
    },
    /// Sweep rho × lambda × seed and summarize.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        rho: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        lambda: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write a synthetic dataset as CSV (`f0..f{d-1},label`).
    GenData {
        #[arg(long, value_enum)]
        kind: GenKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        flip_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overhead, gradient-norm trace and optional PCA of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        pca: bool,
    },
}

/// Parse `args` (program name first) and execute. Returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    if args.len() <= 1 {
        eprintln!("error[E_USAGE]: no subcommand given");
        eprintln!("{}", usage());
        return 2;
    }
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[E_USAGE]: {}", first.trim_start_matches("error: "));
            eprintln!("{}", usage());
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), single_line(&e.to_string()));
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn usage() -> String {
    use clap::CommandFactory;
    Cli::command().render_usage().to_string()
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out),
        Command::Gradcheck { model, sim, eps } => cmd_gradcheck(model, sim, eps),
        Command::Ablate {
            config,
            rho,
            lambda,
            seeds,
            jobs,
        } => cmd_ablate(&config, &rho, &lambda, &seeds, jobs),
        Command::GenData {
            kind,
            n,
            classes,
            dim,
            noise,
            seed,
            flip_rate,
            out,
        } => cmd_gen_data(kind, n, classes, dim, noise, seed, flip_rate, &out),
        Command::Report { run, pca } => cmd_report(&run, pca),
    }
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<i32> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = out {
        cfg.output.dir = d.display().to_string();
    }
    let a = train(&cfg)?;
    for w in &a.warnings {
        eprintln!("warning: {w}");
    }
    output::write_run(&cfg.output.dir, &a)?;
    println!(
        "final_test_acc {}",
        a.final_test_accuracy().map_or_else(|| "n/a".into(), format_real)
    );
    println!("mean_sim_loss {}", format_real(a.mean_sim_loss()));
    println!("digest {:016x}", a.final_params_digest);
    println!("wrote {}", cfg.output.dir);
    Ok(0)
}

fn cmd_gradcheck(model: CheckModel, sim: OnOff, eps: f64) -> Result<i32> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Usage(format!("--eps must be a positive number, got {eps}")));
    }
    let kind = match model {
        CheckModel::Mlp => ModelKind::Mlp,
        CheckModel::Resnet => ModelKind::Resnet,
    };
    let suite = gradcheck_suite(kind, sim == OnOff::On, eps)?;
    let mut worst = 0.0f64;
    for (name, r) in &suite {
        let at = r
            .worst
            .as_ref()
            .map_or_else(String::new, |(p, i)| format!(" at {p}[{i}]"));
        println!(
            "{name} max_rel_error {:.3e} over {} elements{at}",
            r.max_rel_error, r.elements
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max_rel_error {worst:.3e}");
    if worst <= TOLERANCE {
        Ok(0)
    } else {
        Err(Error::Numeric(format!(
            "max relative error {worst:.3e} exceeds {TOLERANCE:e}"
        )))
    }
}

fn cmd_ablate(config: &Path, rhos: &[f64], lambdas: &[f64], seeds: &[u64], jobs: usize) -> Result<i32> {
    let cfg = TrainConfig::load(config)?;
    let dir = PathBuf::from(&cfg.output.dir);
    output::create_dir(&dir)?;
    let ab = ablate(&cfg, rhos, lambdas, seeds, jobs, Some(&dir))?;
    output::write_file(dir.join("ablation.csv"), output::ablation_csv(&ab.rows))?;
    output::write_file(dir.join("ablation_cells.csv"), output::cells_csv(&ab.cells))?;
    let failed = ab.rows.iter().filter(|r| r.error.is_some()).count();
    for r in ab.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: run {} failed: {}",
            crate::train::run_name(r.rho, r.lambda, r.seed),
            r.error.as_deref().unwrap_or_default()
        );
    }
    println!("runs {} failed {failed}", ab.rows.len());
    println!("wrote {}", dir.join("ablation.csv").display());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    kind: GenKind,
    n: usize,
    classes: usize,
    dim: usize,
    noise: f64,
    seed: u64,
    flip_rate: f64,
    out: &Path,
) -> Result<i32> {
    let mut d = gen_blobs(n, classes, dim, noise, seed)?;
    if kind == GenKind::NoisyBlobs {
        d = gen_noisy_labels(&d, flip_rate, derive_seed(seed, "flip"))?;
    }
    output::write_file(out, dataset_csv(&d))?;
    println!("wrote {} rows to {}", d.len(), out.display());
    Ok(0)
}

fn dataset_csv(d: &Dataset) -> String {
    let f = d.feature_len();
    let mut out: Vec<String> = (0..f).map(|j| format!("f{j}")).collect();
    out.push("label".into());
    let mut text = out.join(",") + "\n";
    for (row, label) in d.features.data().chunks(f).zip(&d.labels) {
        for x in row {
            text.push_str(&format_real(*x));
            text.push(',');
        }
        text.push_str(&format!("{label}\n"));
    }
    text
}

fn cmd_report(dir: &Path, pca: bool) -> Result<i32> {
    let run = report::read_run(dir)?;
    let o = report::overhead(&run.config)?;
    println!("base_params {}", o.base_params);
    println!("sim_head_params {}", o.head_params);
    println!("sim_overhead_pct {}", format_real(100.0 * o.ratio()));
    let trace = dir.join("grad_norm_trace.csv");
    output::write_file(&trace, output::grad_norm_trace_csv(&run.metrics))?;
    println!("wrote {}", trace.display());
    if pca {
        for p in report::block_projections(&run.config, &run.params)? {
            let path = dir.join(format!("pca_block{:02}.csv", p.block_index));
            if p.pca.zero_variance {
                eprintln!("warning: block {} features have zero variance", p.block_index);
            }
            output::write_file(&path, report::projection_csv(&p))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(0)
}
