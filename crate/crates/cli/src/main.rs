//! `imr`: plan, simulate, calibrate and run iterative MapReduce jobs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 validation
//! divergence.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use imr::calibrate::{calibrate, CalibrationReport};
use imr::cost_model::ClusterProfile;
use imr::engine::{load_and_partition, run_loop, ExecPlan, LoopOptions, ModelStore};
use imr::ingest::{text_records, CacheReader, CacheWriter};
use imr::ml_bgd::{bgd_program, synthetic_dataset, LossKind, ModelVector, SparseExample, Stop};
use imr::optimizer::{optimize_with, validate_trials, Objective};
use imr::simulator::sweep;

#[derive(Parser)]
#[command(
    name = "imr",
    version,
    about = "Cost-based planning and execution of iterative MapReduce jobs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a text training file into a binary cache file.
    Ingest { text: PathBuf, out: PathBuf },

    /// Measure P, D, A and M on this host and write a profile.
    Calibrate {
        /// Per-machine cache budget in bytes.
        #[arg(long)]
        budget: u64,
        /// Model dimension.
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        /// Sample records from this cache file instead of synthetic data.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Synthetic sample size.
        #[arg(long, default_value_t = 20_000)]
        sample: usize,
        /// Nonzeros per synthetic record.
        #[arg(long, default_value_t = 16)]
        nnz: usize,
        /// `R` for the emitted profile; defaults to the sample size.
        #[arg(long)]
        records: Option<u64>,
        /// `N_max` for the emitted profile; unbounded when omitted.
        #[arg(long)]
        n_max: Option<u64>,
        #[arg(long, default_value_t = 7)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },

    /// Choose machines and fan-in for a profile.
    Plan {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, value_enum)]
        objective: ObjectiveArg,
        /// The operator runs inside a loop (affects the cost-optimal fan-in).
        #[arg(long)]
        in_loop: bool,
    },

    /// Evaluate a grid of plans on the simulator.
    Sweep {
        #[arg(long)]
        profile: PathBuf,
        /// Machine counts: comma-separated values or inclusive ranges `lo-hi`.
        #[arg(long, value_parser = parse_list)]
        n: Grid,
        /// Fan-ins, same syntax as `--n`.
        #[arg(long, value_parser = parse_list)]
        f: Grid,
        #[arg(long)]
        out: PathBuf,
    },

    /// Train a linear model with batch gradient descent.
    Run {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        fanin: usize,
        #[arg(long, value_enum)]
        loss: LossArg,
        #[arg(long)]
        eta: f64,
        #[arg(long)]
        max_iter: u64,
        /// Also stop once the gradient norm drops below this.
        #[arg(long)]
        grad_tol: Option<f64>,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        stats_out: PathBuf,
        /// Records cached per partition before spilling; all when omitted.
        #[arg(long)]
        cache_records: Option<usize>,
        /// Model dimension; one past the largest feature index when omitted.
        #[arg(long)]
        dim: Option<usize>,
    },

    /// Compare the optimizer with an exhaustive scan on seeded random profiles.
    Validate {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        /// Upper bound on `N_max` for the random profiles.
        #[arg(long, default_value_t = 10_000)]
        max_machines: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Time,
    Cost,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Time => Objective::MinTime,
            ObjectiveArg::Cost => Objective::MinCost,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Squared,
    Logistic,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Squared => LossKind::Squared,
            LossArg::Logistic => LossKind::Logistic,
        }
    }
}

#[derive(Clone, Debug)]
struct Grid(Vec<u64>);

fn parse_list(s: &str) -> Result<Grid, String> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("`{t}`: {e}"));
        match item.split_once('-') {
            Some((lo, hi)) => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                if lo > hi {
                    return Err(format!("empty range `{item}`"));
                }
                out.extend(lo..=hi);
            }
            None => out.push(num(item)?),
        }
    }
    if out.is_empty() {
        return Err("list is empty".into());
    }
    Ok(Grid(out))
}

enum Outcome {
    Done,
    Diverged,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> Result<Outcome> {
    match command {
        Command::Ingest { text, out } => ingest(&text, &out),
        Command::Calibrate {
            budget,
            dim,
            out,
            cache,
            sample,
            nnz,
            records,
            n_max,
            trials,
            seed,
        } => {
            let sample = match cache {
                Some(path) => read_cache(&path)?,
                None => synthetic_dataset(sample, dim, nnz, seed, LossKind::Squared),
            };
            let records = records.unwrap_or(sample.len() as u64);
            let scratch = tempfile::tempdir().context("creating scratch directory")?;
            let report = calibrate(
                &sample,
                dim,
                budget,
                records,
                n_max.unwrap_or(u64::MAX),
                trials,
                scratch.path(),
            )?;
            print_calibration(&report);
            std::fs::write(&out, report.profile.to_profile_string())
                .with_context(|| format!("writing {}", out.display()))?;
            Ok(Outcome::Done)
        }
        Command::Plan {
            profile,
            objective,
            in_loop,
        } => {
            let profile = load_profile(&profile)?;
            let plan = optimize_with(&profile, objective.into(), in_loop)?;
            let stdout = io::stdout();
            let mut out = stdout.lock();
            out.write_all(plan.report().as_bytes())?;
            writeln!(out)?;
            plan.write_csv(&mut out, true)?;
            Ok(Outcome::Done)
        }
        Command::Sweep { profile, n, f, out } => {
            let profile = load_profile(&profile)?;
            let result = sweep(&profile, &n.0, &f.0)?;
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            result.write_csv(BufWriter::new(file))?;
            println!("{} rows written to {}", result.rows.len(), out.display());
            for objective in [Objective::MinTime, Objective::MinCost] {
                if let Some(best) = result.argmin(objective) {
                    println!("min {objective}: N={} f={}", best.machines, best.fanin);
                }
            }
            Ok(Outcome::Done)
        }
        Command::Run {
            cache,
            n,
            fanin,
            loss,
            eta,
            max_iter,
            grad_tol,
            model_out,
            stats_out,
            cache_records,
            dim,
        } => run(RunArgs {
            cache,
            machines: n,
            fanin,
            loss: loss.into(),
            eta,
            max_iter,
            grad_tol,
            model_out,
            stats_out,
            cache_records,
            dim,
        }),
        Command::Validate {
            profile,
            trials,
            seed,
            max_machines,
        } => {
            let profile = load_profile(&profile)?;
            let summary = validate_trials(Some(&profile), trials, seed, max_machines)?;
            println!("checked {} optimizations", summary.checked);
            if summary.divergences.is_empty() {
                println!("no divergences");
                return Ok(Outcome::Done);
            }
            for d in &summary.divergences {
                println!("divergence: {d}");
            }
            Ok(Outcome::Diverged)
        }
    }
}

fn load_profile(path: &Path) -> Result<ClusterProfile> {
    ClusterProfile::from_file(path).with_context(|| format!("reading profile {}", path.display()))
}

fn read_cache(path: &Path) -> Result<Vec<SparseExample>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let reader = CacheReader::new(BufReader::new(file))?;
    Ok(reader.collect::<Result<Vec<_>, _>>()?)
}

fn ingest(text: &Path, out: &Path) -> Result<Outcome> {
    let input = File::open(text).with_context(|| format!("opening {}", text.display()))?;
    let output = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut writer = CacheWriter::new(BufWriter::new(output))?;
    for rec in text_records(BufReader::new(input)) {
        writer.push(&rec.with_context(|| format!("in {}", text.display()))?)?;
    }
    let count = writer.count();
    writer.finish()?.flush()?;
    println!("{count} records");
    Ok(Outcome::Done)
}

fn print_calibration(r: &CalibrationReport) {
    println!("P = {:.4e} s/record", r.map.secs);
    println!("D = {:.4e} s/record", r.load.secs);
    println!(
        "A = {:.4e} s/object (in-process; a lower bound for a cluster)",
        r.agg.secs
    );
    println!(
        "M = {} records ({} bytes each)",
        r.profile.cache_records, r.footprint
    );
    for w in r
        .map
        .warnings
        .iter()
        .chain(&r.load.warnings)
        .chain(&r.agg.warnings)
    {
        println!("warning: {w:?}");
    }
}

struct RunArgs {
    cache: PathBuf,
    machines: usize,
    fanin: usize,
    loss: LossKind,
    eta: f64,
    max_iter: u64,
    grad_tol: Option<f64>,
    model_out: PathBuf,
    stats_out: PathBuf,
    cache_records: Option<usize>,
    dim: Option<usize>,
}

fn run(args: RunArgs) -> Result<Outcome> {
    if args.machines == 0 {
        bail!("--n must be >= 1");
    }
    let records = read_cache(&args.cache)?;
    let dim = args.dim.unwrap_or_else(|| {
        let max = records.iter().filter_map(SparseExample::max_index).max();
        max.map_or(1, |i| i as usize + 1)
    });
    let stop = match args.grad_tol {
        Some(eps) => Stop::GradNormOrMaxIter(eps, args.max_iter),
        None => Stop::MaxIter(args.max_iter),
    };
    let program = bgd_program(args.loss, args.eta, stop, dim)?;
    let total = records.len();
    let set = load_and_partition(
        records.into_iter().map(Ok::<_, io::Error>),
        args.machines,
        args.cache_records.unwrap_or(usize::MAX),
    )?;
    // a fresh stats file per run keeps outputs reproducible
    if args.stats_out.exists() {
        std::fs::remove_file(&args.stats_out)?;
    }
    let options = LoopOptions {
        max_iterations: args.max_iter,
        model_store: Some(ModelStore::new(
            &args.model_out,
            ModelVector::to_store_bytes,
        )),
        stats_csv: Some(args.stats_out.clone()),
        ..Default::default()
    };
    let outcome = run_loop(
        &program,
        &set,
        &ExecPlan::new(args.machines, args.fanin),
        &options,
    )?;
    let loss = outcome.outputs.first().map(|s| s.loss);
    println!(
        "{total} records, {} iterations, dimension {dim}, last loss {}",
        outcome.iterations,
        loss.map_or("n/a".to_string(), |l| l.to_string())
    );
    Ok(Outcome::Done)
}
