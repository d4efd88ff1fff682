use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sdemap::harness::{
    initial_guess, run_estimator, run_monte_carlo, simulate_run, write_outputs, EstimateStatus, Estimator,
    ExperimentConfig, ExperimentKind,
};
use sdemap::simulate::{read_measurements_csv, whole_steps, write_measurements_csv, RunManifest};
use sdemap::transcribe::CollocationGrid;
use sdemap::Error;

#[derive(Parser)]
#[command(name = "sdemap", version, about = "MAP state-path and parameter estimation for SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Jme,
    Mee,
    Pem,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    Gaussian,
    Outlier,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one run and write the path, measurements and manifest.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        run: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Estimate states and parameters from one dataset.
    Estimate {
        #[arg(long, value_enum)]
        estimator: EstimatorArg,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Measurement CSV (`t,y`); simulates run `--run` when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        run: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the Monte Carlo experiment.
    Mc {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        experiment: Option<ExperimentArg>,
        /// 100 runs with T = 200 (gaussian) or T = 100 (outlier).
        #[arg(long)]
        paper_scale: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the built-in oracle checks.
    Check,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_ESTIMATOR: u8 = 3;

enum Failure {
    Config(String),
    Estimator(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Misaligned(_) | Error::InvalidParameter(_) => Failure::Config(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg)
}

fn simulate(config: Option<&Path>, run: u64, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = simulate_run(&cfg, run)?;
    std::fs::create_dir_all(out)?;
    data.truth.write_csv(File::create(out.join("path.csv"))?)?;
    write_measurements_csv(cfg.t_s, &data.y, File::create(out.join("measurements.csv"))?)?;
    let manifest = RunManifest {
        seed: cfg.seed,
        run_index: run,
        config_hash: cfg.hash(),
        dt: cfg.dt,
        t_end: cfg.t_end,
        t_s: cfg.t_s,
        n_steps: data.truth.len() - 1,
        n_measurements: data.y.len(),
    };
    serde_json::to_writer_pretty(File::create(out.join("manifest.json"))?, &manifest)?;
    println!(
        "wrote {} samples and {} measurements to {}",
        data.truth.len(),
        data.y.len(),
        out.display()
    );
    Ok(())
}

fn estimate(which: Estimator, config: Option<&Path>, data: Option<&Path>, run: u64, out: &Path) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    let (y, truth) = match data {
        Some(path) => {
            let (t_s, y) = read_measurements_csv(File::open(path)?)?;
            cfg.t_s = t_s;
            cfg.t_end = (y.len() - 1) as f64 * t_s;
            if whole_steps(t_s, cfg.h_c).is_none() {
                return Err(Failure::Config(format!(
                    "sampling period {t_s} is not a multiple of h_c {}",
                    cfg.h_c
                )));
            }
            (y, None)
        }
        None => {
            let d = simulate_run(&cfg, run)?;
            (d.y, Some(d.truth))
        }
    };
    let guess = match which {
        Estimator::Pem => None,
        _ => {
            let grid = CollocationGrid::new(cfg.t_end, cfg.t_s, cfg.h_c)?;
            Some(initial_guess(&y, cfg.t_s, &grid, cfg.nominal.gamma).map_err(|e| Failure::Estimator(e.to_string()))?)
        }
    };
    let res = run_estimator(&cfg, which, &y, guess.as_ref(), truth.as_ref());
    std::fs::create_dir_all(out)?;
    if let Some(traj) = &res.trajectory {
        traj.write_csv(File::create(out.join("trajectory.csv"))?)?;
    }
    serde_json::to_writer_pretty(File::create(out.join("estimate.json"))?, &res.record)?;
    let r = &res.record;
    println!("{} {:?} theta {:?} ise {:?}", which.name(), r.status, r.theta, r.ise);
    match r.status {
        EstimateStatus::Converged => Ok(()),
        _ => Err(Failure::Estimator(
            r.message.clone().unwrap_or_else(|| format!("{:?}", r.status)),
        )),
    }
}

fn mc(
    config: Option<&Path>,
    runs: Option<usize>,
    seed: Option<u64>,
    experiment: Option<ExperimentArg>,
    paper_scale: bool,
    out: &Path,
) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(e) = experiment {
        cfg.kind = match e {
            ExperimentArg::Gaussian => ExperimentKind::Gaussian,
            ExperimentArg::Outlier => ExperimentKind::Outlier,
        };
    }
    if paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Some(n) = runs {
        cfg.n_runs = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let output = run_monte_carlo(&cfg)?;
    write_outputs(&output, out)?;
    let s = &output.summary;
    for (name, e) in &s.estimators {
        let med = |f: &str| e.quartiles.get(f).map(|q| q.median).unwrap_or(f64::NAN);
        println!(
            "{name}: ok {} not_converged {} failed {} | median a {:.4} b {:.4} d {:.4} sigma_y {:.4} ise {:.4}",
            e.runs_ok,
            e.runs_not_converged,
            e.runs_failed,
            med("a"),
            med("b"),
            med("d"),
            med("sigma_y"),
            med("ise")
        );
    }
    println!(
        "{}/{} runs completed; results in {}",
        s.completed_runs,
        s.n_runs,
        out.display()
    );
    if s.success() {
        Ok(())
    } else {
        Err(Failure::Other("fewer than 90% of the runs completed".into()))
    }
}

fn check() -> Result<(), Failure> {
    let results = sdemap::check::run_checks()?;
    for r in &results {
        println!("{r}");
    }
    if results.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(Failure::Other("some checks failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { config, run, seed, out } => simulate(config.as_deref(), *run, *seed, out),
        Command::Estimate {
            estimator,
            config,
            data,
            run,
            out,
        } => {
            let which = match estimator {
                EstimatorArg::Jme => Estimator::Jme,
                EstimatorArg::Mee => Estimator::Mee,
                EstimatorArg::Pem => Estimator::Pem,
            };
            estimate(which, config.as_deref(), data.as_deref(), *run, out)
        }
        Command::Mc {
            config,
            runs,
            seed,
            experiment,
            paper_scale,
            out,
        } => mc(config.as_deref(), *runs, *seed, *experiment, *paper_scale, out),
        Command::Check => check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Estimator(msg)) => {
            eprintln!("estimator failure: {msg}");
            ExitCode::from(EXIT_ESTIMATOR)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
