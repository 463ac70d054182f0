//! `robust-sgld`: command-line front end for the robust SGLD solver.
//!
//! Exit codes: 0 success, 1 verification or divergence failure, 2 usage or
//! configuration error.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use robust_sgld::constants::{algorithm1_params, compute_bundle, ConstantsBundle, ExternalConstants, KRadius};
use robust_sgld::experiment::{
    aggregate, make_seed_data, methods, reference_band, render_summary, robust_problem, run_experiment,
    run_robust_on, run_vanilla_on, test_mse, trace_file_name, write_summary, write_trace, CorruptionNoise,
    ExperimentConfig, Method, RunMetrics, RunOptions,
};
use robust_sgld::objective::ThetaBar;
use robust_sgld::verify::{run_suites, Suite, VerifyOptions};
use robust_sgld::Error;

#[derive(Parser, Debug)]
#[command(name = "robust-sgld", version, about = "Robust SGLD for Wasserstein-penalised DRO")]
struct Cli {
    /// TOML config file; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "ROBUST_SGLD_OUT", default_value = "out")]
    out: PathBuf,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train robust SGLD on one repeat.
    TrainRobust {
        /// Defaults to the largest value in `eta2_list`.
        #[arg(long)]
        eta2: Option<f64>,
        #[command(flatten)]
        train: TrainArgs,
        /// Skip the smoothed-objective column of the trace.
        #[arg(long)]
        no_v_delta: bool,
    },
    /// Train vanilla SGLD on one repeat.
    TrainVanilla {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Every method on every seed, plus the summary table.
    Experiment {
        /// Write zeros in the time columns.
        #[arg(long)]
        no_wall_clock: bool,
        /// Run repeats one after another.
        #[arg(long)]
        sequential: bool,
        #[arg(long)]
        reuse_corruption_noise: bool,
    },
    /// Evaluate the analytic constants.
    Constants {
        #[command(flatten)]
        problem: ProblemArgs,
    },
    /// Theoretical parameters for a target accuracy.
    Params {
        #[arg(long, allow_hyphen_values = true)]
        epsilon: f64,
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        c_delta_beta: Option<f64>,
        #[arg(long)]
        c1: Option<f64>,
        #[arg(long)]
        c2: Option<f64>,
        /// Replaces the computed C6.
        #[arg(long)]
        c6: Option<f64>,
    },
    /// Run the verification suites.
    Verify {
        /// Suite to run; repeatable. All suites when absent.
        #[arg(long = "suite", value_parser = Suite::from_str)]
        suites: Vec<Suite>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true, default_value_t = 0.0)]
        corrupt_gradient: f64,
    },
    /// Test loss of a saved parameter vector.
    Eval {
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Used for `v_delta` when the vector carries a multiplier coordinate.
        #[arg(long)]
        eta2: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Record wall-clock times; off keeps traces byte-identical across runs.
    #[arg(long)]
    wall_clock: bool,
    #[arg(long)]
    reuse_corruption_noise: bool,
}

#[derive(Args, Debug)]
struct ProblemArgs {
    /// Required when `eta2_list` has more than one entry.
    #[arg(long)]
    eta2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Radius for C4: `surrogate`, `none`, or a number.
    #[arg(long, default_value = "surrogate", value_parser = parse_radius)]
    radius: KRadius,
}

fn parse_radius(s: &str) -> Result<KRadius, String> {
    match s {
        "surrogate" => Ok(KRadius::Surrogate),
        "none" => Ok(KRadius::Unavailable),
        _ => match s.parse::<f64>() {
            Ok(r) if r > 0.0 && r.is_finite() => Ok(KRadius::User(r)),
            _ => Err(format!("expected `surrogate`, `none` or a positive number, got `{s}`")),
        },
    }
}

// a closed stdout (e.g. piped into `head`) must not abort the run
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! say_raw {
    ($s:expr) => {{
        let _ = std::io::stdout().write_all($s.as_bytes());
    }};
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::MissingExternal { .. } => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Run(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_path(p).map_err(|e| match e {
            Error::Io(io) => Failure::Usage(format!("cannot read {}: {io}", p.display())),
            other => other.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path, Failure> {
    fs::create_dir_all(&cli.out).map_err(|e| Failure::Run(format!("cannot create {}: {e}", cli.out.display())))?;
    Ok(&cli.out)
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Run(format!("cannot write {}: {e}", path.display())))
}

fn noise(reuse: bool) -> CorruptionNoise {
    if reuse {
        CorruptionNoise::Reuse
    } else {
        CorruptionNoise::Fresh
    }
}

fn pick_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn largest_eta2(cfg: &ExperimentConfig) -> f64 {
    cfg.eta2_list.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn single_eta2(cfg: &ExperimentConfig, eta2: Option<f64>) -> Result<f64, Failure> {
    match (eta2, cfg.eta2_list.as_slice()) {
        (Some(e), _) if e > 0.0 => Ok(e),
        (Some(e), _) => Err(Failure::Usage(format!("eta2 must be positive, got {e}"))),
        (None, [e]) => Ok(*e),
        (None, list) => Err(Failure::Usage(format!(
            "eta2_list has {} entries; pick one with --eta2",
            list.len()
        ))),
    }
}

fn format_vector(v: &[f64]) -> String {
    let mut s = String::new();
    for x in v {
        let _ = writeln!(s, "{x}");
    }
    s
}

fn save_run(out: &Path, m: &RunMetrics) -> CmdResult {
    let trace = out.join(trace_file_name(&m.method, m.seed));
    write_trace(&trace, &m.trace)?;
    let theta = out.join(format!("theta_{}_{}.txt", m.method.label(), m.seed));
    write_text(&theta, &format_vector(&m.final_state))?;
    say!(
        "{} seed {}: final test_mse {:.6}, reference {:.6}, n_es {}",
        m.method.label(),
        m.seed,
        m.final_mse,
        m.reference,
        m.n_es.map_or_else(|| "NA".into(), |n| n.to_string())
    );
    say!("wrote {} and {}", trace.display(), theta.display());
    Ok(())
}

fn train(cli: &Cli, method: Method, args: &TrainArgs, trace_v_delta: bool) -> CmdResult {
    let cfg = load_config(cli)?;
    let seed = pick_seed(&cfg, args.seed);
    let data = make_seed_data(&cfg, seed, noise(args.reuse_corruption_noise))?;
    let opts = RunOptions {
        corruption: noise(args.reuse_corruption_noise),
        trace_v_delta,
        wall_clock: args.wall_clock,
        parallel: false,
    };
    let metrics = match method {
        Method::Robust { eta2 } => run_robust_on(&cfg, &data, eta2, &opts)?,
        Method::Vanilla => run_vanilla_on(&cfg, &data, &opts)?,
    };
    save_run(out_dir(cli)?, &metrics)
}

fn experiment(cli: &Cli, no_wall_clock: bool, sequential: bool, reuse: bool) -> CmdResult {
    let cfg = load_config(cli)?;
    let out = out_dir(cli)?;
    let opts = RunOptions {
        corruption: noise(reuse),
        trace_v_delta: true,
        wall_clock: !no_wall_clock,
        parallel: !sequential,
    };
    let outcomes = run_experiment(&cfg, &methods(&cfg), &opts)?;
    let mut done = Vec::new();
    let mut failed = 0;
    for o in outcomes {
        match o.result {
            Ok(m) => {
                write_trace(&out.join(trace_file_name(&m.method, m.seed)), &m.trace)?;
                done.push(m);
            }
            Err(e) => {
                eprintln!("{} seed {}: {e}", o.method.label(), o.seed);
                failed += 1;
            }
        }
    }
    let rows = aggregate(&done);
    write_summary(&out.join("summary.csv"), &rows)?;
    say_raw!(render_summary(&rows));
    if failed > 0 {
        return Err(Failure::Run(format!("{failed} run(s) failed")));
    }
    Ok(())
}

fn bundle(cfg: &ExperimentConfig, args: &ProblemArgs) -> Result<ConstantsBundle, Failure> {
    let eta2 = single_eta2(cfg, args.eta2)?;
    let data = make_seed_data(cfg, pick_seed(cfg, args.seed), CorruptionNoise::Fresh)?;
    let problem = robust_problem(cfg, &data, eta2)?;
    Ok(compute_bundle(
        &problem,
        cfg.beta,
        data.train.rows(),
        &cfg.thetabar_0(),
        args.radius,
    )?)
}

fn constants(cli: &Cli, args: &ProblemArgs) -> CmdResult {
    let cfg = load_config(cli)?;
    let report = bundle(&cfg, args)?.report()?;
    let path = out_dir(cli)?.join("constants.txt");
    write_text(&path, &report)?;
    say_raw!(report);
    Ok(())
}

fn params(cli: &Cli, epsilon: f64, args: &ProblemArgs, ext: ExternalConstants) -> CmdResult {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Failure::Usage(format!("epsilon must be positive, got {epsilon}")));
    }
    let cfg = load_config(cli)?;
    let b = bundle(&cfg, args)?;
    let chosen = algorithm1_params(epsilon, &b, &ext).map_err(|e| match e {
        Error::MissingExternal { step, missing } => Failure::Usage(format!(
            "cannot select {step}: supply {missing} (the external constants are never invented)"
        )),
        other => other.into(),
    })?;
    let text = chosen.render();
    write_text(&out_dir(cli)?.join("params.txt"), &text)?;
    say_raw!(text);
    Ok(())
}

fn verify(cli: &Cli, suites: &[Suite], seed: Option<u64>, corrupt: f64) -> CmdResult {
    let config = load_config(cli)?;
    let defaults = VerifyOptions::default();
    let opts = VerifyOptions {
        seed: seed.unwrap_or(defaults.seed),
        config,
        gradient_corruption: corrupt,
    };
    let suites = if suites.is_empty() { Suite::ALL.to_vec() } else { suites.to_vec() };
    let reports = run_suites(&suites, &opts)?;
    for r in &reports {
        say!("{}", r.summary_line());
    }
    let failing: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.suite.to_string()).collect();
    say!("{}/{} suites passed", reports.len() - failing.len(), reports.len());
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(format!("failing: {}", failing.join(", "))))
    }
}

fn read_vector(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Failure::Usage(format!("{}: `{t}` is not a number", path.display())))
        })
        .collect()
}

fn eval(cli: &Cli, theta: &Path, seed: Option<u64>, eta2: Option<f64>) -> CmdResult {
    let cfg = load_config(cli)?;
    let v = read_vector(theta)?;
    if v.len() != cfg.m && v.len() != cfg.m + 1 {
        return Err(Failure::Usage(format!(
            "{} holds {} numbers; expected {} or {}",
            theta.display(),
            v.len(),
            cfg.m,
            cfg.m + 1
        )));
    }
    let data = make_seed_data(&cfg, pick_seed(&cfg, seed), CorruptionNoise::Fresh)?;
    let mse = test_mse(&v[..cfg.m], &data.test)?;
    let (lo, hi) = reference_band(data.reference);
    say!("test_mse={mse}");
    say!("reference={}", data.reference);
    say!("band=[{lo}, {hi}]");
    if v.len() == cfg.m + 1 {
        let eta2 = eta2.unwrap_or_else(|| largest_eta2(&cfg));
        let problem = robust_problem(&cfg, &data, eta2)?;
        say!("v_delta={}", problem.v_delta_full(&ThetaBar::from_flat(&v)?)?);
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::TrainRobust { eta2, train: args, no_v_delta } => {
            let eta2 = match eta2 {
                Some(e) => *e,
                None => largest_eta2(&load_config(cli)?),
            };
            train(cli, Method::Robust { eta2 }, args, !no_v_delta)
        }
        Command::TrainVanilla { train: args } => train(cli, Method::Vanilla, args, false),
        Command::Experiment {
            no_wall_clock,
            sequential,
            reuse_corruption_noise,
        } => experiment(cli, *no_wall_clock, *sequential, *reuse_corruption_noise),
        Command::Constants { problem } => constants(cli, problem),
        Command::Params {
            epsilon,
            problem,
            c_delta_beta,
            c1,
            c2,
            c6,
        } => params(
            cli,
            *epsilon,
            problem,
            ExternalConstants {
                c_delta_beta: *c_delta_beta,
                c1: *c1,
                c2: *c2,
                c6_override: *c6,
            },
        ),
        Command::Verify {
            suites,
            seed,
            corrupt_gradient,
        } => verify(cli, suites, *seed, *corrupt_gradient),
        Command::Eval { theta, seed, eta2 } => eval(cli, theta, *seed, *eta2),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
