//! Command-line front end: seeded experiment runs and ground-truth solves.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use bilevel::grid::build_grid;
use bilevel::harness::{
    apply_config_file, parse_estimator, parse_p_variant, run_csv_path, run_experiment, Algorithm,
    ExperimentConfig, HarnessError,
};
use bilevel::oracle::{save_ground_truth, solve_ground_truth};
use bilevel::problems::BilevelProblem;

#[derive(Parser)]
#[command(
    name = "bilbo",
    version,
    about = "Bilevel Bayesian optimization over discretized domains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded optimization experiments and emit per-run CSVs.
    Run(RunArgs),
    /// Solve a problem exactly on its grid by brute force.
    GroundTruth(GroundTruthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value configuration file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Problem name: branin_goldstein, smd2, smd6, or smd12.
    #[arg(long)]
    problem: Option<String>,
    /// Algorithm: bilbo, trustedrand, or nested.
    #[arg(long)]
    algo: Option<String>,
    /// Comma-separated list of run seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Total observation budget per run, initial observations included.
    #[arg(long)]
    queries: Option<usize>,
    /// Confidence level parameter in (0, 1).
    #[arg(long)]
    delta: Option<f64>,
    /// Slack added to the trusted lower-optimality threshold.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Trusted lower-optimal set variant: p_plus or p_bar.
    #[arg(long = "p-variant")]
    p_variant: Option<String>,
    /// Grid points per dimension.
    #[arg(long = "grid-m")]
    grid_m: Option<usize>,
    /// Final-recommendation rule: posterior_mean or minmax.
    #[arg(long)]
    estimator: Option<String>,
    /// Initial random observations per function.
    #[arg(long = "init-observations")]
    init_observations: Option<usize>,
    /// Initial kernel lengthscale for all functions.
    #[arg(long)]
    lengthscale: Option<f64>,
    /// Multiplier on the theoretical confidence width (1 = theory schedule).
    #[arg(long = "beta-scale")]
    beta_scale: Option<f64>,
    /// Observation noise standard deviation in raw output units.
    #[arg(long = "noise-std")]
    noise_std: Option<f64>,
    /// Tolerance for lower-level ties in the ground-truth solve.
    #[arg(long = "tie-tolerance")]
    tie_tolerance: Option<f64>,
    /// Enable or disable per-iteration bound audits (solver runs only).
    #[arg(long)]
    audit: Option<bool>,
    /// Output directory for CSVs and the ground-truth cache.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation budget per lower-level solve (nested baseline).
    #[arg(long = "nested-lower-budget")]
    nested_lower_budget: Option<usize>,
    /// Random restarts per lower-level solve (nested baseline).
    #[arg(long = "nested-lower-restarts")]
    nested_lower_restarts: Option<usize>,
    /// Finite-difference step for the lower-level solver (nested baseline).
    #[arg(long = "nested-fd-step")]
    nested_fd_step: Option<f64>,
}

#[derive(Args)]
struct GroundTruthArgs {
    /// Problem name: branin_goldstein, smd2, smd6, or smd12.
    #[arg(long)]
    problem: String,
    /// Grid points per dimension (defaults to the problem's usual setting).
    #[arg(long = "grid-m")]
    grid_m: Option<usize>,
    /// Tolerance for lower-level ties.
    #[arg(long = "tie-tolerance")]
    tie_tolerance: Option<f64>,
    /// Directory to write the binary ground-truth cache into.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not failures; everything else is
            // a usage error and reports through the generic failure code.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let code = match cli.command {
        Command::Run(args) => run(args),
        Command::GroundTruth(args) => ground_truth(args),
    };
    ExitCode::from(code)
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut config = ExperimentConfig::new("", Algorithm::Bilbo);
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        apply_config_file(&mut config, &text)?;
    }
    if let Some(v) = &args.problem {
        config.problem = v.clone();
    }
    if let Some(v) = &args.algo {
        config.algorithm = v.parse().map_err(HarnessError::Config)?;
    }
    if let Some(v) = &args.seeds {
        config.seeds = v.clone();
    }
    if let Some(v) = args.queries {
        config.total_queries = v;
    }
    if let Some(v) = args.delta {
        config.delta = v;
    }
    if let Some(v) = args.epsilon {
        config.epsilon = v;
    }
    if let Some(v) = &args.p_variant {
        config.p_variant = Some(parse_p_variant(v).map_err(HarnessError::Config)?);
    }
    if let Some(v) = args.grid_m {
        config.grid_m = Some(v);
    }
    if let Some(v) = &args.estimator {
        config.estimator = parse_estimator(v).map_err(HarnessError::Config)?;
    }
    if let Some(v) = args.init_observations {
        config.init_observations = v;
    }
    if let Some(v) = args.lengthscale {
        config.init_lengthscale = Some(v);
    }
    if let Some(v) = args.beta_scale {
        config.beta_scale = Some(v);
    }
    if let Some(v) = args.noise_std {
        config.noise_std = Some(v);
    }
    if let Some(v) = args.tie_tolerance {
        config.tie_tolerance = Some(v);
    }
    if let Some(v) = args.audit {
        config.audit = v;
    }
    if let Some(v) = &args.out {
        config.out_dir = Some(v.clone());
    }
    if let Some(v) = args.nested_lower_budget {
        config.nested_lower_budget = v;
    }
    if let Some(v) = args.nested_lower_restarts {
        config.nested_lower_restarts = v;
    }
    if let Some(v) = args.nested_fd_step {
        config.nested_fd_step = Some(v);
    }
    if config.problem.is_empty() {
        return Err(HarnessError::Config(
            "a problem must be named via --problem or the config file".into(),
        ));
    }
    Ok(config)
}

fn run(args: RunArgs) -> u8 {
    let config = match build_config(&args) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let records = match run_experiment(&config) {
        Ok(records) => records,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };

    for record in &records {
        let header = format!(
            "{} {} seed {}",
            record.problem, record.algorithm, record.seed
        );
        match &record.reason {
            Some(reason) => println!("{header}: stopped early ({reason})"),
            None => {
                let queries = record.rows.last().map_or(0, |r| r.queries);
                match &record.final_estimator {
                    Some((point, regrets)) => println!(
                        "{header}: {queries} queries, recommendation ({}, {}) with sum regret {:.6}",
                        point.x_idx, point.z_idx, regrets.sum
                    ),
                    None => println!("{header}: {queries} queries, no recommendation available"),
                }
            }
        }
        if let Some(dir) = &config.out_dir {
            println!("  wrote {}", run_csv_path(dir, record).display());
        }
    }

    if records.iter().all(|r| r.reason.is_some()) {
        eprintln!("all seeds declared infeasibility");
        2
    } else {
        0
    }
}

fn ground_truth(args: GroundTruthArgs) -> u8 {
    let result = (|| -> Result<(), HarnessError> {
        let problem = BilevelProblem::by_name(&args.problem)?;
        let m = args.grid_m.unwrap_or_else(|| problem.default_grid_m());
        let grid = build_grid(&problem.x_bounds(), &problem.z_bounds(), m)?;
        let tie_tol = args
            .tie_tolerance
            .unwrap_or_else(|| problem.default_tie_tolerance());
        let gt = solve_ground_truth(&problem, &grid, tie_tol);

        println!(
            "{} on a {}^{} grid ({} joint points)",
            problem.name(),
            m,
            grid.d_x() + grid.d_z(),
            grid.n_points()
        );
        println!(
            "feasible points: {} of {}",
            gt.feasible_mask.count_ones(),
            grid.n_points()
        );
        match gt.best {
            Some(best) => {
                let (x, z) = grid.coordinates(best.point);
                println!(
                    "optimum: F = {:.12} at x_idx {} z_idx {} (x = {x:?}, z = {z:?})",
                    best.f_upper, best.point.x_idx, best.point.z_idx
                );
                println!(
                    "lower-level ties at that x: {}",
                    gt.z_star[best.point.x_idx].len()
                );
            }
            None => println!("no feasible optimum on this grid"),
        }
        if let Some(dir) = &args.out {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("gt_{}_m{}.bin", problem.name(), m));
            save_ground_truth(&path, &gt)?;
            println!("wrote {}", path.display());
        }
        Ok(())
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
