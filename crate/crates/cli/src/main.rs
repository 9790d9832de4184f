use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asif_cli::config::{ModeTag, Overrides, Scenario, StatisticSpec};
use asif_cli::error::{CliError, CliResult};
use asif_cli::experiments::{self, AuditParams, Figure1Params, Fixture, MatchingParams};
use asif_cli::selftest;
use asif_core::relevance::BetaChoice;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "asif",
    version,
    about = "As-if randomization analysis experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeTag>,
    /// Monte Carlo replicates.
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BetaArg {
    Nominal,
    Attained,
}

#[derive(Subcommand)]
enum Command {
    /// Marginal and per-cell coverage of a scenario.
    Coverage,
    /// Conditional coverage by proportion treated for a Bernoulli experiment.
    Figure1 {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        pi: f64,
        #[arg(long, default_value_t = 0.025)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        population_seed: u64,
        /// Draws per k for the oracle quantiles; defaults to --replicates.
        #[arg(long)]
        quantile_replicates: Option<usize>,
        #[arg(long, default_value_t = 1e-8)]
        min_cell_prob: f64,
    },
    /// Strict balance-ball map with y0 = y1 = x.
    ZeroCoverage {
        #[arg(long, default_value_t = 12)]
        n: usize,
        #[arg(long, default_value_t = 0.025)]
        alpha: f64,
    },
    /// Adversarial betting strategy against a scenario's procedure.
    BettingAudit {
        /// Statistic keying the bets.
        #[arg(long, default_value = "n_treated")]
        w: String,
        #[arg(long, value_enum, default_value = "nominal")]
        beta: BetaArg,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Greedy matching after propensity-score assignment.
    MatchingDemo {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        alpha0: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha1: f64,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 0.025)]
        alpha: f64,
        #[arg(long, value_enum)]
        fixture: Option<Fixture>,
    },
    /// Fuzzy interval for a stochastic map.
    Fuzzy {
        /// Observed assignment such as 10110010; drawn from the design when absent.
        #[arg(long)]
        z: Option<String>,
    },
    /// Quick acceptance checks; exit code 4 if any fails.
    Selftest,
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        mode: c.mode,
        replicates: c.replicates,
    }
}

fn load_scenario(c: &Common, fallback: Option<&str>) -> CliResult<(Scenario, Option<PathBuf>)> {
    let (mut s, dir) = match (&c.config, fallback) {
        (Some(path), _) => (
            Scenario::from_path(path)?,
            path.parent().map(Path::to_path_buf),
        ),
        (None, Some(text)) => (Scenario::from_toml(text)?, None),
        (None, None) => return Err(CliError::Config("this command needs --config".into())),
    };
    s.apply(&overrides(c));
    Ok((s, dir))
}

fn run(cli: Cli) -> CliResult<()> {
    let c = &cli.common;
    let out_or = |default: PathBuf| c.out.clone().unwrap_or(default);
    match cli.command {
        Command::Coverage => {
            let (s, dir) = load_scenario(c, None)?;
            let out = out_or(s.output.dir.clone());
            let r = experiments::run_coverage(&s, dir.as_deref(), &out)?;
            println!(
                "{}: marginal coverage {} over {} cells",
                r.map,
                r.marginal,
                r.cells.len()
            );
        }
        Command::Figure1 {
            n,
            pi,
            alpha,
            population_seed,
            quantile_replicates,
            min_cell_prob,
        } => {
            let replicates = c.replicates.unwrap_or(10_000);
            let p = Figure1Params {
                n,
                pi,
                alpha,
                population_seed,
                seed: c.seed.unwrap_or(1),
                replicates,
                quantile_replicates: quantile_replicates.unwrap_or(replicates),
                min_cell_prob,
                ..Figure1Params::default()
            };
            let f = experiments::run_figure1(&p, &out_or("out".into()))?;
            println!(
                "figure1: marginal MC coverage {}, K = {:?}",
                f.marginal_mc_coverage, f.k_set
            );
        }
        Command::ZeroCoverage { n, alpha } => {
            let z = experiments::run_zero_coverage(
                n,
                c.seed.unwrap_or(1),
                alpha,
                &out_or("out".into()),
            )?;
            println!(
                "strict-ball coverage {} (unique balance: {}), inclusive-ball coverage {}",
                z.strict_coverage, z.unique_balance, z.inclusive_coverage
            );
        }
        Command::BettingAudit { w, beta, tolerance } => {
            let (s, dir) = load_scenario(c, Some(experiments::DEFAULT_AUDIT_SCENARIO))?;
            let params = AuditParams {
                w: StatisticSpec::Name(w),
                beta: match beta {
                    BetaArg::Nominal => BetaChoice::Nominal,
                    BetaArg::Attained => BetaChoice::AttainedMarginal,
                },
                tolerance,
            };
            let a = experiments::run_betting_audit(
                &s,
                dir.as_deref(),
                &params,
                &out_or(s.output.dir.clone()),
            )?;
            println!(
                "E(R) = {} (atom slack {:?})",
                a.expected_return, a.atom_slack
            );
        }
        Command::MatchingDemo {
            n,
            alpha0,
            alpha1,
            tau,
            alpha,
            fixture,
        } => {
            let p = MatchingParams {
                n,
                alpha0,
                alpha1,
                tau,
                alpha,
                seed: c.seed.unwrap_or(1),
                fixture,
            };
            let d = experiments::run_matching_demo(&p, &out_or("out".into()))?;
            println!(
                "naive coverage {}, corrected coverage {}, conditionality check {}",
                d.naive.marginal_coverage, d.corrected.marginal_coverage, d.check_passes
            );
        }
        Command::Fuzzy { z } => {
            let (s, dir) = load_scenario(c, None)?;
            let out = out_or(s.output.dir.clone());
            let f = experiments::run_fuzzy(&s, dir.as_deref(), z.as_deref(), &out)?;
            println!(
                "fuzzy interval at {}: membership at tau {}",
                f.z, f.membership_at_tau
            );
        }
        Command::Selftest => {
            let checks = selftest::run_selftest(c.seed.unwrap_or(1), &out_or("out".into()));
            match &checks {
                Ok(all) => println!("selftest: {} checks passed", all.len()),
                Err(CliError::Threshold(names)) => println!("selftest failed: {names}"),
                Err(_) => {}
            }
            checks?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ASIF_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(w) = cli.common.workers {
        if w == 0 {
            eprintln!("config error: --workers must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
        {
            eprintln!("computation error: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
