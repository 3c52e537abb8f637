use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gearshift_core::bench::ErrorMetrics;
use gearshift_core::config::{self, Scenario, Setup};
use gearshift_core::controller::PolicyParams;
use gearshift_core::gp::GpModel;
use gearshift_core::gradient::GradReport;
use gearshift_core::history::{metrics_table, read_metrics, reference_csv, trial_csv, write_history};
use gearshift_core::learner::{bench_trial, fit_model, initial_policy, rollout_context, run_learning, trial_seed};
use gearshift_core::{Error, Result};

/// Relative error above which `grad-check` fails.
const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "gearshift", version, about = "Gearshift controller calibration on a virtual bench")]
struct Cli {
    #[command(flatten)]
    files: ConfigFiles,
    #[command(subcommand)]
    command: Command,
}

/// Configuration files; any omitted file takes its defaults.
#[derive(Args)]
struct ConfigFiles {
    /// Driveline parameters (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    params: Option<PathBuf>,
    /// Virtual bench perturbations and noise (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    bench: Option<PathBuf>,
    /// Cost widths (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    cost: Option<PathBuf>,
    /// Learning loop settings (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    learning: Option<PathBuf>,
    /// Overrides the seed of the learning file.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate vehicle inertia, stiffness and damping and report the achieved mode.
    Calibrate,
    /// Write the reference trajectory and nominal command as CSV.
    Reference {
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one bench trial.
    Trial {
        /// Policy file; the initial policy when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Trial CSV output file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Outer iteration whose trial seed is used.
        #[arg(long, default_value_t = 0)]
        iteration: usize,
    },
    /// Run the full learning loop and write its history.
    Learn {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the number of outer iterations.
        #[arg(long)]
        outer_iters: Option<usize>,
    },
    /// Run a policy under conditions it was not trained on.
    Eval {
        /// Policy file; the initial policy when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Trial CSV output file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Outer iteration whose trial seed is used.
        #[arg(long, default_value_t = 0)]
        iteration: usize,
    },
    /// Compare the analytic feedback-gain gradient with finite differences.
    GradCheck {
        /// Policy file; the initial policy when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Roll out on the nominal model only.
        #[arg(long)]
        no_gp: bool,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Print the metrics table of a learning output directory.
    Report {
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    /// Shift duration (s).
    #[arg(long)]
    duration: Option<f64>,
    /// Scale of the initial motor speed.
    #[arg(long)]
    speed_scale: Option<f64>,
    /// Scale of the vehicle load torque.
    #[arg(long)]
    load_scale: Option<f64>,
}

fn setup(files: &ConfigFiles) -> Result<Setup> {
    let driveline = config::load_or_default(files.params.as_deref())?;
    let bench = config::load_or_default(files.bench.as_deref())?;
    let cost = config::load_or_default(files.cost.as_deref())?;
    let mut learning: config::LearningConfig = config::load_or_default(files.learning.as_deref())?;
    if let Some(s) = files.seed {
        learning.seed = s;
    }
    Setup::new(&driveline, &bench, &cost, &learning)
}

fn policy_or_initial(setup: &Setup, path: &Option<PathBuf>) -> Result<PolicyParams> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            PolicyParams::parse(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                other => other,
            })
        }
        None => initial_policy(setup),
    }
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn trial_report(setup: &Setup, params: &PolicyParams, iteration: usize, out: &Option<PathBuf>) -> Result<()> {
    let (trial, m) = bench_trial(setup, params, trial_seed(&setup.learning, iteration))?;
    if out.is_some() {
        write_or_print(out, &trial_csv(&trial))?;
    }
    // Header and the single row; a reduction needs two rows.
    for line in metrics_table(&[(iteration, m)]).lines().take(2) {
        println!("{line}");
    }
    Ok(())
}

fn calibrate(setup: &Setup) {
    let c = &setup.calibration;
    println!("vehicle inertia Iv = {:.6} kg m^2", c.vehicle_inertia);
    println!("stiffness       k  = {:.6} Nm/rad", c.stiffness);
    println!("damping         d  = {:.6} Nm s/rad", c.damping);
    println!("natural frequency  = {:.4} Hz", c.natural_frequency_hz);
    println!("damping ratio      = {:.4}", c.damping_ratio);
    println!("inertia ratio      = {:.4}", c.inertia_ratio);
}

fn learn(mut setup: Setup, out: &Path, outer_iters: Option<usize>) -> Result<()> {
    if let Some(n) = outer_iters {
        setup.learning.outer_iters = n;
    }
    let history = run_learning(&setup)?;
    write_history(out, &history)?;
    let rows: Vec<(usize, ErrorMetrics)> = history.records.iter().map(|r| (r.iteration, r.metrics)).collect();
    print!("{}", metrics_table(&rows));
    for r in &history.records {
        if let Some(o) = &r.optimization {
            println!(
                "iteration {}: policy update {:.1} s, {} steps ({}), J {:.4} -> {:.4}",
                r.iteration,
                r.update_seconds,
                o.iterations,
                o.stop.as_str(),
                o.j_curve[0],
                o.j_curve.last().copied().unwrap_or(f64::NAN)
            );
        }
    }
    match history.error {
        Some(e) => Err(Error::Model(format!("learning stopped early: {e}"))),
        None => Ok(()),
    }
}

fn grad_check(setup: &Setup, params: &PolicyParams, no_gp: bool, corrupt: bool) -> Result<bool> {
    let gp = if no_gp {
        GpModel::Disabled
    } else {
        let (trial, _) = bench_trial(setup, params, trial_seed(&setup.learning, 0))?;
        fit_model(setup, &[trial], 0, None)?.0
    };
    let ctx = rollout_context(setup, &gp);
    let h = setup.learning.fd_step;
    let report = if corrupt {
        GradReport::compute_corrupted(params, &ctx, h)?
    } else {
        GradReport::compute(params, &ctx, h)?
    };
    print!("{}", report.table());
    let ok = report.passed(GRAD_TOL);
    println!("{} (tolerance {GRAD_TOL:e})", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let command = match cli.command {
        Command::Report { dir } => {
            let rows: Vec<_> = read_metrics(&dir)?.iter().map(|m| (m.iteration, m.metrics())).collect();
            print!("{}", metrics_table(&rows));
            return Ok(ExitCode::SUCCESS);
        }
        other => other,
    };
    let setup = setup(&cli.files)?;
    match command {
        Command::Calibrate => calibrate(&setup),
        Command::Reference { out } => write_or_print(&out, &reference_csv(&setup.reference))?,
        Command::Trial { policy, out, iteration } => {
            let params = policy_or_initial(&setup, &policy)?;
            trial_report(&setup, &params, iteration, &out)?;
        }
        Command::Learn { out, outer_iters } => learn(setup, &out, outer_iters)?,
        Command::Eval { policy, scenario, out, iteration } => {
            let params = policy_or_initial(&setup, &policy)?;
            let s = Scenario {
                duration: scenario.duration,
                speed_scale: scenario.speed_scale,
                load_scale: scenario.load_scale,
            };
            trial_report(&setup.with_scenario(&s)?, &params, iteration, &out)?;
        }
        Command::GradCheck { policy, no_gp, corrupt } => {
            let params = policy_or_initial(&setup, &policy)?;
            if !grad_check(&setup, &params, no_gp, corrupt)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { .. } => {}
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
