use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bdsde_rmc::harness::{
    fit_loglog_slope, load_config, run_convergence, run_oracle_check, run_solve, write_convergence_csv,
    write_oracle_csv, write_solve_outputs, ErrorColumn, SweepAxis,
};
use bdsde_rmc::model::CaseTag;
use bdsde_rmc::{Error, Result};

#[derive(Parser)]
#[command(name = "bdsde-rmc", version, about = "Regression Monte-Carlo solver for backward doubly stochastic SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one backward solve.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Per-step report CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Summary JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Sweep one parameter and record errors against the exact discrete solution.
    Convergence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated levels.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a solve with the reference solutions.
    OracleCheck {
        #[arg(long)]
        case: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the basis layout as CSV.
    BasisInfo {
        #[arg(long)]
        config: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("BDSDE_RMC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("BDSDE_RMC_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Solve { config, out, summary } => {
            let mut cfg = load_config(&config)?;
            if out.is_some() {
                cfg.outputs.report = out;
            }
            if summary.is_some() {
                cfg.outputs.summary = summary;
            }
            let outcome = run_solve(&cfg)?;
            write_solve_outputs(&cfg, &outcome)?;
            let r = &outcome.report;
            println!(
                "Y0 mean {:.6} std {:.6} (M = {}, N = {}, C0 = {:.4}, event_ok fraction {:.3}, {:.0} ms)",
                r.y0_mean,
                r.y0_std,
                r.n_paths,
                r.n_steps,
                r.truncation.c0,
                r.event_ok_fraction(),
                r.timings.total_ms
            );
        }
        Command::Convergence {
            config,
            axis,
            levels,
            replicates,
            out,
        } => {
            let cfg = load_config(&config)?;
            let axis: SweepAxis = axis.parse()?;
            let rows = run_convergence(&cfg, axis, &levels, replicates)?;
            write_convergence_csv(&rows, &out)?;
            for (name, col) in [("errY", ErrorColumn::ErrY), ("errZ", ErrorColumn::ErrZ)] {
                match fit_loglog_slope(&rows, col) {
                    Ok(fit) => println!("{name}: log-log slope {:.4} (stderr {:.4})", fit.slope, fit.stderr),
                    Err(e) => println!("{name}: no slope ({e})"),
                }
            }
        }
        Command::OracleCheck { case, config, out } => {
            let mut cfg = load_config(&config)?;
            cfg.problem.case = case.parse::<CaseTag>()?;
            let rows = run_oracle_check(&cfg)?;
            let file = std::fs::File::create(&out)?;
            write_oracle_csv(&rows, std::io::BufWriter::new(file))?;
            for r in &rows {
                println!("{:<28} {:>14.6e} ref {:>14.6e}", r.metric, r.value, r.reference);
            }
        }
        Command::BasisInfo { config } => {
            let cfg = load_config(&config)?;
            let prepared = bdsde_rmc::harness::prepare(&cfg)?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            prepared.basis.write_info_csv(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
