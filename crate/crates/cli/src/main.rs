use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use drpe_cli::{
    compare_methods, emit_plot_data, exit_code, power_flow_table, run_case, sweep_weights, CaseConfig, PlotKind,
    RunReport,
};
use drpe_core::Result;

#[derive(Parser)]
#[command(
    name = "drpe",
    version,
    about = "Incentive-based demand response equilibria on distribution networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a day before and after DR and print the report.
    Run {
        config: PathBuf,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the DRP weights (w1, 1 - w1) and print bill and discomfort.
    Sweep {
        config: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
    },
    /// Solve the DR windows with both methods side by side.
    Compare { config: PathBuf },
    /// Extract a plot series from a saved report.
    Plotdata {
        report: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Base power flow of one period.
    Pf {
        config: PathBuf,
        #[arg(long)]
        period: usize,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, out } => {
            let report = run_case(&CaseConfig::load(config)?)?;
            match out {
                Some(p) => report.write(p)?,
                None => print!("{}", report.render()),
            }
        }
        Command::Sweep { config, step } => {
            let points = sweep_weights(&CaseConfig::load(config)?, step)?;
            println!("w1,w2,customer_bill,discomfort_cost");
            for p in points {
                println!("{:.2},{:.2},{:.6},{:.6}", p.w1, p.w2, p.bill, p.discomfort);
            }
        }
        Command::Compare { config } => {
            let cfg = CaseConfig::load(config)?;
            print!("{}", compare_methods(&cfg)?.render(&cfg.currency));
        }
        Command::Plotdata { report, kind, out } => {
            let kind: PlotKind = kind.parse()?;
            emit_plot_data(&RunReport::read(report)?, kind, out)?;
        }
        Command::Pf { config, period } => {
            print!("{}", power_flow_table(&CaseConfig::load(config)?, period)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("drpe: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
