//! `deformba` command line entry point. Exit codes: 0 all checks pass,
//! 1 a check failed or a suite errored at runtime, 2 usage or config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deformba::harness::{
    load_config, load_forward_input, run_bench, run_flops, run_forward, run_gradcheck,
    run_verify, write_flops_outputs, write_forward_outputs, write_report, Command, HarnessError,
    Report, RunConfig,
};

#[derive(Parser)]
#[command(name = "deformba", version, about = "Verification harness for the Deformba block family")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the report and any artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the oracle and invariant suite.
    Verify(CommonArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(CommonArgs),
    /// Push a DTSR image through the backbone and trace stage shapes.
    Forward {
        #[command(flatten)]
        common: CommonArgs,
        /// Input tensor in DTSR format.
        #[arg(long)]
        input: PathBuf,
    },
    /// Print the analytic cost table and run the calibration gates.
    Flops(CommonArgs),
    /// Time the scan algorithms; informational only.
    Bench(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match try_run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn exit_for(report: &Report) -> ExitCode {
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn try_run(cli: Cli) -> Result<ExitCode, HarnessError> {
    let (invoked, common, input) = match &cli.command {
        Cmd::Verify(c) => (Command::Verify, c, None),
        Cmd::Gradcheck(c) => (Command::Gradcheck, c, None),
        Cmd::Forward { common, input } => (Command::Forward, common, Some(input.clone())),
        Cmd::Flops(c) => (Command::Flops, c, None),
        Cmd::Bench(c) => (Command::Bench, c, None),
    };
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(pinned) = cfg.command {
        if pinned != invoked {
            return Err(HarnessError::Config(format!(
                "config pins command '{}' but '{}' was invoked",
                pinned.name(),
                invoked.name()
            )));
        }
    }
    let out = common.out.clone().or_else(|| cfg.out.clone());
    match invoked {
        Command::Verify => {
            let report = run_verify(&cfg)?;
            print!("{}", report.summary());
            if let Some(dir) = &out {
                write_report(dir, &report)?;
            }
            Ok(exit_for(&report))
        }
        Command::Gradcheck => {
            let report = run_gradcheck(&cfg)?;
            print!("{}", report.summary());
            if let Some(dir) = &out {
                write_report(dir, &report)?;
            }
            Ok(exit_for(&report))
        }
        Command::Forward => {
            let image = load_forward_input(&input.expect("clap requires --input"))?;
            let (report, fwd) = run_forward(&cfg, &image)?;
            for line in &fwd.trace {
                println!("{}", line);
            }
            print!("{}", report.summary());
            // Forward always materializes its stage artifacts.
            let dir = out.unwrap_or_else(|| PathBuf::from("."));
            write_forward_outputs(&dir, &fwd.stages)?;
            write_report(&dir, &report)?;
            Ok(exit_for(&report))
        }
        Command::Flops => {
            let (report, table) = run_flops(&cfg)?;
            print!("{}", table.to_text());
            print!("{}", report.summary());
            if let Some(dir) = &out {
                write_flops_outputs(dir, &table)?;
                write_report(dir, &report)?;
            }
            Ok(exit_for(&report))
        }
        Command::Bench => {
            let report = run_bench(&cfg)?;
            print!("{}", report.summary());
            if let Some(dir) = &out {
                write_report(dir, &report)?;
            }
            Ok(exit_for(&report))
        }
    }
}
