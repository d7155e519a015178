use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use vdc_sim::{output_dirs, run_many, ControllerChoice, RunRequest};

/// Closed-loop exoskeleton simulator.
#[derive(Debug, Parser)]
#[command(name = "vdc-sim", version)]
struct Args {
    /// Scenario file; repeat to run several. Without it the bundled default runs.
    #[arg(long = "scenario", value_name = "PATH")]
    scenarios: Vec<PathBuf>,
    /// Controller override: vdc, pd or both (compare mode).
    #[arg(long, value_name = "vdc|pd|both")]
    controller: Option<ControllerChoice>,
    /// Simulated time, s.
    #[arg(long, value_name = "S")]
    duration: Option<f64>,
    /// Control period, s.
    #[arg(long, value_name = "S")]
    dt: Option<f64>,
    /// Output directory.
    #[arg(long, env = "VDC_OUT_DIR", default_value = "vdc-out", value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Log accompanying functions, per-subsystem power flows and barrier margins.
    #[arg(long)]
    diagnostics: bool,
    /// Keep every n-th control step in the log.
    #[arg(long, default_value_t = 1, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    decimate: u64,
    /// Scenario files run in parallel.
    #[arg(long, default_value_t = 1, value_name = "N")]
    jobs: usize,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let dirs = output_dirs(&args.out, &args.scenarios);
    let scenarios: Vec<Option<PathBuf>> = if args.scenarios.is_empty() {
        vec![None]
    } else {
        args.scenarios.iter().cloned().map(Some).collect()
    };
    let reqs: Vec<RunRequest> = scenarios
        .into_iter()
        .zip(dirs)
        .map(|(scenario, out)| RunRequest {
            scenario,
            controller: args.controller,
            duration: args.duration,
            dt: args.dt,
            out,
            seed: args.seed,
            diagnostics: args.diagnostics,
            decimate: args.decimate as usize,
        })
        .collect();
    let mut failed = false;
    for result in run_many(&reqs, args.jobs) {
        match result {
            Ok(report) => {
                for (kind, m) in &report.runs {
                    println!(
                        "{kind}: {} steps, max |e_a| {:.4e} rad, written to {}",
                        m.steps,
                        m.max_ea.iter().copied().fold(0.0, f64::max),
                        report.out.display()
                    );
                }
            }
            Err(e) => {
                failed = true;
                eprintln!("error: {e:#}");
            }
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
