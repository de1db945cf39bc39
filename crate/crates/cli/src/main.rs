use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rkhs_flow::experiment::{
    run_diagnose, run_kernel_selftest, run_sweep, run_train, Checkpoint, ExperimentConfig, SweepParam,
};
use rkhs_flow::{Error, KernelSpec, TrainStatus};

mod svg;

#[derive(Parser)]
#[command(
    name = "rkhs-flow",
    version,
    about = "Train and diagnose RKHS flow residual networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write log-scale loss curves as SVG.
    #[arg(long)]
    emit_svg: bool,
    /// Worker threads for sweeps.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model.
    Train(Common),
    /// Sweep the latent dimension q with q_int = q_int_factor * q.
    SweepQ(Common),
    /// Sweep the feature count q_int at fixed q.
    SweepQint(Common),
    /// Convergence diagnostics at a checkpoint, or the q-threshold sweep.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Control file written by `train`.
        #[arg(long, requires = "bank")]
        checkpoint: Option<PathBuf>,
        /// Feature bank file written by `train`.
        #[arg(long, requires = "checkpoint")]
        bank: Option<PathBuf>,
    },
    /// Kernel, frequency and feature checks.
    KernelSelftest {
        #[command(flatten)]
        common: Common,
        /// Smoothness to test (number or `inf`).
        #[arg(long, default_value = "3")]
        nu: String,
        /// Compare the moments with the wrong smoothness; must fail.
        #[arg(long)]
        negative_control: bool,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Cmd::Train(common) => {
            let cfg = load(&common)?;
            let run = run_train(&cfg, &common.out)?;
            let log = run.log();
            if common.emit_svg {
                svg::write_curves(
                    &common.out.join("loss.svg"),
                    "training loss",
                    &[("loss".to_string(), log.losses())],
                )?;
            }
            let upper = run.pl_upper_passes();
            let lower = run.pl_lower_passes();
            println!("status = {}", log.status);
            println!("steps = {}", log.records.len().saturating_sub(1));
            if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
                println!("initial_loss = {:e}", first.loss);
                println!("final_loss = {:e}", last.loss);
            }
            println!("init_satisfied = {}", run.report.init_satisfied);
            println!("pl_upper_pass = {upper}/{}", run.pl_checks.len());
            println!("pl_lower_pass = {lower}/{}", run.pl_checks.len());
            Ok(match log.status {
                TrainStatus::Diverged { .. } => 1,
                _ => 0,
            })
        }
        Cmd::SweepQ(common) => sweep(&common, SweepParam::Q),
        Cmd::SweepQint(common) => sweep(&common, SweepParam::QInt),
        Cmd::Diagnose {
            common,
            checkpoint,
            bank,
        } => {
            let cfg = load(&common)?;
            let cp = checkpoint.zip(bank).map(|(control, bank)| Checkpoint { control, bank });
            let summary = run_diagnose(&cfg, &common.out, cp.as_ref())?;
            for c in &summary.checks {
                println!("{}", c.line());
            }
            Ok(if summary.checks_passed() { 0 } else { 1 })
        }
        Cmd::KernelSelftest {
            common,
            nu,
            negative_control,
        } => {
            let spec: KernelSpec = nu.parse()?;
            let checks = run_kernel_selftest(spec, negative_control)?;
            std::fs::create_dir_all(&common.out)?;
            let text: String = checks.iter().map(|c| c.line() + "\n").collect();
            std::fs::write(common.out.join("selftest.txt"), &text)?;
            print!("{text}");
            Ok(if checks.iter().all(|c| c.passed) { 0 } else { 1 })
        }
    }
}

fn sweep(common: &Common, param: SweepParam) -> Result<u8, Error> {
    let cfg = load(common)?;
    let summary = run_sweep(&cfg, param, &common.out, common.jobs)?;
    if common.emit_svg {
        let curves: Vec<(String, Vec<f64>)> = summary
            .cells
            .iter()
            .map(|c| (format!("{} = {}", param.name(), c.param), c.mean_loss.clone()))
            .collect();
        svg::write_curves(
            &common.out.join(format!("sweep_{}.svg", param.name())),
            "mean training loss",
            &curves,
        )?;
    }
    let mut failed = false;
    for cell in &summary.cells {
        let bad = cell
            .runs
            .iter()
            .filter(|r| r.status() == "diverged" || r.result.is_err())
            .count();
        failed |= bad > 0;
        println!(
            "{} = {}: q = {}, q_int = {}, final_mean_loss = {:e}, failed_runs = {bad}",
            param.name(),
            cell.param,
            cell.q,
            cell.q_int,
            cell.final_mean_loss()
        );
    }
    println!("summary = {}", summary.csv_path.display());
    Ok(if failed { 1 } else { 0 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
