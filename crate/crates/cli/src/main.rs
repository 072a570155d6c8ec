use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedlab::harness::{
    run_detect, run_leak, run_poison, run_report, run_sweep, run_train, write_detect_outputs, write_leak_outputs,
    write_train_outputs, Config, ExperimentConfig,
};
use fedlab::Result;

#[derive(Parser)]
#[command(name = "fedlab", version, about = "Federated-learning threat laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (`key = value` lines).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output root; falls back to `output.dir`, then `results`.
    #[arg(long, short, env = "FEDLAB_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Federated training; writes results.csv (and ledger.csv under DP).
    Train(Common),
    /// Gradient-leakage attack; writes MSE/SSIM traces and image dumps.
    Leak(Common),
    /// Poisoned federated training; also writes the per-class update trace.
    Poison(Common),
    /// Forensics over `forensics.trace`, or over a fresh poisoned run.
    Detect(Common),
    /// Runs `sweep.command` once per value of `sweep.key`.
    Sweep(Common),
    /// Folds results CSVs into summary and line plot-data files.
    Report {
        /// results.csv files to fold.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short, env = "FEDLAB_OUT")]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::parse("")?,
    };
    for assignment in &common.set {
        cfg.apply_override(assignment)?;
    }
    Ok(cfg)
}

fn out_root(flag: Option<&Path>, exp: Option<&ExperimentConfig>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| exp.and_then(|e| e.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn run(command: Command) -> Result<()> {
    let (common, kind) = match command {
        Command::Report { inputs, out } => {
            let dir = out_root(out.as_deref(), None);
            run_report(&inputs, &dir)?;
            println!("wrote report to {}", dir.display());
            return Ok(());
        }
        Command::Train(c) => (c, "train"),
        Command::Leak(c) => (c, "leak"),
        Command::Poison(c) => (c, "poison"),
        Command::Detect(c) => (c, "detect"),
        Command::Sweep(c) => (c, "sweep"),
    };
    let cfg = load(&common)?;
    let exp = ExperimentConfig::from_config(&cfg)?;
    let root = out_root(common.out.as_deref(), Some(&exp));
    if kind == "sweep" {
        let points = run_sweep(&cfg, &root)?;
        for (id, results) in &points {
            println!("{id}: {} rows in {}", results.len(), root.join(id).display());
        }
        return Ok(());
    }
    let dir = root.join(&exp.scenario);
    match kind {
        "train" => {
            let out = run_train(&exp)?;
            write_train_outputs(&dir, &out)?;
            println!("final accuracy {:.4}", out.log.final_eval().accuracy);
        }
        "poison" => {
            let out = run_poison(&exp)?;
            write_train_outputs(&dir, &out)?;
            let eval = out.log.final_eval();
            println!("final accuracy {:.4}, victim F1 {:?}", eval.accuracy, eval.victim_f1);
        }
        "leak" => {
            let out = run_leak(&exp)?;
            write_leak_outputs(&dir, &out)?;
            let mses = out.final_mses();
            let leaked = out.trials.iter().filter(|t| t.recon.success).count();
            println!("{leaked}/{} reconstructions below the success threshold", mses.len());
        }
        _ => {
            let out = run_detect(&exp)?;
            write_detect_outputs(&dir, &out)?;
            println!("flagged clients {:?}", out.report.flagged);
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
