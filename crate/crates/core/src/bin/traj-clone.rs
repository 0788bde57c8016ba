use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use traj_clone::harness::artifacts::Artifacts;
use traj_clone::harness::commands;
use traj_clone::harness::config::ExperimentConfig;
use traj_clone::harness::report::ablation_text;
use traj_clone::harness::HarnessError;

#[derive(Parser)]
#[command(name = "traj-clone", about = "Trajectory-learning behavioral cloning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config; defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `eval.agent`: a checkpoint name or "expert".
    #[arg(long, global = true)]
    agent: Option<String>,
    /// Experiment directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert demonstrations to dataset.jsonl.
    GenData,
    /// Train the configured model.
    Train,
    /// CVaR fine-tune the configured model into <name>-cvar.
    FinetuneCvar,
    /// Closed-loop evaluation on the validation tracks.
    Eval,
    /// Affordance-weight grid search.
    GridSearch,
    /// Ablation table, CVaR curves, loss curves and summary.
    Report,
    /// Gradient, mixture and CVaR oracles; exits nonzero on failure.
    Verify,
}

fn run(cli: &Cli) -> Result<bool, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(a) = &cli.agent {
        cfg.eval.agent = Some(a.clone());
    }
    let art = Artifacts::new(&cli.out);
    match cli.command {
        Command::GenData => {
            let n = commands::gen_data(&art, &cfg)?;
            println!("wrote {n} records to {}", art.dataset_path().display());
        }
        Command::Train => {
            let name = commands::train_cmd(&art, &cfg)?;
            println!("wrote {}", art.checkpoint_path(&name).display());
        }
        Command::FinetuneCvar => {
            let name = commands::finetune_cmd(&art, &cfg)?;
            println!("wrote {}", art.checkpoint_path(&name).display());
        }
        Command::Eval => {
            let r = commands::eval_cmd(&art, &cfg)?;
            println!(
                "{}: {:.1} miles, {} collisions, {:.2} per 100 mi, {:.1} mph",
                r.agent, r.miles_driven, r.collisions, r.collisions_per_100mi, r.mean_speed_mph
            );
        }
        Command::GridSearch => {
            let (best, rows) = commands::grid_cmd(&art, &cfg)?;
            print!("{}", commands::grid_csv(&rows));
            println!("best w_aff {best}");
        }
        Command::Report => {
            let s = commands::report_cmd(&art, &cfg)?;
            print!("{}", ablation_text(&s.ablation));
        }
        Command::Verify => {
            let rep = commands::verify_cmd(&art, &cfg)?;
            for line in rep.lines() {
                println!("{line}");
            }
            return Ok(rep.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
