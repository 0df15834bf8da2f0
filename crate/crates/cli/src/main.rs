use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radarloop_cli::commands::{
    cmd_eval, cmd_odometry, cmd_slam, cmd_synth, cmd_train_align, cmd_train_loop, resolve_config,
};
use radarloop_cli::error::Result;

#[derive(Parser)]
#[command(name = "radarloop", version, about = "Radar loop-closure SLAM pipeline and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config layered over the dataset's stored config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set seed=7 --set grid.top_k=[1]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a sequence into a dataset directory.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Doppler/IMU odometry: TUM trajectory and per-scan inlier clouds.
    Odometry {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the alignment classifier on a dataset (no ground truth needed).
    TrainAlign {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model directory.
        #[arg(long)]
        models: PathBuf,
    },
    /// Train loop classifiers on a dataset with ground truth, using the
    /// alignment model already in the model directory.
    TrainLoop {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        models: PathBuf,
    },
    /// Run the full pipeline over the experiment grid.
    Slam {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Pre-trained models; trained on a simulated sequence when omitted.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a results directory against a TUM ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out } => {
            let c = resolve_config(None, cfg.config.as_deref(), &cfg.overrides)?;
            let n = cmd_synth(&c, &out)?;
            println!("wrote {n} scans to {}", out.display());
        }
        Command::Odometry { dataset, cfg, out } => {
            let c = resolve_config(Some(&dataset), cfg.config.as_deref(), &cfg.overrides)?;
            let front = cmd_odometry(&dataset, &c, &out)?;
            let failed = front.odometry.failed.iter().filter(|&&f| f).count();
            println!("{} scans, {failed} held over", front.odometry.trajectory.len());
        }
        Command::TrainAlign { dataset, cfg, models } => {
            let c = resolve_config(Some(&dataset), cfg.config.as_deref(), &cfg.overrides)?;
            let t = cmd_train_align(&dataset, &c, &models)?;
            println!("{} samples from {} pairs", t.samples, t.pairs);
            for e in &t.evaluation {
                let auroc = e.auroc.map_or("n/a".to_string(), |a| format!("{a:.3}"));
                println!("{:?} {:?}: AUROC {auroc}", e.feature_set, e.class);
            }
        }
        Command::TrainLoop { dataset, cfg, models } => {
            let c = resolve_config(Some(&dataset), cfg.config.as_deref(), &cfg.overrides)?;
            for (k, clf) in cmd_train_loop(&dataset, &c, &models)? {
                println!("k={k}: theta {:?}", clf.theta());
            }
        }
        Command::Slam {
            dataset,
            cfg,
            models,
            out,
        } => {
            let c = resolve_config(Some(&dataset), cfg.config.as_deref(), &cfg.overrides)?;
            match cmd_slam(&dataset, &c, models.as_deref(), &out)? {
                Some(report) => print!("{}", report.table()),
                None => println!("no ground truth; results written to {}", out.display()),
            }
        }
        Command::Eval { results, gt } => {
            let report = cmd_eval(&results, &gt)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
