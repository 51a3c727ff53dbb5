use clap::{Args, Parser, Subcommand};
use gsmap_cli::commands::{self, METRICS_FILE};
use gsmap_cli::scenario::{write_scenario, Scenario, DEFAULT_SEED};
use gsmap_cli::{CliError, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

/// Ground-marker mapping and localization on simulated parking lots.
///
/// Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.
#[derive(Parser)]
#[command(name = "gsmap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for all randomness; overrides `pipeline.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted config key assignment, e.g. `pipeline.noise.bias_rot=0.002`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf), CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.pipeline.seed = seed;
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a map from a simulated drive.
    Map(RunArgs),
    /// Localize a drive against a map and update the map.
    Localize {
        #[command(flatten)]
        run: RunArgs,
        /// Prior map file.
        #[arg(long)]
        map: PathBuf,
    },
    /// Compare an estimated trajectory with ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        est: PathBuf,
        /// Also write the statistics as metrics.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a map and trajectories as SVG.
    Render {
        #[arg(long)]
        map: PathBuf,
        /// Trajectory file to overlay. Repeatable.
        #[arg(long = "traj")]
        trajectories: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write a scene, trajectory and config for a named scenario.
    GenScene {
        #[arg(long, value_enum)]
        scenario: Scenario,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Map(args) => {
            let (cfg, out) = args.load()?;
            let m = commands::cmd_map(&cfg, &out)?;
            println!(
                "mapped: rmse {:.2} cm, {} loop closures, map {} B, raw cloud {} B -> {}",
                m.rmse_m * 100.0,
                m.loop_closures,
                m.map_bytes,
                m.raw_cloud_bytes,
                out.display()
            );
        }
        Command::Localize { run, map } => {
            let (cfg, out) = run.load()?;
            let m = commands::cmd_localize(&cfg, &map, &out)?;
            println!(
                "localized: rmse {:.2} cm, validity {:.3} -> {}",
                m.rmse_m * 100.0,
                m.validity_fraction.unwrap_or(0.0),
                out.display()
            );
        }
        Command::Eval { gt, est, out } => {
            let stats = commands::cmd_eval(&gt, &est)?;
            print!("{}", commands::stats_table(&stats));
            let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
            println!("{json}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)
                    .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
                let path = dir.join(METRICS_FILE);
                std::fs::write(&path, json + "\n")
                    .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            }
        }
        Command::Render {
            map,
            trajectories,
            out,
        } => {
            let path = commands::cmd_render(&map, &trajectories, &out)?;
            println!("{}", path.display());
        }
        Command::GenScene {
            scenario,
            out,
            seed,
        } => {
            write_scenario(scenario, seed, &out)?;
            println!("{}", out.display());
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
