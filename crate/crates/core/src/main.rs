use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use feeddrive::harness::{self, RunConfig};
use feeddrive::{Error, Result};

#[derive(Parser)]
#[command(name = "feeddrive", version, about = "Vibration-aware feed-drive positioning: simulation, input shaping and PPO training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; unspecified keys keep their defaults
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. --set ppo.total_steps=50000
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; writes metrics, traces and checkpoints into the run directory
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory (overrides run.output_dir)
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Print one progress line per update
        #[arg(long, short)]
        verbose: bool,
    },
    /// Deterministic evaluation of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config.toml archived next to the checkpoint's run, if any
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        /// Directory for eval.csv and summary.json
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Compare unshaped, ZV and ZVD commands on a point-to-point move
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Open-loop simulation of a velocity command file (one command per line)
    Simulate {
        #[arg(long)]
        commands: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trace CSV path; stdout when omitted
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration as TOML
    DefaultConfig,
}

fn load(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(args.config.as_deref(), &args.overrides)
}

/// Look for `<run>/config.toml` when the checkpoint sits in `<run>/` or `<run>/checkpoints/`.
fn archived_config(checkpoint: &Path) -> Option<PathBuf> {
    let dir = checkpoint.parent()?;
    [dir.join("config.toml"), dir.parent()?.join("config.toml")]
        .into_iter()
        .find(|p| p.is_file())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out, verbose } => {
            let mut cfg = load(&cfg)?;
            if let Some(out) = out {
                cfg.run.output_dir = out;
            }
            let dir = harness::cmd_train(&cfg, |m| {
                if verbose {
                    eprintln!(
                        "step {:>8}  mean_return {:>9}  entropy {:.4}  kl {:.5}  clip {:.3}",
                        m.step,
                        m.mean_episode_reward.map_or("-".into(), |r| format!("{r:.2}")),
                        m.update.entropy,
                        m.update.approx_kl,
                        m.update.clip_fraction
                    );
                }
            })?;
            println!("run written to {}", dir.display());
        }
        Command::Eval {
            checkpoint,
            cfg,
            episodes,
            out,
        } => {
            let config_path = cfg.config.clone().or_else(|| archived_config(&checkpoint));
            let rc = RunConfig::load(config_path.as_deref(), &cfg.overrides)?;
            let out = out.unwrap_or_else(|| checkpoint.with_extension("eval"));
            let report = harness::cmd_eval(&checkpoint, &rc, episodes, &out)?;
            let s = &report.summary;
            println!("episodes                      {}", s.episodes);
            println!("mean return                   {:.2}", s.mean_return);
            println!("mean final position error     {:.4} mm", s.mean_final_position_error);
            println!("mean residual envelope        {:.3e} mm", s.mean_residual_envelope);
            println!("mean in-band fraction (tail)  {:.3}", s.mean_in_band_fraction_tail);
            println!("episodes >=60% tail in band   {:.3}", s.fraction_episodes_tail_in_band);
            println!("written to {}", out.display());
        }
        Command::Baseline { cfg, out } => {
            let rc = load(&cfg)?;
            let rows = harness::cmd_baseline(&rc)?;
            println!(
                "{:<6} {:>14} {:>18} {:>14} {:>16}",
                "scheme", "design_omega", "residual_envelope", "move_duration", "trajectory_loss"
            );
            for r in &rows {
                println!(
                    "{:<6} {:>14.4} {:>18.4e} {:>14.3} {:>16.4e}",
                    r.scheme.name(),
                    r.design_omega,
                    r.residual_envelope,
                    r.move_duration,
                    r.trajectory_loss
                );
            }
            if let Some(out) = out {
                harness::write_baseline(&out, &rc, &rows)?;
                println!("written to {}", out.display());
            }
        }
        Command::Simulate { commands, cfg, out } => {
            let rc = load(&cfg)?;
            let csv = harness::cmd_simulate(&rc, &commands)?;
            match out {
                Some(path) => write(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().resolved()?.to_toml_string()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
