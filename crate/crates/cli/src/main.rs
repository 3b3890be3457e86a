use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tnt::{Error, Result};
use tnt_cli::commands::{self, Method};
use tnt_cli::config::{RunConfig, Scale, RUN_CONFIG_SCHEMA};
use tnt_cli::io::Axis;

/// Sparse-view cone-beam CT reconstruction on synthetic phantoms.
#[derive(Parser)]
#[command(name = "tnt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Defaults to the selected scale preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the phantom, foreign-body and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Bit-reproducible execution (also drops wall-clock fields).
    #[arg(long)]
    deterministic: bool,
    /// Desk-scale preset (default).
    #[arg(long, conflicts_with_all = ["full_scale", "config"])]
    desk_scale: bool,
    /// Full-scale preset.
    #[arg(long, conflicts_with = "config")]
    full_scale: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if self.full_scale => RunConfig::preset(Scale::Full),
            None => RunConfig::preset(Scale::Desk),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        cfg.deterministic |= self.deterministic;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the ground-truth phantom and its tissue masks.
    Phantom(Common),
    /// Simulate log-domain projections of a volume.
    Project {
        #[command(flatten)]
        common: Common,
        /// Volume to project.
        #[arg(long)]
        volume: PathBuf,
        /// Alpha and beta masks to project as tissue targets.
        #[arg(long, num_args = 2, value_names = ["ALPHA", "BETA"])]
        masks: Option<Vec<PathBuf>>,
        /// Number of views (defaults to the configured trajectory).
        #[arg(long)]
        views: Option<usize>,
    },
    /// Reconstruct with one method.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        views: Option<usize>,
        /// Ground-truth volume; generated from the configuration when absent.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Score a reconstruction against ground truth.
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Report file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "recon")]
        label: String,
        #[arg(long, default_value_t = 0)]
        views: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        data_range: f64,
    },
    /// Export one slice as a 16-bit PGM.
    Slice {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        index: usize,
        /// Image file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        window_low: f64,
        #[arg(long, default_value_t = 1.0)]
        window_high: f64,
    },
    /// Run the method x view-count comparison grid.
    Matrix {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "10,15,20,30,40,60")]
        views: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "tnt,mlp,sart,fdk")]
        methods: Vec<Method>,
        /// Seeds to average over (defaults to the run seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Print the run-configuration schema, or the default configuration.
    Schema {
        /// Print the resolved desk-scale configuration instead.
        #[arg(long)]
        defaults: bool,
        #[arg(long)]
        full_scale: bool,
    },
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn paths(v: &[PathBuf]) -> Vec<String> {
    v.iter().map(|p| p.display().to_string()).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(c) => {
            let cfg = c.resolve()?;
            print_json(&paths(&commands::cmd_phantom(&cfg, &c.out)?))
        }
        Command::Project {
            common,
            volume,
            masks,
            views,
        } => {
            let cfg = common.resolve()?;
            let masks = masks.as_deref().map(|m| (m[0].as_path(), m[1].as_path()));
            let views = views.unwrap_or(cfg.trajectory.n_views);
            print_json(&paths(&commands::cmd_project(&cfg, &volume, masks, views, &common.out)?))
        }
        Command::Reconstruct {
            common,
            method,
            views,
            truth,
        } => {
            let cfg = common.resolve()?;
            let views = views.unwrap_or(cfg.trajectory.n_views);
            print_json(&commands::cmd_reconstruct(&cfg, method, views, truth.as_deref(), &common.out)?)
        }
        Command::Eval {
            recon,
            truth,
            out,
            label,
            views,
            seed,
            data_range,
        } => print_json(&commands::cmd_eval(&recon, &truth, &label, views, seed, data_range, &out)?),
        Command::Slice {
            volume,
            axis,
            index,
            out,
            window_low,
            window_high,
        } => print_json(&commands::cmd_slice(&volume, axis, index, (window_low, window_high), &out)?),
        Command::Matrix {
            common,
            views,
            methods,
            seeds,
        } => {
            let cfg = common.resolve()?;
            let seeds = seeds.unwrap_or_else(|| vec![cfg.train.seed]);
            let m = commands::cmd_matrix(&cfg, &views, &methods, &seeds, &common.out)?;
            print!("{}", m.to_markdown());
            Ok(())
        }
        Command::Schema { defaults, full_scale } => {
            if defaults {
                let scale = if full_scale { Scale::Full } else { Scale::Desk };
                print_json(&RunConfig::preset(scale))
            } else {
                print!("{RUN_CONFIG_SCHEMA}");
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let rec = ErrorRecord {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&rec).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", e.kind())));
            ExitCode::from(match e {
                Error::InvalidArgument(_) | Error::Json(_) | Error::Format(_) => 2,
                _ => 1,
            })
        }
    }
}
