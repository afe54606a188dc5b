use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};

use spad_deglare::app;
use spad_deglare::io::{self, config::KEYS, RunConfig};
use spad_deglare::pileup::{linear_grid, log_grid};
use spad_deglare::synth::{synthetic_atlas, SyntheticAtlasParams};
use spad_deglare::Result;

/// Every configuration key doubles as a `--key value` flag.
#[derive(Debug, Default, Clone)]
struct Overrides(Vec<(&'static str, String)>);

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut out = Vec::new();
        for (key, _) in KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                out.push((*key, v.clone()));
            }
        }
        Ok(Overrides(out))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: Command) -> Command {
        KEYS.iter().fold(cmd, |cmd, (key, help)| {
            cmd.arg(
                Arg::new(*key)
                    .long(*key)
                    .value_name("VALUE")
                    .help(*help)
                    .global(true)
                    .help_heading("Configuration"),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

#[derive(Parser)]
#[command(
    version,
    about = "Glare and pileup mitigation for single-photon LiDAR histograms"
)]
struct Cli {
    /// Configuration file; settings given as flags take precedence.
    #[arg(long, env = "SPAD_DEGLARE_CONFIG", global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a scene file into a histogram cube.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the true depth map.
        #[arg(long)]
        truth_out: Option<PathBuf>,
    },
    /// Build a glare atlas from cubes recorded with one pixel lit each.
    CalibrateGsf {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        cubes: Vec<PathBuf>,
    },
    /// Write a synthetic glare atlas for simulation studies.
    SyntheticAtlas {
        #[arg(long)]
        out: PathBuf,
        /// Source positions per side.
        #[arg(long, default_value_t = 7)]
        grid: usize,
        #[arg(long, default_value_t = 0.03)]
        outscatter: f64,
        /// Decay length of the spread in pixels.
        #[arg(long, default_value_t = 80.0)]
        falloff: f64,
    },
    /// Tabulate the pileup forward model.
    BuildLuts {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_alpha: usize,
        #[arg(long, default_value_t = 1e-3)]
        alpha_min: f64,
        #[arg(long, default_value_t = 100.0)]
        alpha_max: f64,
        #[arg(long, default_value_t = 32)]
        n_beta: usize,
        #[arg(long, default_value_t = 10.0)]
        beta_max: f64,
    },
    /// Estimate depth with glare and pileup mitigation. Several cubes are summed.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        cubes: Vec<PathBuf>,
    },
    /// Estimate depth after per-slice photographic glare removal.
    Baseline {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        cubes: Vec<PathBuf>,
    },
    /// Compare a depth map against the configured truth map.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Uncorrected map used for the ghost count before correction.
        #[arg(long)]
        before: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in &cli.overrides.0 {
        cfg.set(k, v, None)?;
    }
    Ok(cfg)
}

fn read_depth(p: &Path) -> Result<spad_deglare::deglare::DepthMap> {
    io::decode_depth(&io::read_file(p)?)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    match &cli.command {
        Cmd::Simulate {
            scene,
            out,
            truth_out,
        } => {
            let cube = app::simulate(&cfg, scene, out, truth_out.as_deref())?;
            log::info!(
                "wrote {}x{}x{} cube, {} pulses",
                cube.rows,
                cube.cols,
                cube.bins,
                cube.pulses
            );
        }
        Cmd::CalibrateGsf { out, cubes } => {
            let atlas = app::calibrate_gsf(&cfg, cubes)?;
            io::write_file(out, &io::encode_atlas(&atlas)?)?;
        }
        Cmd::SyntheticAtlas {
            out,
            grid,
            outscatter,
            falloff,
        } => {
            let p = SyntheticAtlasParams {
                grid: *grid,
                outscatter: *outscatter,
                falloff: *falloff,
                seed: cfg.seed,
                ..SyntheticAtlasParams::default()
            };
            let atlas = synthetic_atlas(cfg.sensor.rows, cfg.sensor.cols, &p)?;
            io::write_file(out, &io::encode_atlas(&atlas)?)?;
        }
        Cmd::BuildLuts {
            out,
            n_alpha,
            alpha_min,
            alpha_max,
            n_beta,
            beta_max,
        } => {
            let alpha = log_grid(*alpha_min, *alpha_max, *n_alpha);
            let beta = linear_grid(0.0, *beta_max, *n_beta);
            let luts = app::build_tables(&cfg, &alpha, &beta)?;
            io::write_file(out, &io::encode_luts(&luts)?)?;
        }
        Cmd::Pipeline { out, cubes } => {
            let res = app::run_pipeline_with(cubes, &cfg, Some(out))?;
            if let Some(r) = &res.report {
                print!("{}", r.to_text());
            }
        }
        Cmd::Baseline { out, cubes } => {
            let (map, _) = app::run_baseline(cubes, &cfg, Some(out))?;
            if let Some(p) = &cfg.truth {
                print!(
                    "{}",
                    app::evaluate_with(&cfg, &read_depth(p)?, &map, None)?.to_text()
                );
            }
        }
        Cmd::Eval { pred, before, csv } => {
            let truth_path = cfg
                .truth
                .as_deref()
                .ok_or_else(|| spad_deglare::Error::Config("`truth` must be set".into()))?;
            let truth = read_depth(truth_path)?;
            let before = before.as_deref().map(read_depth).transpose()?;
            let report = app::evaluate_with(&cfg, &truth, &read_depth(pred)?, before.as_ref())?;
            if *csv {
                println!("{}\n{}", report.csv_header(), report.csv_row());
            } else {
                print!("{}", report.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
