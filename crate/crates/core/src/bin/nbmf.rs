use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nbmf::cli::presets::{preset, Scale};
use nbmf::cli::{self, Experiment, ExperimentConfig, Scenario};
use nbmf::{Error, Result};

#[derive(Parser)]
#[command(name = "nbmf", version, about = "Spectral CT material decomposition with neural fields")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "NBMF_THREADS")]
    threads: Option<usize>,

    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(short, long)]
    config: PathBuf,

    /// Override the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,

    /// Override the training epoch count.
    #[arg(long)]
    epochs: Option<usize>,

    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Reduce gradients in a fixed order so runs are bit-reproducible.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate sinograms (and noisy copies) plus the ground-truth image.
    Simulate(ConfigArgs),
    /// Train a field on previously simulated sinograms.
    Train(ConfigArgs),
    /// Sample a trained field on an n x n grid.
    Extract {
        #[arg(short = 'k', long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        n: usize,
        /// Output directory (default: recon_<n> next to the model directory).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Comma-separated material names.
        #[arg(long, value_delimiter = ',')]
        names: Option<Vec<String>>,
        /// Rows to write profiles for.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
    },
    /// Compare a reconstruction with ground truth.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
        /// Bilinearly resample the ground truth to the reconstruction size.
        #[arg(long)]
        resample: bool,
        /// Output directory (default: the reconstruction directory).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Simulate, train, extract and evaluate in one go.
    RunAll(ConfigArgs),
    /// Write a built-in configuration.
    Preset {
        #[arg(long, value_enum)]
        scale: Scale,
        #[arg(long, value_parser = parse_scenario)]
        scenario: Scenario,
        /// Output directory recorded in the configuration, relative to it.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Destination file (default: stdout).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    Scenario::ALL
        .into_iter()
        .find(|sc| sc.name() == s || sc.name().replace('_', "-") == s)
        .ok_or_else(|| format!("unknown scenario {s:?}"))
}

fn load(args: &ConfigArgs) -> Result<Experiment> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if args.deterministic {
        cfg.train.deterministic = true;
    }
    cfg.build()
}

fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|m| format!("m{m}")).collect()
}

/// Material names from the run's frozen config, when the checkpoint sits in a run directory.
fn names_near(checkpoint: &Path) -> Option<Vec<String>> {
    let run = checkpoint.parent()?.parent()?;
    let cfg = ExperimentConfig::load(&run.join("config.resolved.json")).ok()?;
    cfg.build().ok().map(|e| e.material_names)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let exp = load(&args)?;
            let sim = cli::cmd_simulate(&exp)?;
            println!(
                "wrote {} sinogram(s) to {}{}",
                sim.clean.n_spectra(),
                exp.config.output_dir.display(),
                if sim.noisy.is_some() { " (with noisy copies)" } else { "" }
            );
        }
        Command::Train(args) => {
            let exp = load(&args)?;
            let (_, s) = cli::cmd_train(&exp)?;
            println!(
                "{} epochs, loss {:.4e} -> {:.4e}, {:.1} s",
                s.epochs,
                s.initial_loss.unwrap_or(f64::NAN),
                s.final_loss.unwrap_or(f64::NAN),
                s.wall_seconds
            );
        }
        Command::Extract { checkpoint, n, out, names, rows } => {
            let field: nbmf::field::NeuralField<f64> = nbmf::field::load_checkpoint(&checkpoint, None)?;
            let names = names
                .or_else(|| names_near(&checkpoint))
                .unwrap_or_else(|| default_names(field.n_materials()));
            let out = out.unwrap_or_else(|| {
                let model = checkpoint.parent().unwrap_or(Path::new("."));
                model.parent().unwrap_or(Path::new(".")).join(format!("recon_{n}"))
            });
            cli::extract_to_dir(&field, n, &names, &rows, &out)?;
            println!("wrote {n} x {n} images to {}", out.display());
        }
        Command::Evaluate { recon, truth, rows, resample, out } => {
            let out = out.unwrap_or_else(|| if recon.is_dir() { recon.clone() } else { recon.parent().unwrap_or(Path::new(".")).to_path_buf() });
            let report = cli::cmd_evaluate(&recon, &truth, &rows, resample, &out)?;
            print!("{report}");
        }
        Command::RunAll(args) => {
            let exp = load(&args)?;
            let summary = cli::cmd_run_all(&exp)?;
            for r in &summary.reports {
                print!("{r}");
            }
        }
        Command::Preset { scale, scenario, output_dir, out } => {
            let dir = output_dir.unwrap_or_else(|| PathBuf::from(format!("runs/{}/{}", scale.name(), scenario.name())));
            let text = serde_json::to_string_pretty(&preset(scale, scenario, dir))? + "\n";
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
