mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gmm_surfels::config::{ConfigError, PipelineConfig};

use stages::StageError;

/// LiDAR-visual surface reconstruction with GMM-initialized Gaussian surfels.
#[derive(Debug, Parser)]
#[command(name = "gmm-surfels", version)]
struct Cli {
    /// Flat `key = value` config file; missing keys use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set train.iterations=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random choice in every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset directory (`data_dir`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory (`out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, env = "LIGS_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the data directory.
    GenScene,
    /// Project the cloud into every view and sample colours.
    Colorize,
    /// Build the GMM map from the colorized frames.
    GmmBuild,
    /// Initialize surfels from the map or from random points.
    InitSurfels,
    /// Optimize the surfels.
    Train,
    /// Render colour, normal and depth for every view.
    Render,
    /// Sample oriented points from the surfels and remove floaters.
    FilterSamples,
    /// Compare filtered samples with the reference surface.
    EvalMesh,
    /// PSNR and SSIM on the train and test views.
    EvalNvs,
    /// Run every stage in order.
    Pipeline,
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, StageError> {
    let mut c = match &cli.config {
        Some(path) if !path.exists() => return Err(StageError::MissingInput(path.clone())),
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.overrides {
        c.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(d) = &cli.data {
        c.data_dir = d.clone();
    }
    if let Some(o) = &cli.out {
        c.out_dir = o.clone();
    }
    c.validate().map_err(StageError::Invalid)?;
    Ok(c)
}

fn run(cli: &Cli) -> Result<(), StageError> {
    let c = load_config(cli)?;
    match cli.command {
        Command::GenScene => stages::gen_scene(&c),
        Command::Colorize => stages::colorize(&c),
        Command::GmmBuild => stages::gmm_build(&c),
        Command::InitSurfels => stages::init_surfels(&c),
        Command::Train => stages::train_stage(&c),
        Command::Render => stages::render_stage(&c),
        Command::FilterSamples => stages::filter_stage(&c),
        Command::EvalMesh => stages::eval_mesh(&c).map(|_| ()),
        Command::EvalNvs => stages::eval_nvs(&c),
        Command::Pipeline => stages::pipeline(&c),
        Command::ShowConfig => {
            print!("{}", c.to_text());
            Ok(())
        }
    }
}

fn exit_code(e: &StageError) -> u8 {
    match e {
        StageError::Config(ConfigError::Io { .. }) => 3,
        StageError::Config(_) => 2,
        StageError::MissingInput(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
