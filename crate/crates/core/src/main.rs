use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use zsc::cli::config::parse_override;
use zsc::cli::{run_stage, RunConfig, Stage, StageOptions};
use zsc::pipeline::AblationAxis;

/// Zero-shot object counting pipeline.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Args {
    /// synth-data, train-embed, train-counter, train-vae, train-predictor,
    /// infer, eval or ablate
    stage: Stage,
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. --set selector.k=10
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Global seed; every module seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the canonical stage directory instead of writing a new one.
    #[arg(long)]
    overwrite: bool,
    /// Load checkpoints even if they were trained under another config.
    #[arg(long)]
    force: bool,
    /// Image to count in (infer).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Class name to count (infer).
    #[arg(long = "class")]
    class_name: Option<String>,
    /// num_exemplars, num_proposals or k_neighbors (ablate).
    #[arg(long)]
    axis: Option<AblationAxis>,
    /// Comma-separated axis values (ablate).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<usize>>,
}

fn run(args: Args) -> zsc::Result<()> {
    let overrides = args
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<zsc::Result<Vec<_>>>()?;
    let cfg = RunConfig::load(args.config.as_deref(), &overrides, args.seed)?;
    let opts = StageOptions {
        overwrite: args.overwrite,
        force: args.force,
        image: args.image,
        class_name: args.class_name,
        axis: args.axis,
        values: args.values,
    };
    let outcome = run_stage(args.stage, &cfg, &opts)?;
    for line in &outcome.lines {
        println!("{line}");
    }
    log::info!("{} done in {:.1}s: {}", args.stage, outcome.manifest.duration_secs, outcome.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
