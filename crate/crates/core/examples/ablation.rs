//! Sweeps the number of exemplars, proposals and neighbours with all other
//! settings fixed.
//!
//! cargo run --release --example ablation

use std::path::Path;

use zsc::cli::RunConfig;
use zsc::data::generate_synthetic_dataset;
use zsc::pipeline::{ablation_csv, run_ablation, train_all, AblationAxis};

fn main() -> zsc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.conf");
    let cfg = RunConfig::load(Some(&conf), &[], None)?.pipeline;
    let bundle = generate_synthetic_dataset(&cfg.data)?;
    let (models, _) = train_all(&bundle, &cfg)?;
    for axis in [AblationAxis::NumExemplars, AblationAxis::NumProposals, AblationAxis::KNeighbors] {
        let rows = run_ablation(&models, &cfg, &bundle.val, axis, &axis.default_values())?;
        println!("{}", ablation_csv(axis, &rows));
    }
    Ok(())
}
