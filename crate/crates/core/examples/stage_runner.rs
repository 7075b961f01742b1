//! Runs every `zsc` stage in-process on the tiny configuration, the same
//! sequence as the command line:
//!
//! zsc synth-data --config configs/mini.conf
//! zsc train-embed --config configs/mini.conf
//! ...
//!
//! cargo run --example stage_runner -- [run_dir]

use std::path::Path;

use zsc::cli::{run_stage, RunConfig, Stage, StageOptions};

fn main() -> zsc::Result<()> {
    let root = std::env::args().nth(1).unwrap_or_else(|| "runs/mini".into());
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/mini.conf");
    let cfg = RunConfig::load(Some(&conf), &[("run.dir".into(), root.clone())], None)?;
    let opts = StageOptions {
        overwrite: true,
        ..StageOptions::default()
    };
    for stage in [
        Stage::SynthData,
        Stage::TrainEmbed,
        Stage::TrainCounter,
        Stage::TrainVae,
        Stage::TrainPredictor,
        Stage::Eval,
    ] {
        let out = run_stage(stage, &cfg, &opts)?;
        println!("{stage}: {} ({:.1}s)", out.dir.display(), out.manifest.duration_secs);
        for line in out.lines {
            println!("  {line}");
        }
    }
    let image = Path::new(&root).join("synth-data/dataset/images/val_0000.png");
    let infer = StageOptions {
        image: Some(image),
        class_name: Some("blue-solid-disc".into()),
        ..opts
    };
    let out = run_stage(Stage::Infer, &cfg, &infer)?;
    println!("infer: {}", out.lines.join(" "));
    Ok(())
}
