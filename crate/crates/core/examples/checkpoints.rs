//! Saves a trained counter to the checkpoint container and restores it.

use std::path::Path;

use zsc::cli::{Checkpoint, RunConfig};
use zsc::counter::{train_base_model, BaseCountingModel};
use zsc::data::generate_synthetic_dataset;
use zsc::seeding::rng_for;

fn main() -> zsc::Result<()> {
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/mini.conf");
    let run = RunConfig::load(Some(&conf), &[], None)?;
    let cfg = &run.pipeline;
    let bundle = generate_synthetic_dataset(&cfg.data)?;
    let (model, _) = train_base_model(&bundle.train, &cfg.counter)?;

    let hash = zsc::cli::module_hash(&run, "counter");
    let ck = Checkpoint::from_model(&model, "counter", &hash, cfg.counter.seed, serde_json::json!({}));
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("counter.ckpt");
    ck.save(&path)?;
    println!("{} tensors, {} bytes", ck.header.tensors.len(), std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));

    let loaded = Checkpoint::load(&path)?;
    loaded.check("counter", &hash, false)?;
    let mut restored = BaseCountingModel::new(&cfg.counter, &mut rng_for(1, "fresh"));
    loaded.load_into(&mut restored)?;
    let r = &bundle.val[0];
    let a = model.count_with_exemplars(&r.pixels, &r.gt_boxes[..1])?.sum();
    let b = restored.count_with_exemplars(&r.pixels, &r.gt_boxes[..1])?.sum();
    println!("count before {a} after {b}; identical: {}", a.to_bits() == b.to_bits());

    // a checkpoint trained under another counter config is refused
    let other = RunConfig::load(Some(&conf), &[("counter.lr".into(), "0.01".into())], None)?;
    match loaded.check("counter", &zsc::cli::module_hash(&other, "counter"), false) {
        Err(e) => println!("refused: {e}"),
        Ok(()) => println!("unexpectedly accepted"),
    }
    Ok(())
}
