//! Writes class heatmaps: exemplar embeddings correlated with a dense grid
//! of patch embeddings, masked below a threshold.
//!
//! cargo run --release --example class_heatmap

use std::path::Path;

use zsc::cli::heatmap::{correlation_grid, emit_class_heatmap};
use zsc::cli::RunConfig;
use zsc::data::generate_synthetic_dataset;
use zsc::embedding::train_embedding_network;

fn main() -> zsc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.conf");
    let cfg = RunConfig::load(Some(&conf), &[], None)?.pipeline;
    let bundle = generate_synthetic_dataset(&cfg.data)?;
    let (net, _) = train_embedding_network(&bundle.train, &bundle.classes.train, &cfg.embedding)?;
    for r in bundle.val.iter().take(3) {
        let ex = &r.gt_boxes[..r.gt_boxes.len().min(3)];
        let grid = correlation_grid(&r.pixels, ex, &net)?;
        let path = format!("heatmap_{}.png", r.id);
        let heat = emit_class_heatmap(&r.pixels, ex, &net, cfg.heatmap_threshold, Path::new(&path))?;
        let kept = heat.keep.iter().filter(|&&k| k).count();
        println!("{path}: {:?} cells, {kept} above {}", grid.dim(), cfg.heatmap_threshold);
    }
    Ok(())
}
