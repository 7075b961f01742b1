//! Trains the error predictor on single-exemplar counting errors and checks
//! how well it ranks held-out patches.
//!
//! cargo run --release --example error_predictor

use std::path::Path;

use zsc::cli::RunConfig;
use zsc::counter::extract_features;
use zsc::data::generate_synthetic_dataset;
use zsc::selector::{error_samples, predict_patch_error, spearman, to_raw_error, train_error_predictor};
use zsc::counter::train_base_model;

fn main() -> zsc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.conf");
    let cfg = RunConfig::load(Some(&conf), &[], None)?.pipeline;
    let bundle = generate_synthetic_dataset(&cfg.data)?;
    let (base, _) = train_base_model(&bundle.train, &cfg.counter)?;
    let (predictor, log) = train_error_predictor(&base, &bundle.train, &cfg.predictor)?;
    println!("predictor MSE per epoch: {:?}", log.epoch_mse.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>());

    let p = &cfg.predictor;
    let (feats, samples) = error_samples(&base, &bundle.val, 20, p.size_range, p.target, 77)?;
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    for s in &samples {
        let raw = predict_patch_error(&predictor, &feats[s.image], &s.simmap)?;
        predicted.push(to_raw_error(p.target, raw, s.gt_count));
        actual.push((s.predicted_count - s.gt_count).abs());
    }
    println!("{} held-out patches, Spearman {:.3}", samples.len(), spearman(&predicted, &actual)?);

    let r = &bundle.val[0];
    let f = extract_features(&base, &r.pixels);
    println!("feature map of {}: {} channels, {:?} cells", r.id, f.channels(), f.spatial());
    Ok(())
}
