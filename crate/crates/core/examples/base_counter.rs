//! Trains the exemplar-based counter and counts validation images with
//! their annotated exemplar boxes.
//!
//! cargo run --release --example base_counter

use std::path::Path;

use zsc::cli::RunConfig;
use zsc::counter::{count, extract_features, exemplar_vector, predict_density, similarity_map, train_base_model};
use zsc::data::{generate_synthetic_dataset, io::write_density_png};

fn main() -> zsc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.conf");
    let cfg = RunConfig::load(Some(&conf), &[], None)?.pipeline;
    let bundle = generate_synthetic_dataset(&cfg.data)?;
    let (model, log) = train_base_model(&bundle.train, &cfg.counter)?;
    println!("train loss {:.4} -> {:.4}", log.initial_loss, log.final_loss);

    // the same steps count_with_exemplars runs internally
    let mut abs = 0.0;
    for r in &bundle.val {
        let feats = extract_features(&model, &r.pixels);
        let exemplars = r.gt_boxes[..3.min(r.gt_boxes.len())]
            .iter()
            .map(|b| exemplar_vector(&model, &r.pixels, b))
            .collect::<zsc::Result<Vec<_>>>()?;
        let sim = similarity_map(&feats, &exemplars)?;
        let density = predict_density(&model, &feats, &sim)?;
        let c = count(&density);
        abs += (c - r.count() as f64).abs();
        println!("{} ({}): predicted {c:.2}, actual {}", r.id, r.class_name, r.count());
    }
    println!("val MAE with 3 gt exemplars: {:.3}", abs / bundle.val.len() as f64);

    let r = &bundle.val[0];
    let density = model.count_with_exemplars(&r.pixels, &r.gt_boxes[..1])?;
    write_density_png(&density, Path::new("base_counter_density.png"))?;
    println!("wrote base_counter_density.png for {}", r.id);
    Ok(())
}
