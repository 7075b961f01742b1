//! Trains every model, then counts objects in unseen-class images given only
//! the class name.
//!
//! cargo run --release --example zero_shot_count

use std::path::Path;

use zsc::cli::RunConfig;
use zsc::data::generate_synthetic_dataset;
use zsc::pipeline::train_all;
use zsc::selector::count_zero_shot;

fn main() -> zsc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.conf");
    let cfg = RunConfig::load(Some(&conf), &[], None)?.pipeline;
    let bundle = generate_synthetic_dataset(&cfg.data)?;
    let (models, _) = train_all(&bundle, &cfg)?;

    let mut abs = 0.0;
    for r in &bundle.val {
        let (count, sel) = count_zero_shot(&r.pixels, &r.class_name, &models.zero_shot, &cfg.selector)?;
        abs += (count - r.count() as f64).abs();
        let boxes: Vec<String> = sel
            .exemplar_boxes()
            .iter()
            .map(|b| format!("[{},{},{},{}]", b.x1, b.y1, b.x2, b.y2))
            .collect();
        println!(
            "{} \"{}\": count {count:.2} (actual {}), exemplars {}",
            r.id,
            r.class_name,
            r.count(),
            boxes.join(" ")
        );
    }
    println!("zero-shot val MAE {:.3}", abs / bundle.val.len() as f64);
    Ok(())
}
