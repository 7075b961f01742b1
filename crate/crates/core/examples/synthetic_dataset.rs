//! Generates a synthetic counting dataset, writes it to disk and reads it back.
//!
//! cargo run --example synthetic_dataset -- [out_dir]

use zsc::data::{export_bundle, generate_synthetic_dataset, load_dataset, SyntheticSpec};

fn main() -> zsc::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_dataset".into());
    let spec = SyntheticSpec {
        images_per_split: (24, 8, 8),
        ..SyntheticSpec::default()
    };
    let bundle = generate_synthetic_dataset(&spec)?;
    println!("train classes: {}", bundle.classes.train.join(", "));
    println!("val classes:   {}", bundle.classes.val.join(", "));
    println!("test classes:  {}", bundle.classes.test.join(", "));

    for r in bundle.val.iter().take(4) {
        let target = r.density_target(2.0)?;
        println!(
            "{}: {} x {}, class {}, {} objects, density sum {:.4}, {} distractors",
            r.id,
            r.height(),
            r.width(),
            r.class_name,
            r.count(),
            target.sum(),
            r.instances.len() - r.count()
        );
    }

    export_bundle(&bundle, std::path::Path::new(&out))?;
    let back = load_dataset(std::path::Path::new(&out))?;
    println!("wrote {} images to {out}; reload identical: {}", bundle.len(), back == bundle);
    Ok(())
}
