//! Trains the conditional VAE on patch embeddings of training classes and
//! generates prototypes for unseen classes from their names alone.
//!
//! cargo run --release --example class_prototype

use std::path::Path;

use ndarray::Array1;
use zsc::cli::RunConfig;
use zsc::data::generate_synthetic_dataset;
use zsc::embedding::{embed_patch, train_embedding_network};
use zsc::pipeline::vae_features;
use zsc::prototype::{generate_class_prototype, train_vae};

fn main() -> zsc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.conf");
    let cfg = RunConfig::load(Some(&conf), &[], None)?.pipeline;
    let bundle = generate_synthetic_dataset(&cfg.data)?;
    let (net, _) = train_embedding_network(&bundle.train, &bundle.classes.train, &cfg.embedding)?;
    let provider = cfg.semantic_provider()?;
    let feats = vae_features(&net, &bundle.train, &bundle.classes.train, &provider)?;
    let (vae, losses) = train_vae(&feats, &cfg.vae)?;
    println!("{} training features, loss {:.3} -> {:.3}", feats.len(), losses[0], losses[losses.len() - 1]);

    // real class centres of the unseen val classes, from their instances
    let classes = &bundle.classes.val;
    let centres: Vec<Array1<f64>> = classes
        .iter()
        .map(|c| {
            let mut sum = Array1::zeros(net.embedding_dim());
            let mut n = 0.0;
            for r in bundle.val.iter().filter(|r| &r.class_name == c) {
                for b in &r.gt_boxes {
                    sum += &embed_patch(&net, &r.pixels, b).expect("box inside image");
                    n += 1.0;
                }
            }
            sum / n
        })
        .collect();
    for c in classes {
        let p = generate_class_prototype(&vae, &provider.embed(c)?, cfg.vae.n_samples, cfg.vae.seed)?;
        let d: Vec<String> = classes
            .iter()
            .zip(&centres)
            .map(|(o, m)| format!("{o} {:.2}", (&p.array() - m).mapv(|v| v * v).sum().sqrt()))
            .collect();
        println!("prototype of {c}: distance to class centres: {}", d.join(", "));
    }
    Ok(())
}
