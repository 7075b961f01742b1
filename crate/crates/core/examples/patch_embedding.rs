//! Trains the patch embedding network and the hashed semantic provider that
//! stand in for pretrained image and text encoders.
//!
//! cargo run --release --example patch_embedding

use std::path::Path;

use zsc::cli::RunConfig;
use zsc::data::generate_synthetic_dataset;
use zsc::embedding::{crop_accuracy, embed_patch, train_embedding_network};

fn main() -> zsc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.conf");
    let cfg = RunConfig::load(Some(&conf), &[], None)?.pipeline;
    let bundle = generate_synthetic_dataset(&cfg.data)?;
    let (net, log) = train_embedding_network(&bundle.train, &bundle.classes.train, &cfg.embedding)?;
    let last = log.last().expect("at least one epoch");
    println!("final epoch: {last:?}");
    println!("train crop accuracy {:.3}", crop_accuracy(&net, &bundle.train)?);

    let r = &bundle.train[0];
    let e = embed_patch(&net, &r.pixels, &r.gt_boxes[0])?;
    println!("embedding of one {} instance: dim {}, norm {:.3}", r.class_name, e.len(), e.dot(&e).sqrt());

    let provider = cfg.semantic_provider()?;
    let names = [&bundle.classes.train[0], &bundle.classes.train[1], &bundle.classes.val[0]];
    let vecs: Vec<_> = names.iter().map(|n| provider.embed(n)).collect::<zsc::Result<_>>()?;
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            println!("cos({}, {}) = {:.3}", names[i], names[j], vecs[i].vector.dot(&vecs[j].vector));
        }
    }
    Ok(())
}
