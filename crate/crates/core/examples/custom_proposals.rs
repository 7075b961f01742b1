//! Feeds externally proposed boxes (for example from an objectness model)
//! into exemplar selection instead of uniform random patches.
//!
//! cargo run --release --example custom_proposals

use std::path::Path;

use zsc::cli::RunConfig;
use zsc::data::generate_synthetic_dataset;
use zsc::pipeline::train_all;
use zsc::selector::{select_exemplars_from, FileProposals, Ranking};

fn main() -> zsc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.conf");
    let cfg = RunConfig::load(Some(&conf), &[], None)?.pipeline;
    let bundle = generate_synthetic_dataset(&cfg.data)?;
    let (models, _) = train_all(&bundle, &cfg)?;

    // boxes around every drawn object, scored by a made-up objectness
    let r = &bundle.val[0];
    let proposals: Vec<serde_json::Value> = r
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| serde_json::json!({ "box": inst.bbox, "score": 1.0 / (1.0 + i as f64) }))
        .collect();
    let doc = serde_json::json!({ r.id.clone(): proposals }).to_string();
    let source = FileProposals::from_json(&doc).expect("valid proposal document");

    let prototype = models.zero_shot.prototype(&r.class_name)?;
    let mut sel = cfg.selector.clone();
    sel.k_neighbors = sel.k_neighbors.min(r.instances.len());
    sel.num_exemplars = sel.num_exemplars.min(sel.k_neighbors);
    for ranking in [Ranking::Predictor, Ranking::PrototypeDistance, Ranking::Objectness] {
        let res = select_exemplars_from(&r.pixels, &r.id, &prototype, &models.zero_shot, &sel, &source, ranking)?;
        let on_target = res
            .exemplar_boxes()
            .iter()
            .filter(|b| zsc::selector::centred_on_target(r, b))
            .count();
        println!(
            "{ranking:?}: count {:.2} (actual {}), {on_target}/{} exemplars on {}",
            res.count,
            r.count(),
            res.exemplar_indices.len(),
            r.class_name
        );
    }
    Ok(())
}
