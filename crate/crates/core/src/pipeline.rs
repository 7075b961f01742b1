//! End-to-end training and evaluation on a dataset bundle: every model the
//! zero-shot counter needs, and the five counting modes compared on a split.

use std::collections::BTreeMap;

use log::info;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::counter::{extract_features, train_base_model, BaseCountingModel, CounterConfig, CounterTrainLog};
use crate::data::{BoundingBox, DatasetBundle, ImageRecord, Split, SyntheticSpec};
use crate::embedding::{
    embed_patch, labelled_boxes, train_embedding_network, EmbeddingConfig, EmbeddingNetwork, EpochStats,
    SemanticProvider,
};
use crate::error::{ensure, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::prototype::{generate_class_prototype, train_vae, ClassPrototype, ConditionalVAE, OutputActivation, VaeConfig};
use crate::selector::{
    centred_on_target, count_with_boxes, count_with_prototype_vector, count_with_random_exemplars,
    counting_space_features, embed_candidates, error_samples, predict_patch_error, sample_boxes, select_from_candidates,
    spearman, to_raw_error, train_error_predictor, CandidatePatch, ErrorPredictor, PatchSource, PredictorConfig,
    PredictorTrainLog, ProposalSource, Ranking, SelectorConfig, ZeroShotModels,
};
use crate::seeding::{derive_seed, rng_for};

/// Every tunable of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: SyntheticSpec,
    pub embedding: EmbeddingConfig,
    pub counter: CounterConfig,
    pub vae: VaeConfig,
    /// Feature generator in the counter's exemplar space, for the
    /// prototype-direct baseline.
    pub baseline_vae: VaeConfig,
    pub predictor: PredictorConfig,
    pub selector: SelectorConfig,
    pub semantic_dim: usize,
    pub semantic_seed: u64,
    /// Optional semantic table file; hashed vectors when empty.
    pub semantic_table: String,
    /// Images are resized to this height before use; 0 keeps them as is.
    pub target_height: usize,
    pub heatmap_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: SyntheticSpec::default(),
            embedding: EmbeddingConfig::default(),
            counter: CounterConfig::default(),
            vae: VaeConfig::default(),
            baseline_vae: VaeConfig {
                output: OutputActivation::Identity,
                ..VaeConfig::default()
            },
            predictor: PredictorConfig::default(),
            selector: SelectorConfig::default(),
            semantic_dim: 512,
            semantic_seed: 0,
            semantic_table: String::new(),
            target_height: 0,
            heatmap_threshold: 0.5,
        }
    }
}

impl PipelineConfig {
    /// Derives every module seed from one global seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = derive_seed(seed, "data");
        self.embedding.seed = derive_seed(seed, "embedding");
        self.counter.seed = derive_seed(seed, "counter");
        self.vae.seed = derive_seed(seed, "vae");
        self.baseline_vae.seed = derive_seed(seed, "baseline_vae");
        self.predictor.seed = derive_seed(seed, "predictor");
        self.selector.seed = derive_seed(seed, "selector");
        self.semantic_seed = derive_seed(seed, "semantic");
        self
    }

    pub fn semantic_provider(&self) -> Result<SemanticProvider> {
        if self.semantic_table.is_empty() {
            Ok(SemanticProvider::hashed(self.semantic_dim, self.semantic_seed))
        } else {
            SemanticProvider::from_table_file(std::path::Path::new(&self.semantic_table))
        }
    }
}

/// `(x, a)` pairs for the feature generator: embeddings of every labelled
/// object of `classes` with its class's semantic vector.
pub fn vae_features(
    net: &EmbeddingNetwork,
    records: &[ImageRecord],
    classes: &[String],
    provider: &SemanticProvider,
) -> Result<Vec<(Array1<f64>, Array1<f64>)>> {
    let semantic = classes
        .iter()
        .map(|c| Ok(provider.embed(c)?.vector))
        .collect::<Result<Vec<_>>>()?;
    labelled_boxes(records, classes)
        .into_iter()
        .map(|lb| {
            let x = embed_patch(net, &records[lb.record].pixels, &lb.bbox)?;
            Ok((x, semantic[lb.label].clone()))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub zero_shot: ZeroShotModels,
    pub baseline_vae: ConditionalVAE,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingLogs {
    pub embedding: Vec<EpochStats>,
    pub counter: CounterTrainLog,
    pub vae: Vec<f64>,
    pub baseline_vae: Vec<f64>,
    pub predictor: PredictorTrainLog,
}

pub fn train_embedding(bundle: &DatasetBundle, cfg: &PipelineConfig) -> Result<(EmbeddingNetwork, Vec<EpochStats>)> {
    train_embedding_network(&bundle.train, &bundle.classes.train, &cfg.embedding)
}

pub fn train_counter(bundle: &DatasetBundle, cfg: &PipelineConfig) -> Result<(BaseCountingModel, CounterTrainLog)> {
    train_base_model(&bundle.train, &cfg.counter)
}

pub fn train_feature_vae(
    bundle: &DatasetBundle,
    net: &EmbeddingNetwork,
    cfg: &PipelineConfig,
) -> Result<(ConditionalVAE, Vec<f64>)> {
    let provider = cfg.semantic_provider()?;
    let feats = vae_features(net, &bundle.train, &bundle.classes.train, &provider)?;
    train_vae(&feats, &cfg.vae)
}

pub fn train_baseline_vae(
    bundle: &DatasetBundle,
    base: &BaseCountingModel,
    cfg: &PipelineConfig,
) -> Result<(ConditionalVAE, Vec<f64>)> {
    let provider = cfg.semantic_provider()?;
    let feats = counting_space_features(base, &bundle.train, &bundle.classes.train, &provider)?;
    train_vae(&feats, &cfg.baseline_vae)
}

pub fn train_predictor(
    bundle: &DatasetBundle,
    base: &BaseCountingModel,
    cfg: &PipelineConfig,
) -> Result<(ErrorPredictor, PredictorTrainLog)> {
    train_error_predictor(base, &bundle.train, &cfg.predictor)
}

/// Trains every stage in order.
pub fn train_all(bundle: &DatasetBundle, cfg: &PipelineConfig) -> Result<(TrainedModels, TrainingLogs)> {
    let (embedding, emb_log) = train_embedding(bundle, cfg)?;
    let (base, counter_log) = train_counter(bundle, cfg)?;
    let (vae, vae_log) = train_feature_vae(bundle, &embedding, cfg)?;
    let (baseline_vae, baseline_log) = train_baseline_vae(bundle, &base, cfg)?;
    let (predictor, predictor_log) = train_predictor(bundle, &base, cfg)?;
    let zero_shot = ZeroShotModels {
        embedding,
        vae,
        base,
        predictor,
        semantic: cfg.semantic_provider()?,
        prototype_samples: cfg.vae.n_samples,
        prototype_seed: cfg.vae.seed,
    };
    Ok((
        TrainedModels {
            zero_shot,
            baseline_vae,
        },
        TrainingLogs {
            embedding: emb_log,
            counter: counter_log,
            vae: vae_log,
            baseline_vae: baseline_log,
            predictor: predictor_log,
        },
    ))
}

/// The counting modes compared by `eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    GtExemplar,
    Random,
    PrototypeOnly,
    #[serde(rename = "prototype+predictor")]
    PrototypePredictor,
    PrototypeDirectBaseline,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::GtExemplar,
        Mode::Random,
        Mode::PrototypeOnly,
        Mode::PrototypePredictor,
        Mode::PrototypeDirectBaseline,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::GtExemplar => "gt-exemplar",
            Mode::Random => "random",
            Mode::PrototypeOnly => "prototype-only",
            Mode::PrototypePredictor => "prototype+predictor",
            Mode::PrototypeDirectBaseline => "prototype-direct-baseline",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-image outcome across modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub image_id: String,
    pub gt_count: f64,
    pub counts: BTreeMap<Mode, f64>,
    pub exemplars: BTreeMap<Mode, Vec<BoundingBox>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub reports: BTreeMap<Mode, MetricsReport>,
    pub images: Vec<ImageOutcome>,
}

impl EvalReport {
    pub fn mae(&self, mode: Mode) -> f64 {
        self.reports[&mode].mae
    }
}

/// Prototypes for every class in `classes`.
pub fn class_prototypes(models: &ZeroShotModels, classes: &[String]) -> Result<BTreeMap<String, ClassPrototype>> {
    classes
        .iter()
        .map(|c| Ok((c.clone(), models.prototype(c)?)))
        .collect()
}

fn prefix(cands: &[CandidatePatch], m: usize) -> Vec<CandidatePatch> {
    cands[..m.min(cands.len())].to_vec()
}

/// Evaluation over the records of one split.
pub struct Evaluator<'a> {
    pub models: &'a TrainedModels,
    pub cfg: &'a PipelineConfig,
    pub prototypes: BTreeMap<String, ClassPrototype>,
    pub baseline_prototypes: BTreeMap<String, ClassPrototype>,
}

impl<'a> Evaluator<'a> {
    pub fn new(models: &'a TrainedModels, cfg: &'a PipelineConfig, records: &[ImageRecord]) -> Result<Self> {
        let mut classes: Vec<String> = records.iter().map(|r| r.class_name.clone()).collect();
        classes.sort();
        classes.dedup();
        let zs = &models.zero_shot;
        let baseline_prototypes = classes
            .iter()
            .map(|c| {
                let a = zs.semantic.embed(c)?;
                let p = generate_class_prototype(&models.baseline_vae, &a, cfg.baseline_vae.n_samples, cfg.baseline_vae.seed)?;
                Ok((c.clone(), p))
            })
            .collect::<Result<_>>()?;
        Ok(Evaluator {
            prototypes: class_prototypes(zs, &classes)?,
            models,
            cfg,
            baseline_prototypes,
        })
    }

    /// Embedded random candidates for `record`, `m` of them.
    pub fn candidates(&self, record: &ImageRecord, m: usize) -> Result<Vec<CandidatePatch>> {
        let source = crate::selector::RandomProposals {
            count: m,
            ..self.cfg.selector.proposal_source()
        };
        let proposals = source.proposals(&record.id, record.height(), record.width())?;
        embed_candidates(&self.models.zero_shot.embedding, &record.pixels, &proposals, PatchSource::Random)
    }

    fn select(
        &self,
        record: &ImageRecord,
        cands: Vec<CandidatePatch>,
        sel: &SelectorConfig,
        ranking: Ranking,
    ) -> Result<(f64, Vec<BoundingBox>)> {
        let r = select_from_candidates(
            &record.pixels,
            cands,
            &self.prototypes[&record.class_name],
            &self.models.zero_shot,
            sel,
            ranking,
        )?;
        Ok((r.count, r.exemplar_boxes()))
    }

    /// Counts for every mode on one record.
    pub fn evaluate_record(&self, record: &ImageRecord) -> Result<ImageOutcome> {
        let zs = &self.models.zero_shot;
        let sel = &self.cfg.selector;
        let s = sel.num_exemplars;
        let mut counts = BTreeMap::new();
        let mut exemplars = BTreeMap::new();

        let gt: Vec<BoundingBox> = record.gt_boxes.iter().take(s).copied().collect();
        let featmap = extract_features(&zs.base, &record.pixels);
        if !gt.is_empty() {
            counts.insert(Mode::GtExemplar, count_with_boxes(&zs.base, &featmap, &record.pixels, &gt)?.sum());
            exemplars.insert(Mode::GtExemplar, gt);
        }

        let (c, boxes) = count_with_random_exemplars(
            &record.pixels,
            s,
            &zs.base,
            sel.size_range,
            derive_seed(sel.seed, &record.id),
        )?;
        counts.insert(Mode::Random, c);
        exemplars.insert(Mode::Random, boxes);

        let cands = self.candidates(record, sel.num_proposals)?;
        let (c, boxes) = self.select(record, cands.clone(), sel, Ranking::PrototypeDistance)?;
        counts.insert(Mode::PrototypeOnly, c);
        exemplars.insert(Mode::PrototypeOnly, boxes);
        let (c, boxes) = self.select(record, cands, sel, Ranking::Predictor)?;
        counts.insert(Mode::PrototypePredictor, c);
        exemplars.insert(Mode::PrototypePredictor, boxes);

        let (c, _) = count_with_prototype_vector(&record.pixels, &self.baseline_prototypes[&record.class_name], &zs.base)?;
        counts.insert(Mode::PrototypeDirectBaseline, c);

        Ok(ImageOutcome {
            image_id: record.id.clone(),
            gt_count: record.count() as f64,
            counts,
            exemplars,
        })
    }
}

/// Metrics for every mode over `records`.
pub fn evaluate_split(models: &TrainedModels, cfg: &PipelineConfig, records: &[ImageRecord], split: Split) -> Result<EvalReport> {
    ensure(!records.is_empty(), || format!("{split} split is empty"))?;
    let ev = Evaluator::new(models, cfg, records)?;
    let mut images = Vec::with_capacity(records.len());
    for r in records {
        images.push(ev.evaluate_record(r)?);
    }
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut reports = BTreeMap::new();
    for mode in Mode::ALL {
        let pairs: Vec<(f64, f64)> = images
            .iter()
            .filter_map(|o| o.counts.get(&mode).map(|&c| (o.gt_count, c)))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let (g, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let rep = evaluate(&g, &p)?.with_per_image(&g, &p);
        info!("{split} {mode}: mae {:.3} rmse {:.3}", rep.mae, rep.rmse);
        reports.insert(mode, rep);
    }
    Ok(EvalReport { split, reports, images })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    NumExemplars,
    NumProposals,
    KNeighbors,
}

impl AblationAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationAxis::NumExemplars => "num_exemplars",
            AblationAxis::NumProposals => "num_proposals",
            AblationAxis::KNeighbors => "k_neighbors",
        }
    }

    pub fn default_values(&self) -> Vec<usize> {
        match self {
            AblationAxis::NumExemplars => vec![1, 2, 3, 4, 5],
            AblationAxis::NumProposals => vec![150, 300, 450, 600],
            AblationAxis::KNeighbors => vec![5, 10, 25, 50],
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "num_exemplars" => Ok(AblationAxis::NumExemplars),
            "num_proposals" => Ok(AblationAxis::NumProposals),
            "k_neighbors" => Ok(AblationAxis::KNeighbors),
            other => Err(crate::Error::Config(format!(
                "unknown ablation axis {other:?}; expected num_exemplars, num_proposals or k_neighbors"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: usize,
    pub report: MetricsReport,
}

/// One zero-shot (prototype + predictor) evaluation per value of `axis`,
/// all other settings fixed.
pub fn run_ablation(
    models: &TrainedModels,
    cfg: &PipelineConfig,
    records: &[ImageRecord],
    axis: AblationAxis,
    values: &[usize],
) -> Result<Vec<AblationRow>> {
    ensure(!values.is_empty(), || "ablation needs at least one value".into())?;
    ensure(!records.is_empty(), || "ablation needs records".into())?;
    let ev = Evaluator::new(models, cfg, records)?;
    let max_m = match axis {
        AblationAxis::NumProposals => *values.iter().max().expect("nonempty"),
        _ => cfg.selector.num_proposals,
    };
    let configs: Vec<SelectorConfig> = values
        .iter()
        .map(|&v| {
            let mut c = cfg.selector.clone();
            match axis {
                AblationAxis::NumExemplars => c.num_exemplars = v,
                AblationAxis::NumProposals => c.num_proposals = v,
                AblationAxis::KNeighbors => c.k_neighbors = v,
            }
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let mut preds = vec![Vec::with_capacity(records.len()); values.len()];
    let mut gts = Vec::with_capacity(records.len());
    for r in records {
        // random proposals form a prefix-stable stream, so one embedding pass
        // serves every M
        let cands = ev.candidates(r, max_m)?;
        for (vi, c) in configs.iter().enumerate() {
            let (count, _) = ev.select(r, prefix(&cands, c.num_proposals), c, Ranking::Predictor)?;
            preds[vi].push(count);
        }
        gts.push(r.count() as f64);
    }
    values
        .iter()
        .zip(preds)
        .map(|(&value, p)| {
            let report = evaluate(&gts, &p)?;
            info!("ablation {} = {value}: mae {:.3}", axis.as_str(), report.mae);
            Ok(AblationRow { value, report })
        })
        .collect()
}

pub fn ablation_csv(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut out = format!("{},{}\n", axis.as_str(), MetricsReport::CSV_HEADER);
    for r in rows {
        out.push_str(&format!("{},{}\n", r.value, r.report.csv_row()));
    }
    out
}

/// Predicted versus actual errors on held-out random patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorAccuracy {
    pub n: usize,
    pub spearman_raw: f64,
    pub spearman_normalized: f64,
    pub mean_relative_error: f64,
    pub median_relative_error: f64,
}

pub fn predictor_accuracy(models: &TrainedModels, records: &[ImageRecord], patches_per_image: usize, size_range: (u32, u32), seed: u64) -> Result<PredictorAccuracy> {
    let zs = &models.zero_shot;
    let target = zs.predictor.target;
    let (feats, samples) = error_samples(&zs.base, records, patches_per_image, size_range, target, seed)?;
    let (mut pred_raw, mut actual_raw, mut pred_norm, mut actual_norm, mut rel) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in &samples {
        let p = predict_patch_error(&zs.predictor, &feats[s.image], &s.simmap)?;
        let raw = to_raw_error(target, p, s.gt_count);
        let eps = (s.predicted_count - s.gt_count).abs();
        pred_raw.push(raw);
        actual_raw.push(eps);
        pred_norm.push(raw / s.gt_count.max(1.0));
        actual_norm.push(eps / s.gt_count.max(1.0));
        if eps > 0.0 {
            rel.push((raw - eps).abs() / eps);
        }
    }
    rel.sort_by(f64::total_cmp);
    let median = if rel.is_empty() {
        f64::NAN
    } else if rel.len() % 2 == 1 {
        rel[rel.len() / 2]
    } else {
        (rel[rel.len() / 2 - 1] + rel[rel.len() / 2]) / 2.0
    };
    Ok(PredictorAccuracy {
        n: samples.len(),
        spearman_raw: spearman(&pred_raw, &actual_raw)?,
        spearman_normalized: spearman(&pred_norm, &actual_norm)?,
        mean_relative_error: rel.iter().sum::<f64>() / rel.len().max(1) as f64,
        median_relative_error: median,
    })
}

/// Fraction of exemplar boxes centred on a target instance, for the
/// zero-shot selections in `report` and for uniformly random patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevancePrecision {
    pub selected: f64,
    pub random: f64,
}

pub fn relevance_precision(
    report: &EvalReport,
    records: &[ImageRecord],
    size_range: (u32, u32),
    random_per_image: usize,
    seed: u64,
) -> Result<RelevancePrecision> {
    let by_id: BTreeMap<&str, &ImageRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let (mut hit, mut total) = (0usize, 0usize);
    let (mut rhit, mut rtotal) = (0usize, 0usize);
    for o in &report.images {
        let r = by_id[o.image_id.as_str()];
        for b in o.exemplars.get(&Mode::PrototypePredictor).into_iter().flatten() {
            hit += usize::from(centred_on_target(r, b));
            total += 1;
        }
        let mut rng = rng_for(seed, &format!("relevance/{}", r.id));
        for b in sample_boxes(r.height(), r.width(), random_per_image, size_range, &mut rng)? {
            rhit += usize::from(centred_on_target(r, &b));
            rtotal += 1;
        }
    }
    ensure(total > 0 && rtotal > 0, || "no exemplars to score".into())?;
    Ok(RelevancePrecision {
        selected: hit as f64 / total as f64,
        random: rhit as f64 / rtotal as f64,
    })
}

/// Exports the prototype of `class_name`.
pub fn prototype_for(models: &TrainedModels, class_name: &str) -> Result<ClassPrototype> {
    let a = models.zero_shot.semantic.embed(class_name)?;
    generate_class_prototype(
        &models.zero_shot.vae,
        &a,
        models.zero_shot.prototype_samples,
        models.zero_shot.prototype_seed,
    )
}
