//! Stage runner behind the `zsc` binary: run directories, checkpoints,
//! stage manifests and the artifacts each stage writes.
//!
//! Every stage writes to `<root>/<stage>/`, where `<root>` is `run.dir` or
//! the `ZSC_RUN_DIR` environment variable. Later stages read their inputs
//! from those canonical directories. Rerunning a stage whose directory
//! already holds a manifest writes to `<root>/<stage>.<unix-time>/` instead,
//! unless `--overwrite` is given.

pub mod checkpoint;
pub mod config;
pub mod heatmap;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};

use crate::counter::BaseCountingModel;
use crate::data::io::{write_density_png, write_json, MANIFEST_FILE};
use crate::data::{export_bundle, generate_synthetic_dataset, load_dataset, preprocess_image, read_png, DatasetBundle, Image};
use crate::embedding::EmbeddingNetwork;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::nn::bilinear_resize;
use crate::pipeline::{
    ablation_csv, evaluate_split, predictor_accuracy, relevance_precision, run_ablation, train_baseline_vae,
    train_counter, train_embedding, train_feature_vae, train_predictor, AblationAxis, TrainedModels,
};
use crate::prototype::{generate_class_prototype, ClassPrototype, ConditionalVAE};
use crate::seeding::rng_for;
use crate::selector::{select_exemplars, ErrorPredictor, ZeroShotModels};

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use heatmap::emit_class_heatmap;

pub const RUN_DIR_ENV: &str = "ZSC_RUN_DIR";
pub const STAGE_MANIFEST: &str = "stage_manifest.json";
const LOCK_FILE: &str = ".zsc.lock";

/// Version string recorded in checkpoints and manifests.
pub fn artifact_version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SynthData,
    TrainEmbed,
    TrainCounter,
    TrainVae,
    TrainPredictor,
    Infer,
    Eval,
    Ablate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::SynthData,
        Stage::TrainEmbed,
        Stage::TrainCounter,
        Stage::TrainVae,
        Stage::TrainPredictor,
        Stage::Infer,
        Stage::Eval,
        Stage::Ablate,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::SynthData => "synth-data",
            Stage::TrainEmbed => "train-embed",
            Stage::TrainCounter => "train-counter",
            Stage::TrainVae => "train-vae",
            Stage::TrainPredictor => "train-predictor",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Configuration keys each trained module depends on.
fn module_keys(module: &str) -> Vec<&'static str> {
    let mut keys = vec!["data", "target_height", "run.dataset_dir"];
    match module {
        "dataset" => {}
        "embedding" => keys.push("embedding"),
        "counter" => keys.push("counter"),
        "vae" | "baseline_vae" => keys.extend([
            "embedding",
            "counter",
            "vae",
            "baseline_vae",
            "semantic_dim",
            "semantic_seed",
            "semantic_table",
        ]),
        "predictor" => keys.extend(["counter", "predictor"]),
        _ => unreachable!("unknown module {module}"),
    }
    keys
}

pub fn module_hash(cfg: &RunConfig, module: &str) -> String {
    cfg.hash_of(&module_keys(module))
}

/// Extra arguments of individual stages.
#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    pub overwrite: bool,
    /// Accept checkpoints trained under a different configuration.
    pub force: bool,
    pub image: Option<PathBuf>,
    pub class_name: Option<String>,
    pub axis: Option<AblationAxis>,
    pub values: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub artifact_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub duration_secs: f64,
    /// Directories of the stages this one read from.
    pub inputs: BTreeMap<String, PathBuf>,
    /// Files written, relative to the stage directory.
    pub artifacts: Vec<String>,
}

/// What a stage produced.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub dir: PathBuf,
    pub manifest: StageManifest,
    /// Lines for standard output.
    pub lines: Vec<String>,
}

/// Resolves the output root: `ZSC_RUN_DIR` if set, else `run.dir`.
pub fn run_root(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(RUN_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(&cfg.run.dir),
    }
}

struct RunLock(PathBuf);

impl RunLock {
    fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Validation(format!(
                "another stage holds the lock {}; remove it if no stage is running",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Directory for a new run of `stage`.
fn output_dir(root: &Path, stage: Stage, overwrite: bool) -> Result<PathBuf> {
    let canonical = root.join(stage.as_str());
    if canonical.join(STAGE_MANIFEST).exists() {
        if overwrite {
            fs::remove_dir_all(&canonical).map_err(|e| Error::io(&canonical, e))?;
        } else {
            let ts = unix_now();
            let mut dir = root.join(format!("{stage}.{ts}"));
            let mut n = 1;
            while dir.exists() {
                dir = root.join(format!("{stage}.{ts}-{n}"));
                n += 1;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            return Ok(dir);
        }
    }
    fs::create_dir_all(&canonical).map_err(|e| Error::io(&canonical, e))?;
    Ok(canonical)
}

fn prerequisite(root: &Path, stage: Stage) -> Result<PathBuf> {
    let dir = root.join(stage.as_str());
    if dir.join(STAGE_MANIFEST).exists() {
        Ok(dir)
    } else {
        Err(Error::MissingPrerequisite(format!(
            "no completed {stage} run under {}; run `zsc {stage}` first",
            root.display()
        )))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Shared state of one stage invocation.
struct StageRun<'a> {
    cfg: &'a RunConfig,
    opts: &'a StageOptions,
    root: PathBuf,
    dir: PathBuf,
    inputs: BTreeMap<String, PathBuf>,
    artifacts: Vec<String>,
    lines: Vec<String>,
}

impl StageRun<'_> {
    fn input(&mut self, stage: Stage) -> Result<PathBuf> {
        let dir = prerequisite(&self.root, stage)?;
        self.inputs.insert(stage.as_str().to_string(), dir.clone());
        Ok(dir)
    }

    fn record(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.record(name);
        write_json(value, &path)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.record(name);
        write_text(&path, text)
    }

    fn save_checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        let path = self.record(name);
        ck.save(&path)
    }

    fn dataset(&mut self) -> Result<DatasetBundle> {
        let dir = if self.cfg.run.dataset_dir.is_empty() {
            let stage_dir = self.input(Stage::SynthData)?;
            let manifest: StageManifest = crate::data::io::read_json(&stage_dir.join(STAGE_MANIFEST))?;
            let want = module_hash(self.cfg, "dataset");
            let have: String = crate::data::io::read_json(&stage_dir.join("dataset_hash.json"))?;
            if have != want && !self.opts.force {
                return Err(Error::Checkpoint(format!(
                    "dataset in {} was generated under a different data config (run {}); rerun synth-data or pass --force",
                    stage_dir.display(),
                    manifest.config_hash
                )));
            }
            stage_dir.join("dataset")
        } else {
            PathBuf::from(&self.cfg.run.dataset_dir)
        };
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Error::MissingPrerequisite(format!(
                "no dataset at {}; run `zsc synth-data` first or set run.dataset_dir",
                dir.display()
            )));
        }
        let mut bundle = load_dataset(&dir)?;
        let th = self.cfg.pipeline.target_height;
        if th > 0 {
            for split in [&mut bundle.train, &mut bundle.val, &mut bundle.test] {
                for r in split.iter_mut() {
                    *r = preprocess_image(r, th)?;
                }
            }
        }
        Ok(bundle)
    }

    fn load_checkpoint(&mut self, stage: Stage, file: &str, module: &str) -> Result<Checkpoint> {
        let dir = self.input(stage)?;
        let ck = Checkpoint::load(&dir.join(file))?;
        ck.check(module, &module_hash(self.cfg, module), self.opts.force)?;
        Ok(ck)
    }

    fn load_embedding(&mut self) -> Result<EmbeddingNetwork> {
        let ck = self.load_checkpoint(Stage::TrainEmbed, "embedding.ckpt", "embedding")?;
        let classes: Vec<String> = serde_json::from_value(ck.header.meta["classes"].clone())
            .map_err(|e| Error::Checkpoint(format!("embedding checkpoint lacks its class list: {e}")))?;
        let mut net = EmbeddingNetwork::new(&self.cfg.pipeline.embedding, classes, &mut rng_for(0, "load"));
        ck.load_into(&mut net)?;
        Ok(net)
    }

    fn load_counter(&mut self) -> Result<BaseCountingModel> {
        let ck = self.load_checkpoint(Stage::TrainCounter, "counter.ckpt", "counter")?;
        let mut model = BaseCountingModel::new(&self.cfg.pipeline.counter, &mut rng_for(0, "load"));
        ck.load_into(&mut model)?;
        Ok(model)
    }

    fn load_vae(&mut self, file: &str, module: &str) -> Result<ConditionalVAE> {
        let ck = self.load_checkpoint(Stage::TrainVae, file, module)?;
        let dim = |k: &str| {
            ck.header.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("{module} checkpoint lacks {k}")))
        };
        let vcfg = if module == "vae" {
            &self.cfg.pipeline.vae
        } else {
            &self.cfg.pipeline.baseline_vae
        };
        let mut vae = ConditionalVAE::new(dim("feature_dim")?, dim("semantic_dim")?, vcfg, &mut rng_for(0, "load"));
        ck.load_into(&mut vae)?;
        Ok(vae)
    }

    fn load_predictor(&mut self) -> Result<ErrorPredictor> {
        let ck = self.load_checkpoint(Stage::TrainPredictor, "predictor.ckpt", "predictor")?;
        let in_ch = ck.header.meta["in_channels"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("predictor checkpoint lacks in_channels".into()))? as usize;
        let mut p = ErrorPredictor::new(in_ch, &self.cfg.pipeline.predictor, &mut rng_for(0, "load"));
        ck.load_into(&mut p)?;
        Ok(p)
    }

    fn load_models(&mut self) -> Result<TrainedModels> {
        let p = &self.cfg.pipeline;
        let (samples, seed) = (p.vae.n_samples, p.vae.seed);
        let semantic = p.semantic_provider()?;
        Ok(TrainedModels {
            zero_shot: ZeroShotModels {
                embedding: self.load_embedding()?,
                vae: self.load_vae("vae.ckpt", "vae")?,
                base: self.load_counter()?,
                predictor: self.load_predictor()?,
                semantic,
                prototype_samples: samples,
                prototype_seed: seed,
            },
            baseline_vae: self.load_vae("baseline_vae.ckpt", "baseline_vae")?,
        })
    }

    fn checkpoint<M: crate::nn::Parameters>(&self, model: &M, module: &str, seed: u64, meta: serde_json::Value) -> Checkpoint {
        Checkpoint::from_model(model, module, &module_hash(self.cfg, module), seed, meta)
    }
}

fn stage_body(run: &mut StageRun<'_>, stage: Stage) -> Result<()> {
    let p = run.cfg.pipeline.clone();
    match stage {
        Stage::SynthData => {
            let bundle = generate_synthetic_dataset(&p.data)?;
            export_bundle(&bundle, &run.dir.join("dataset"))?;
            run.artifacts.push("dataset".into());
            let hash = module_hash(run.cfg, "dataset");
            run.json("dataset_hash.json", &hash)?;
            run.lines.push(format!(
                "generated {} images ({} train, {} val, {} test)",
                bundle.len(),
                bundle.train.len(),
                bundle.val.len(),
                bundle.test.len()
            ));
        }
        Stage::TrainEmbed => {
            let bundle = run.dataset()?;
            let (net, log) = train_embedding(&bundle, &p)?;
            let ck = run.checkpoint(&net, "embedding", p.embedding.seed, serde_json::json!({ "classes": net.classes }));
            run.save_checkpoint("embedding.ckpt", &ck)?;
            run.json("train_log.json", &log)?;
        }
        Stage::TrainCounter => {
            let bundle = run.dataset()?;
            let (model, log) = train_counter(&bundle, &p)?;
            let ck = run.checkpoint(&model, "counter", p.counter.seed, serde_json::json!({ "feature_dim": model.feature_dim() }));
            run.save_checkpoint("counter.ckpt", &ck)?;
            run.lines.push(format!("counter loss {:.5} -> {:.5}", log.initial_loss, log.final_loss));
            run.json("train_log.json", &log)?;
        }
        Stage::TrainVae => {
            let bundle = run.dataset()?;
            let net = run.load_embedding()?;
            let base = run.load_counter()?;
            let (vae, vae_log) = train_feature_vae(&bundle, &net, &p)?;
            let (bvae, bvae_log) = train_baseline_vae(&bundle, &base, &p)?;
            for (name, module, model, seed) in [("vae.ckpt", "vae", &vae, p.vae.seed), ("baseline_vae.ckpt", "baseline_vae", &bvae, p.baseline_vae.seed)] {
                let meta = serde_json::json!({
                    "feature_dim": model.feature_dim(),
                    "semantic_dim": model.semantic_dim(),
                });
                let ck = run.checkpoint(model, module, seed, meta);
                run.save_checkpoint(name, &ck)?;
            }
            let provider = p.semantic_provider()?;
            let mut prototypes: BTreeMap<String, ClassPrototype> = BTreeMap::new();
            for class in bundle.classes.all() {
                let a = provider.embed(class)?;
                prototypes.insert(class.clone(), generate_class_prototype(&vae, &a, p.vae.n_samples, p.vae.seed)?);
            }
            run.json("prototypes.json", &prototypes)?;
            run.json("train_log.json", &serde_json::json!({ "vae": vae_log, "baseline_vae": bvae_log }))?;
        }
        Stage::TrainPredictor => {
            let bundle = run.dataset()?;
            let base = run.load_counter()?;
            let (pred, log) = train_predictor(&bundle, &base, &p)?;
            let ck = run.checkpoint(&pred, "predictor", p.predictor.seed, serde_json::json!({ "in_channels": pred.in_channels() }));
            run.save_checkpoint("predictor.ckpt", &ck)?;
            run.json("train_log.json", &log)?;
        }
        Stage::Infer => {
            let image_path = run
                .opts
                .image
                .clone()
                .ok_or_else(|| Error::Config("infer needs --image <path>".into()))?;
            let class = run
                .opts
                .class_name
                .clone()
                .ok_or_else(|| Error::Config("infer needs --class <name>".into()))?;
            let mut image = read_png(&image_path)?;
            if p.target_height > 0 && p.target_height != image.height() {
                let w = ((image.width() * p.target_height) as f64 / image.height() as f64).round().max(1.0) as usize;
                image = Image::from_raw(bilinear_resize(image.pixels(), p.target_height, w));
            }
            let models = run.load_models()?;
            let result = select_exemplars(&image, &class, &models.zero_shot, &p.selector)?;
            let density = run.record("density.png");
            write_density_png(&result.density, &density)?;
            let heat = run.record("heatmap.png");
            emit_class_heatmap(&image, &result.exemplar_boxes(), &models.zero_shot.embedding, p.heatmap_threshold, &heat)?;
            let relevant: Vec<_> = result
                .class_relevant_indices
                .iter()
                .map(|&i| result.candidates[i].bbox)
                .collect();
            run.json(
                "selection.json",
                &serde_json::json!({
                    "image": image_path,
                    "class_name": class,
                    "count": result.count,
                    "exemplars": result.exemplar_boxes(),
                    "class_relevant": relevant,
                }),
            )?;
            run.lines.push(format!("count = {:.3}", result.count));
        }
        Stage::Eval => {
            let bundle = run.dataset()?;
            let models = run.load_models()?;
            let split = run.cfg.run.eval_split;
            let records = bundle.split(split);
            let report = evaluate_split(&models, &p, records, split)?;
            let mut csv = format!("mode,{}\n", MetricsReport::CSV_HEADER);
            for (mode, r) in &report.reports {
                csv.push_str(&format!("{mode},{}\n", r.csv_row()));
                run.lines.push(format!("{mode}: mae {:.3} rmse {:.3}", r.mae, r.rmse));
            }
            let metrics: BTreeMap<String, MetricsReport> =
                report.reports.iter().map(|(m, r)| (m.to_string(), r.clone())).collect();
            run.json("metrics.json", &metrics)?;
            run.text("metrics.csv", &csv)?;
            run.json("per_image.json", &report.images)?;
            let acc = predictor_accuracy(
                &models,
                records,
                p.predictor.patches_per_image,
                p.predictor.size_range,
                crate::seeding::derive_seed(p.predictor.seed, "eval"),
            )?;
            run.lines.push(format!(
                "predictor spearman {:.3} (n = {}), median relative error {:.3}",
                acc.spearman_raw, acc.n, acc.median_relative_error
            ));
            run.json("predictor_accuracy.json", &acc)?;
            let rel = relevance_precision(
                &report,
                records,
                p.selector.size_range,
                200,
                crate::seeding::derive_seed(p.selector.seed, "relevance"),
            )?;
            run.lines.push(format!("relevance precision {:.3} vs random {:.3}", rel.selected, rel.random));
            run.json("relevance.json", &rel)?;
        }
        Stage::Ablate => {
            let axis = run.opts.axis.unwrap_or(AblationAxis::NumExemplars);
            let values = run.opts.values.clone().unwrap_or_else(|| axis.default_values());
            let bundle = run.dataset()?;
            let models = run.load_models()?;
            let rows = run_ablation(&models, &p, bundle.split(run.cfg.run.eval_split), axis, &values)?;
            let csv = ablation_csv(axis, &rows);
            run.lines.extend(csv.lines().map(String::from));
            run.text(&format!("ablation_{}.csv", axis.as_str()), &csv)?;
        }
    }
    Ok(())
}

/// Runs one stage under `cfg`; artifacts and a manifest land in the
/// returned directory.
pub fn run_stage(stage: Stage, cfg: &RunConfig, opts: &StageOptions) -> Result<StageOutcome> {
    cfg.validate()?;
    let root = run_root(cfg);
    let _lock = RunLock::acquire(&root)?;
    let started = Instant::now();
    let started_unix = unix_now();
    // check prerequisites before creating an output directory
    let required: &[Stage] = match stage {
        Stage::SynthData => &[],
        Stage::TrainEmbed | Stage::TrainCounter => &[Stage::SynthData],
        Stage::TrainVae => &[Stage::TrainEmbed, Stage::TrainCounter],
        Stage::TrainPredictor => &[Stage::TrainCounter],
        Stage::Infer => &[Stage::TrainEmbed, Stage::TrainCounter, Stage::TrainVae, Stage::TrainPredictor],
        Stage::Eval | Stage::Ablate => &[Stage::TrainEmbed, Stage::TrainCounter, Stage::TrainVae, Stage::TrainPredictor],
    };
    for &s in required {
        if s == Stage::SynthData && !cfg.run.dataset_dir.is_empty() {
            continue;
        }
        prerequisite(&root, s)?;
    }
    if let Some(v) = &opts.values {
        if v.is_empty() {
            return Err(Error::Config("ablate needs at least one value".into()));
        }
    }
    let dir = output_dir(&root, stage, opts.overwrite)?;
    info!("{stage}: writing to {}", dir.display());
    let mut run = StageRun {
        cfg,
        opts,
        root,
        dir: dir.clone(),
        inputs: BTreeMap::new(),
        artifacts: Vec::new(),
        lines: Vec::new(),
    };
    let result = stage_body(&mut run, stage);
    if let Err(e) = result {
        // leave no half-written directory that later stages could mistake for output
        let _ = fs::remove_dir_all(&dir);
        return Err(e);
    }
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    run.artifacts.push("config.txt".into());
    let manifest = StageManifest {
        stage,
        artifact_version: artifact_version(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        started_unix,
        duration_secs: started.elapsed().as_secs_f64(),
        inputs: run.inputs,
        artifacts: run.artifacts,
    };
    write_json(&manifest, &dir.join(STAGE_MANIFEST))?;
    Ok(StageOutcome {
        dir,
        manifest,
        lines: run.lines,
    })
}
