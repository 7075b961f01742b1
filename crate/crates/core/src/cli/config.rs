//! Flat `key = value` run configuration.
//!
//! Every key is a dotted path into [`PipelineConfig`] (for example
//! `counter.lr` or `selector.k_neighbors`), plus a handful of run-level keys:
//!
//! - `seed`: global seed; every module seed is derived from it unless set
//!   explicitly
//! - `run.dir`: output root (overridden by `ZSC_RUN_DIR`)
//! - `run.dataset_dir`: read the dataset from here instead of the
//!   `synth-data` stage output
//! - `run.eval_split`: `val` or `test`
//!
//! Values are JSON literals; strings may be written bare and arrays without
//! brackets (`selector.size_range = 10, 24`). Lines starting with `#` are
//! comments.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

const ALIASES: [(&str, &str); 3] = [
    ("selector.k", "selector.k_neighbors"),
    ("selector.m", "selector.num_proposals"),
    ("selector.s", "selector.num_exemplars"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub dir: String,
    pub dataset_dir: String,
    pub eval_split: Split,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            dir: "runs".into(),
            dataset_dir: String::new(),
            eval_split: Split::Val,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub run: RunSettings,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(p) = parts.next() {
            if parts.peek().is_none() {
                node.insert(p.to_string(), v.clone());
            } else {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("flattened keys never prefix a leaf");
            }
        }
    }
    Value::Object(root)
}

fn parse_value(key: &str, raw: &str, template: &Value) -> Result<Value> {
    let raw = raw.trim();
    let bad = |e: serde_json::Error| Error::Config(format!("{key}: cannot parse {raw:?}: {e}"));
    match template {
        Value::String(_) => Ok(Value::String(
            serde_json::from_str::<String>(raw).unwrap_or_else(|_| raw.to_string()),
        )),
        Value::Array(_) if !raw.starts_with('[') => serde_json::from_str(&format!("[{raw}]")).map_err(bad),
        _ => serde_json::from_str(raw).map_err(bad),
    }
}

fn canonical_key(key: &str) -> &str {
    ALIASES
        .iter()
        .find(|(alias, _)| *alias == key)
        .map_or(key, |(_, full)| full)
}

/// Parses `key = value` lines; duplicate keys are an error.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1)))?;
        let k = canonical_key(k.trim()).to_string();
        if seen.insert(k.clone(), lineno + 1).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", lineno + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `--set key=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {arg:?} is not key=value")))?;
    Ok((canonical_key(k.trim()).to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Defaults with `overrides` applied in order (later entries win).
    pub fn from_overrides(overrides: &[(String, String)]) -> Result<Self> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (k, v) in overrides {
            map.insert(canonical_key(k).to_string(), v.clone());
        }
        let seed = match map.remove("seed") {
            Some(s) => s
                .parse::<u64>()
                .map_err(|e| Error::Config(format!("seed: cannot parse {s:?}: {e}")))?,
            None => 0,
        };
        let mut run = RunSettings::default();
        if let Some(v) = map.remove("run.dir") {
            run.dir = parse_value("run.dir", &v, &Value::String(String::new()))?
                .as_str()
                .expect("string")
                .to_string();
        }
        if let Some(v) = map.remove("run.dataset_dir") {
            run.dataset_dir = parse_value("run.dataset_dir", &v, &Value::String(String::new()))?
                .as_str()
                .expect("string")
                .to_string();
        }
        if let Some(v) = map.remove("run.eval_split") {
            run.eval_split = match v.trim_matches('"') {
                "val" => Split::Val,
                "test" => Split::Test,
                other => return Err(Error::Config(format!("run.eval_split must be val or test, got {other:?}"))),
            };
        }
        let base = PipelineConfig::default().with_seed(seed);
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(&base).expect("config serialises"), &mut flat);
        for (k, raw) in &map {
            let template = flat
                .get(k)
                .ok_or_else(|| Error::Config(format!("unknown config key {k:?}")))?;
            let v = parse_value(k, raw, template)?;
            flat.insert(k.clone(), v);
        }
        let pipeline: PipelineConfig =
            serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(format!("invalid value: {e}")))?;
        let cfg = RunConfig { seed, pipeline, run };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then applies `overrides` and an optional seed on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)], seed: Option<u64>) -> Result<Self> {
        let mut all = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_config_text(&text)?
            }
            None => Vec::new(),
        };
        all.extend(overrides.iter().cloned());
        if let Some(s) = seed {
            all.push(("seed".into(), s.to_string()));
        }
        Self::from_overrides(&all)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        p.data.validate()?;
        p.selector.validate()?;
        let positive = [
            ("embedding.epochs", p.embedding.epochs),
            ("embedding.batch_size", p.embedding.batch_size),
            ("embedding.embedding_dim", p.embedding.embedding_dim),
            ("counter.batch_size", p.counter.batch_size),
            ("counter.reduced_channels", p.counter.reduced_channels),
            ("counter.exemplar_size", p.counter.exemplar_size),
            ("counter.max_exemplars", p.counter.max_exemplars),
            ("vae.batch_size", p.vae.batch_size),
            ("vae.latent_dim", p.vae.latent_dim),
            ("vae.n_samples", p.vae.n_samples),
            ("baseline_vae.batch_size", p.baseline_vae.batch_size),
            ("baseline_vae.n_samples", p.baseline_vae.n_samples),
            ("predictor.batch_size", p.predictor.batch_size),
            ("predictor.pool_size", p.predictor.pool_size),
            ("predictor.patches_per_image", p.predictor.patches_per_image),
            ("semantic_dim", p.semantic_dim),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        let rates = [
            ("embedding.lr", p.embedding.lr),
            ("counter.lr", p.counter.lr),
            ("counter.sigma", p.counter.sigma),
            ("counter.output_gain", p.counter.output_gain),
            ("vae.lr", p.vae.lr),
            ("baseline_vae.lr", p.baseline_vae.lr),
            ("predictor.lr", p.predictor.lr),
        ];
        for (k, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive and finite, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&p.heatmap_threshold) {
            return Err(Error::Config("heatmap_threshold must lie in [0, 1]".into()));
        }
        if p.counter.backbone_channels.is_empty() || p.embedding.channels.is_empty() {
            return Err(Error::Config("channel lists must be nonempty".into()));
        }
        if p.predictor.channels.len() != 5 {
            return Err(Error::Config("predictor.channels must list 5 convolutions".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, sorted by key.
    pub fn entries(&self) -> BTreeMap<String, Value> {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(&self.pipeline).expect("config serialises"), &mut flat);
        flat.insert("seed".into(), Value::from(self.seed));
        flat.insert("run.dir".into(), Value::String(self.run.dir.clone()));
        flat.insert("run.dataset_dir".into(), Value::String(self.run.dataset_dir.clone()));
        flat.insert("run.eval_split".into(), Value::String(self.run.eval_split.as_str().into()));
        flat
    }

    /// The resolved configuration in the file format; loading it back gives
    /// the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Like [`RunConfig::to_text`] but without the per-module seeds, which
    /// follow from `seed`; a starting point for config files.
    pub fn template_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            if k.ends_with(".seed") || k == "semantic_seed" {
                continue;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Hash over the keys under any of `prefixes`, excluding `run.dir`.
    pub fn hash_of(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k == "run.dir" {
                continue;
            }
            if prefixes.iter().any(|p| k == *p || k.starts_with(&format!("{p}."))) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Hash of the whole configuration.
    pub fn config_hash(&self) -> String {
        let keys: Vec<String> = self.entries().into_keys().collect();
        let refs: Vec<&str> = keys.iter().map(String::as_str).collect();
        self.hash_of(&refs)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
