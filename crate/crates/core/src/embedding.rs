//! Patch-embedding space used for class-relevant patch selection, and the
//! semantic class-name embeddings that condition the feature generator.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use ndarray::{Array1, Array3, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, Image, ImageRecord};
use crate::error::{ensure, Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, prefixed, softmax_cross_entropy, Adam, Conv2d, ConvChain, Linear,
    Parameters,
};
use crate::seeding::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub embedding_dim: usize,
    pub channels: Vec<usize>,
    pub patch_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Maximum fractional outward jitter of training crops per side.
    pub crop_jitter: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            embedding_dim: 64,
            channels: vec![16, 32, 32],
            patch_size: 32,
            epochs: 8,
            batch_size: 16,
            lr: 2e-3,
            crop_jitter: 0.3,
            seed: 0,
        }
    }
}

/// Small convolutional classifier; its pooled penultimate activations are the
/// patch embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNetwork {
    pub backbone: ConvChain,
    pub classifier: Linear,
    pub patch_size: usize,
    pub classes: Vec<String>,
}

impl EmbeddingNetwork {
    /// Strided 3x3 blocks for `channels`, then a stride-1 block to
    /// `embedding_dim`.
    pub fn new<R: Rng + ?Sized>(cfg: &EmbeddingConfig, classes: Vec<String>, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut c_in = 3;
        for &c in &cfg.channels {
            layers.push(Conv2d::new(c_in, c, 3, 2, 1, rng));
            c_in = c;
        }
        layers.push(Conv2d::new(c_in, cfg.embedding_dim, 3, 1, 1, rng));
        let classifier = Linear::new(cfg.embedding_dim, classes.len(), rng);
        EmbeddingNetwork {
            backbone: ConvChain {
                layers,
                relu_last: true,
            },
            classifier,
            patch_size: cfg.patch_size,
            classes,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    pub fn embed_crop(&self, crop: &Array3<f64>) -> Array1<f64> {
        global_avg_pool(&self.backbone.forward(crop))
    }

    pub fn logits(&self, crop: &Array3<f64>) -> Array1<f64> {
        self.classifier.forward(&self.embed_crop(crop))
    }

    pub fn classify(&self, image: &Image, bbox: &BoundingBox) -> Result<usize> {
        let crop = image.crop_resized(bbox, self.patch_size, self.patch_size)?;
        let logits = self.logits(&crop);
        Ok(argmax(&logits))
    }

    /// Loss and parameter gradient for one labelled crop.
    fn loss_and_grad(&self, crop: &Array3<f64>, label: usize, grad: &mut EmbeddingNetwork) -> (f64, bool) {
        let (feat, cache) = self.backbone.forward_train(crop);
        let (_, fh, fw) = feat.dim();
        let emb = global_avg_pool(&feat);
        let logits = self.classifier.forward(&emb);
        let correct = argmax(&logits) == label;
        let (loss, dlogits) = softmax_cross_entropy(&logits, label);
        let demb = self.classifier.backward(&emb, &dlogits, &mut grad.classifier);
        let dfeat = global_avg_pool_backward(&demb, fh, fw);
        self.backbone.backward(&cache, &dfeat, &mut grad.backbone, false);
        (loss, correct)
    }
}

impl Parameters for EmbeddingNetwork {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut p = prefixed("backbone", self.backbone.params());
        p.extend(prefixed("classifier", self.classifier.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut p = self.backbone.params_mut();
        p.extend(self.classifier.params_mut());
        p
    }
}

fn argmax(v: &Array1<f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Embedding of `bbox` in `image`: bilinear crop to the patch size, forward
/// pass, global average pool of the last block.
pub fn embed_patch(net: &EmbeddingNetwork, image: &Image, bbox: &BoundingBox) -> Result<Array1<f64>> {
    let crop = image.crop_resized(bbox, net.patch_size, net.patch_size)?;
    Ok(net.embed_crop(&crop))
}

/// A labelled object box drawn from a training record.
#[derive(Clone, Debug)]
pub struct LabelledBox {
    pub record: usize,
    pub bbox: BoundingBox,
    pub label: usize,
}

/// Every labelled object box in `records`: all instances when the record
/// carries them, otherwise its ground-truth boxes.
pub fn labelled_boxes(records: &[ImageRecord], classes: &[String]) -> Vec<LabelledBox> {
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut out = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        if r.instances.is_empty() {
            if let Some(&label) = index.get(r.class_name.as_str()) {
                out.extend(r.gt_boxes.iter().map(|&bbox| LabelledBox { record: ri, bbox, label }));
            }
        } else {
            for inst in &r.instances {
                if let Some(&label) = index.get(inst.class_name.as_str()) {
                    out.push(LabelledBox {
                        record: ri,
                        bbox: inst.bbox,
                        label,
                    });
                }
            }
        }
    }
    out
}

/// Randomly grows and shifts `b` by up to `frac` of its size per side.
pub fn jitter_box<R: Rng + ?Sized>(b: &BoundingBox, frac: f64, h: usize, w: usize, rng: &mut R) -> BoundingBox {
    if frac <= 0.0 {
        return *b;
    }
    let dw = b.width() as f64 * frac;
    let dh = b.height() as f64 * frac;
    let x1 = (b.x1 as f64 - rng.random_range(0.0..=dw)).round().max(0.0) as u32;
    let y1 = (b.y1 as f64 - rng.random_range(0.0..=dh)).round().max(0.0) as u32;
    let x2 = ((b.x2 as f64 + rng.random_range(0.0..=dw)).round() as u32).min(w as u32).max(x1 + 1);
    let y2 = ((b.y2 as f64 + rng.random_range(0.0..=dh)).round() as u32).min(h as u32).max(y1 + 1);
    BoundingBox { x1, y1, x2, y2 }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trains the classifier with cross-entropy on jittered object crops of the
/// training split.
pub fn train_embedding_network(
    train_split: &[ImageRecord],
    classes: &[String],
    cfg: &EmbeddingConfig,
) -> Result<(EmbeddingNetwork, Vec<EpochStats>)> {
    ensure(!train_split.is_empty(), || "training split is empty".into())?;
    ensure(classes.len() >= 2, || {
        format!("embedding training needs at least 2 classes, got {}", classes.len())
    })?;
    let samples = labelled_boxes(train_split, classes);
    ensure(!samples.is_empty(), || "no labelled boxes in the training split".into())?;
    let mut rng = rng_for(cfg.seed, "embedding/train");
    let mut net = EmbeddingNetwork::new(cfg, classes.to_vec(), &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = net.zeroed();
            for &i in batch {
                let s = &samples[i];
                let rec = &train_split[s.record];
                let b = jitter_box(&s.bbox, cfg.crop_jitter, rec.height(), rec.width(), &mut rng);
                let crop = rec.pixels.crop_resized(&b, cfg.patch_size, cfg.patch_size)?;
                let (loss, ok) = net.loss_and_grad(&crop, s.label, &mut grad);
                total += loss;
                correct += usize::from(ok);
            }
            grad.scale(1.0 / batch.len() as f64);
            opt.step(&mut net, &grad);
        }
        let stats = EpochStats {
            epoch,
            loss: total / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        };
        info!(
            "embedding epoch {epoch}: loss {:.4} acc {:.3}",
            stats.loss, stats.accuracy
        );
        log.push(stats);
    }
    Ok((net, log))
}

/// Classification accuracy on un-jittered labelled boxes of `records`.
pub fn crop_accuracy(net: &EmbeddingNetwork, records: &[ImageRecord]) -> Result<f64> {
    let samples = labelled_boxes(records, &net.classes);
    ensure(!samples.is_empty(), || "no labelled boxes to evaluate".into())?;
    let mut correct = 0;
    for s in &samples {
        if net.classify(&records[s.record].pixels, &s.bbox)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbedding {
    pub class_name: String,
    pub vector: Array1<f64>,
}

/// Source of class-name embeddings.
#[derive(Clone, Debug, PartialEq)]
pub enum SemanticProvider {
    /// Vectors supplied from a table, e.g. exported from a text encoder.
    Table {
        dim: usize,
        table: BTreeMap<String, Vec<f64>>,
    },
    /// Deterministic unit vectors: one seeded Gaussian vector per
    /// `-`/`_`/space-separated token of the class name, summed and
    /// normalised. Names sharing tokens share directions.
    Hashed { dim: usize, seed: u64 },
}

impl SemanticProvider {
    pub fn hashed(dim: usize, seed: u64) -> Self {
        SemanticProvider::Hashed { dim, seed }
    }

    pub fn from_table(table: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dim = table
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::Validation("semantic table is empty".into()))?;
        for (name, v) in &table {
            ensure(v.len() == dim && dim > 0, || {
                format!("semantic vector for {name:?} has length {}, expected {dim}", v.len())
            })?;
            ensure(v.iter().all(|x| x.is_finite()), || format!("semantic vector for {name:?} is not finite"))?;
        }
        Ok(SemanticProvider::Table { dim, table })
    }

    /// Reads a JSON object `{ "class_name": [floats], ... }`.
    pub fn from_table_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        SemanticProvider::from_table(table)
    }

    pub fn dim(&self) -> usize {
        match self {
            SemanticProvider::Table { dim, .. } | SemanticProvider::Hashed { dim, .. } => *dim,
        }
    }

    pub fn embed(&self, class_name: &str) -> Result<SemanticEmbedding> {
        let vector = match self {
            SemanticProvider::Table { table, .. } => table
                .get(class_name)
                .map(|v| Array1::from(v.clone()))
                .ok_or_else(|| Error::UnknownClass(class_name.to_string()))?,
            SemanticProvider::Hashed { dim, seed } => {
                let mut acc = Array1::<f64>::zeros(*dim);
                let mut tokens = 0;
                for tok in class_name
                    .split(|c: char| c == '-' || c == '_' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                {
                    let mut rng = rng_for(*seed, &format!("semantic/{}", tok.to_lowercase()));
                    for v in acc.iter_mut() {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        *v += g;
                    }
                    tokens += 1;
                }
                ensure(tokens > 0, || format!("class name {class_name:?} has no tokens"))?;
                let norm = acc.dot(&acc).sqrt();
                acc / norm
            }
        };
        Ok(SemanticEmbedding {
            class_name: class_name.to_string(),
            vector,
        })
    }
}

/// Convenience wrapper matching the operation name used throughout the crate.
pub fn semantic_embedding(provider: &SemanticProvider, class_name: &str) -> Result<SemanticEmbedding> {
    provider.embed(class_name)
}
