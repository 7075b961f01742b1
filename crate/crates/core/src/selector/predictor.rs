//! Counting-error predictor `R`: regresses how badly the frozen base counter
//! does when a given patch is used as its only exemplar.

use log::info;
use ndarray::{concatenate, Array1, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::counter::{exemplar_vector, extract_features, predict_density, similarity_map, BaseCountingModel, FeatureMap, SimilarityMap};
use crate::data::{BoundingBox, Image, ImageRecord};
use crate::error::{ensure, Error, Result};
use crate::nn::{adaptive_avg_pool, adaptive_avg_pool_backward, prefixed, Adam, Conv2d, ConvChain, Linear, Parameters};
use crate::seeding::rng_for;

use super::sampling::sample_boxes;

/// What the predictor regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorTarget {
    /// `|sum D - N*| / max(N*, 1)`
    Normalized,
    /// `|sum D - N*|`
    Raw,
}

impl ErrorTarget {
    pub fn target(self, predicted_count: f64, gt_count: f64) -> f64 {
        let eps = (predicted_count - gt_count).abs();
        match self {
            ErrorTarget::Normalized => eps / gt_count.max(1.0),
            ErrorTarget::Raw => eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Output channels of the five 3x3 convolutions.
    pub channels: Vec<usize>,
    /// Side of the adaptive pooling grid feeding the linear layer.
    pub pool_size: usize,
    pub patches_per_image: usize,
    pub size_range: (u32, u32),
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target: ErrorTarget,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            channels: vec![16, 16, 16, 16, 8],
            pool_size: 5,
            patches_per_image: 24,
            size_range: (10, 24),
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            target: ErrorTarget::Normalized,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorPredictor {
    pub convs: ConvChain,
    pub head: Linear,
    pub pool_size: usize,
    pub target: ErrorTarget,
}

impl ErrorPredictor {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, cfg: &PredictorConfig, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(cfg.channels.len());
        let mut c_in = in_ch;
        for &c in &cfg.channels {
            layers.push(Conv2d::new(c_in, c, 3, 1, 1, rng));
            c_in = c;
        }
        let mut head = Linear::new(c_in * cfg.pool_size * cfg.pool_size, 1, rng);
        head.weight.mapv_inplace(|w| w * 0.1);
        ErrorPredictor {
            convs: ConvChain {
                layers,
                relu_last: true,
            },
            head,
            pool_size: cfg.pool_size,
            target: cfg.target,
        }
    }

    /// All weights and biases zero.
    pub fn zeros(in_ch: usize, cfg: &PredictorConfig) -> Self {
        let mut layers = Vec::new();
        let mut c_in = in_ch;
        for &c in &cfg.channels {
            layers.push(Conv2d::zeros(c_in, c, 3, 1, 1));
            c_in = c;
        }
        ErrorPredictor {
            convs: ConvChain {
                layers,
                relu_last: true,
            },
            head: Linear::zeros(c_in * cfg.pool_size * cfg.pool_size, 1),
            pool_size: cfg.pool_size,
            target: cfg.target,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.convs.layers[0].in_channels()
    }

    fn flatten(pooled: &Array3<f64>) -> Array1<f64> {
        pooled.iter().copied().collect()
    }

    pub fn forward(&self, input: &Array3<f64>) -> f64 {
        let h = self.convs.forward(input);
        let p = adaptive_avg_pool(&h, self.pool_size, self.pool_size);
        self.head.forward(&Self::flatten(&p))[0]
    }

    /// Squared error against `target`, accumulating gradients into `grad`.
    fn loss_and_grad(&self, input: &Array3<f64>, target: f64, grad: &mut ErrorPredictor) -> f64 {
        let (h, cache) = self.convs.forward_train(input);
        let (c, hh, hw) = h.dim();
        let p = adaptive_avg_pool(&h, self.pool_size, self.pool_size);
        let flat = Self::flatten(&p);
        let y = self.head.forward(&flat)[0];
        let diff = y - target;
        let dflat = self.head.backward(&flat, &Array1::from(vec![2.0 * diff]), &mut grad.head);
        let dp = dflat
            .into_shape_with_order((c, self.pool_size, self.pool_size))
            .expect("pooled shape");
        let dh = adaptive_avg_pool_backward(&dp, hh, hw);
        self.convs.backward(&cache, &dh, &mut grad.convs, false);
        diff * diff
    }
}

impl Parameters for ErrorPredictor {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut p = prefixed("convs", self.convs.params());
        p.extend(prefixed("head", self.head.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut p = self.convs.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

fn predictor_input(featmap: &FeatureMap, simmap: &SimilarityMap) -> Result<Array3<f64>> {
    if simmap.0.dim() != featmap.spatial() {
        return Err(Error::Dimension(format!(
            "similarity map {:?} does not match feature map {:?}",
            simmap.0.dim(),
            featmap.spatial()
        )));
    }
    Ok(
        concatenate(Axis(0), &[featmap.values.view(), simmap.0.view().insert_axis(Axis(0))])
            .expect("same spatial size"),
    )
}

/// `R([F(I); S])`: the predicted error of the exemplar that produced `simmap`.
pub fn predict_patch_error(predictor: &ErrorPredictor, featmap: &FeatureMap, simmap: &SimilarityMap) -> Result<f64> {
    ensure(featmap.channels() + 1 == predictor.in_channels(), || {
        format!(
            "feature map has {} channels, predictor expects {}",
            featmap.channels(),
            predictor.in_channels() - 1
        )
    })?;
    Ok(predictor.forward(&predictor_input(featmap, simmap)?))
}

/// Single-exemplar similarity map and predicted count for `bbox`.
pub fn single_exemplar_count(
    base: &BaseCountingModel,
    featmap: &FeatureMap,
    image: &Image,
    bbox: &BoundingBox,
) -> Result<(SimilarityMap, f64)> {
    let b = exemplar_vector(base, image, bbox)?;
    let sim = similarity_map(featmap, &[b])?;
    let count = predict_density(base, featmap, &sim)?.sum();
    Ok((sim, count))
}

/// One training pair for the predictor.
#[derive(Clone, Debug)]
pub struct ErrorSample {
    pub image: usize,
    pub bbox: BoundingBox,
    pub simmap: SimilarityMap,
    pub predicted_count: f64,
    pub gt_count: f64,
    pub target: f64,
}

/// Samples random patches per record and labels each with the frozen
/// counter's error when that patch is the sole exemplar. Returns the
/// feature maps alongside the samples.
pub fn error_samples(
    base: &BaseCountingModel,
    records: &[ImageRecord],
    patches_per_image: usize,
    size_range: (u32, u32),
    target: ErrorTarget,
    seed: u64,
) -> Result<(Vec<FeatureMap>, Vec<ErrorSample>)> {
    let mut feats = Vec::with_capacity(records.len());
    let mut samples = Vec::with_capacity(records.len() * patches_per_image);
    for (i, r) in records.iter().enumerate() {
        let featmap = extract_features(base, &r.pixels);
        let mut rng = rng_for(seed, &format!("predictor/patches/{}", r.id));
        let boxes = sample_boxes(r.height(), r.width(), patches_per_image, size_range, &mut rng)?;
        let gt = r.count() as f64;
        for bbox in boxes {
            let (simmap, predicted_count) = single_exemplar_count(base, &featmap, &r.pixels, &bbox)?;
            samples.push(ErrorSample {
                image: i,
                bbox,
                simmap,
                predicted_count,
                gt_count: gt,
                target: target.target(predicted_count, gt),
            });
        }
        feats.push(featmap);
    }
    Ok((feats, samples))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainLog {
    pub epoch_mse: Vec<f64>,
}

/// Fits `R` by mean squared error to errors of the frozen `base` on random
/// patches of `records`.
pub fn train_error_predictor(
    base: &BaseCountingModel,
    records: &[ImageRecord],
    cfg: &PredictorConfig,
) -> Result<(ErrorPredictor, PredictorTrainLog)> {
    ensure(!records.is_empty(), || "no training records".into())?;
    ensure(cfg.patches_per_image >= 1, || "patches_per_image must be at least 1".into())?;
    ensure(cfg.channels.len() == 5, || "the error predictor has exactly five convolutions".into())?;
    for r in records {
        ensure(r.count() >= 1, || format!("record {} has no dot annotations", r.id))?;
    }
    let (feats, samples) = error_samples(base, records, cfg.patches_per_image, cfg.size_range, cfg.target, cfg.seed)?;
    train_on_samples(base.feature_dim() + 1, &feats, &samples, cfg)
}

/// Training loop over precomputed samples.
pub fn train_on_samples(
    in_ch: usize,
    feats: &[FeatureMap],
    samples: &[ErrorSample],
    cfg: &PredictorConfig,
) -> Result<(ErrorPredictor, PredictorTrainLog)> {
    ensure(!samples.is_empty(), || "no predictor training samples".into())?;
    let mut rng = rng_for(cfg.seed, "predictor/train");
    let mut model = ErrorPredictor::new(in_ch, cfg, &mut rng);
    let inputs = samples
        .iter()
        .map(|s| predictor_input(&feats[s.image], &s.simmap))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = PredictorTrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = model.zeroed();
            for &i in batch {
                total += model.loss_and_grad(&inputs[i], samples[i].target, &mut grad);
            }
            grad.scale(1.0 / batch.len() as f64);
            opt.step(&mut model, &grad);
        }
        let mse = total / samples.len() as f64;
        info!("predictor epoch {epoch}: mse {mse:.5}");
        log.epoch_mse.push(mse);
    }
    Ok((model, log))
}

/// Mean squared error of `model` over precomputed samples.
pub fn sample_mse(model: &ErrorPredictor, feats: &[FeatureMap], samples: &[ErrorSample]) -> Result<f64> {
    ensure(!samples.is_empty(), || "no samples".into())?;
    let mut total = 0.0;
    for s in samples {
        let p = predict_patch_error(model, &feats[s.image], &s.simmap)?;
        total += (p - s.target).powi(2);
    }
    Ok(total / samples.len() as f64)
}

/// Converts a prediction in the model's target space back to a raw count
/// error for an image with `gt_count` objects.
pub fn to_raw_error(target: ErrorTarget, prediction: f64, gt_count: f64) -> f64 {
    match target {
        ErrorTarget::Normalized => prediction * gt_count.max(1.0),
        ErrorTarget::Raw => prediction,
    }
}
