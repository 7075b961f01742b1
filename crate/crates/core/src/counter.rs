//! Exemplar-based base counting model.
//!
//! A shared feature extractor maps the query image to a `d x h x w` feature
//! map and each exemplar crop to a pooled `d`-vector. Correlating the two
//! gives a similarity map; the counter head regresses a density map from the
//! feature map concatenated with the similarity map, and the count is the sum
//! of that map.

use log::info;
use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, DensityMap, Image, ImageRecord};
use crate::error::{ensure, Error, Result};
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, fit_to, global_avg_pool, global_avg_pool_backward, prefixed,
    relu3_backward, Adam, ChainCache, Conv2d, ConvCache, ConvChain, Parameters,
};
use crate::seeding::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterConfig {
    /// Output channels of the stride-2 backbone blocks.
    pub backbone_channels: Vec<usize>,
    /// `d`, channels after the 1x1 reduction.
    pub reduced_channels: usize,
    /// Output channels of the head convolutions preceding the final 1x1.
    pub head_channels: Vec<usize>,
    pub exemplar_size: usize,
    /// Maximum ground-truth exemplars used per training image.
    pub max_exemplars: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sigma: f64,
    /// Fixed multiplier on the head output. Densities are of order
    /// `1 / (2 pi sigma^2)`, well below a typical optimiser step.
    pub output_gain: f64,
    pub seed: u64,
}

impl Default for CounterConfig {
    fn default() -> Self {
        CounterConfig {
            backbone_channels: vec![16, 32, 32],
            reduced_channels: 32,
            head_channels: vec![32, 16, 16, 8],
            exemplar_size: 32,
            max_exemplars: 3,
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            sigma: 2.0,
            output_gain: 0.01,
            seed: 0,
        }
    }
}

/// `F(I)`: channel-first feature map and the stride that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub stride: usize,
    /// `(height, width)` of the image the map was computed from.
    pub image_size: (usize, usize),
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }
}

/// Globally pooled exemplar feature `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarVector(pub Array1<f64>);

impl ExemplarVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Inner products between an exemplar vector and every feature cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap(pub Array2<f64>);

/// Backbone of stride-2 blocks followed by a 1x1 channel reduction.
///
/// The first block is a single stride-2 convolution; later blocks add a
/// stride-1 convolution after the strided one.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub backbone: ConvChain,
    pub reduce: Conv2d,
    pub stride: usize,
}

struct ExtractorCache {
    chain: ChainCache,
    reduce: ConvCache,
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(channels: &[usize], d: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut c_in = 3;
        for (i, &c) in channels.iter().enumerate() {
            layers.push(Conv2d::new(c_in, c, 3, 2, 1, rng));
            if i > 0 {
                layers.push(Conv2d::new(c, c, 3, 1, 1, rng));
            }
            c_in = c;
        }
        FeatureExtractor {
            backbone: ConvChain {
                layers,
                relu_last: true,
            },
            reduce: Conv2d::new(c_in, d, 1, 1, 0, rng),
            stride: 1 << channels.len(),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        self.reduce.forward(&self.backbone.forward(x))
    }

    fn forward_train(&self, x: &Array3<f64>) -> (Array3<f64>, ExtractorCache) {
        let (h, chain) = self.backbone.forward_train(x);
        let (y, reduce) = self.reduce.forward_train(&h);
        (y, ExtractorCache { chain, reduce })
    }

    fn backward(&self, cache: &ExtractorCache, grad_out: &Array3<f64>, grad: &mut FeatureExtractor) {
        let g = self
            .reduce
            .backward(&cache.reduce, grad_out, &mut grad.reduce, true)
            .expect("input grad requested");
        self.backbone.backward(&cache.chain, &g, &mut grad.backbone, false);
    }
}

impl Parameters for FeatureExtractor {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut p = prefixed("backbone", self.backbone.params());
        p.extend(prefixed("reduce", self.reduce.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut p = self.backbone.params_mut();
        p.extend(self.reduce.params_mut());
        p
    }
}

/// Counter head `C`: 3x3 convolutions with ReLU, each of the first
/// `log2(stride)` followed by 2x bilinear upsampling, then a 1x1 convolution,
/// crop/pad to the image size, a fixed gain and a final rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterHead {
    pub convs: Vec<Conv2d>,
    pub upsamples: usize,
    pub gain: f64,
}

struct HeadCache {
    convs: Vec<ConvCache>,
    relu_out: Vec<Array3<f64>>,
    pre_up: Vec<(usize, usize)>,
    pre_fit: (usize, usize),
    out: Array3<f64>,
}

impl CounterHead {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        channels: &[usize],
        upsamples: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut convs = Vec::new();
        let mut c_in = in_ch;
        for &c in channels {
            convs.push(Conv2d::new(c_in, c, 3, 1, 1, rng));
            c_in = c;
        }
        let mut last = Conv2d::new(c_in, 1, 1, 1, 0, rng);
        // start with a small positive output so the final rectifier passes gradient
        last.weight.mapv_inplace(|w| w * 0.1);
        last.bias.fill(1e-3 / gain);
        convs.push(last);
        CounterHead { convs, upsamples, gain }
    }

    fn forward_impl(&self, x: &Array3<f64>, out_h: usize, out_w: usize) -> HeadCache {
        let n = self.convs.len();
        let mut h = x.clone();
        let mut convs = Vec::with_capacity(n);
        let mut relu_out = Vec::with_capacity(n);
        let mut pre_up = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            let (y, cache) = conv.forward_train(&h);
            convs.push(cache);
            if i + 1 == n {
                h = y;
                break;
            }
            let y = y.mapv(|v| v.max(0.0));
            relu_out.push(y.clone());
            h = y;
            if i < self.upsamples {
                let (_, ph, pw) = h.dim();
                pre_up.push((ph, pw));
                h = bilinear_resize(&h, ph * 2, pw * 2);
            }
        }
        let (_, ph, pw) = h.dim();
        let g = self.gain;
        let out = fit_to(&h, out_h, out_w).mapv(|v| (g * v).max(0.0));
        HeadCache {
            convs,
            relu_out,
            pre_up,
            pre_fit: (ph, pw),
            out,
        }
    }

    pub fn forward(&self, x: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
        self.forward_impl(x, out_h, out_w).out
    }

    fn backward(&self, cache: &HeadCache, grad_out: &Array3<f64>, grad: &mut CounterHead) -> Array3<f64> {
        let g = relu3_backward(&cache.out, grad_out) * self.gain;
        let mut g = fit_to(&g, cache.pre_fit.0, cache.pre_fit.1);
        let n = self.convs.len();
        for i in (0..n).rev() {
            if i + 1 < n {
                if i < self.upsamples {
                    let (ph, pw) = cache.pre_up[i];
                    g = bilinear_resize_backward(&g, ph, pw);
                }
                g = relu3_backward(&cache.relu_out[i], &g);
            }
            g = self.convs[i]
                .backward(&cache.convs[i], &g, &mut grad.convs[i], true)
                .expect("input grad requested");
        }
        g
    }
}

impl Parameters for CounterHead {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| prefixed(&format!("conv{i}"), c.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseCountingModel {
    pub extractor: FeatureExtractor,
    pub head: CounterHead,
    pub exemplar_size: usize,
}

impl BaseCountingModel {
    pub fn new<R: Rng + ?Sized>(cfg: &CounterConfig, rng: &mut R) -> Self {
        let extractor = FeatureExtractor::new(&cfg.backbone_channels, cfg.reduced_channels, rng);
        let head = CounterHead::new(
            cfg.reduced_channels + 1,
            &cfg.head_channels,
            cfg.backbone_channels.len(),
            cfg.output_gain,
            rng,
        );
        BaseCountingModel {
            extractor,
            head,
            exemplar_size: cfg.exemplar_size,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.reduce.out_channels()
    }

    /// Density map for `image` given exemplar boxes (similarity maps averaged).
    pub fn count_with_exemplars(&self, image: &Image, boxes: &[BoundingBox]) -> Result<DensityMap> {
        let feats = extract_features(self, image);
        let exemplars = boxes
            .iter()
            .map(|b| exemplar_vector(self, image, b))
            .collect::<Result<Vec<_>>>()?;
        let sim = similarity_map(&feats, &exemplars)?;
        predict_density(self, &feats, &sim)
    }

    /// Counting loss for one image and its parameter gradient, accumulated
    /// into `grad`.
    pub fn loss_and_grad(
        &self,
        image: &Image,
        boxes: &[BoundingBox],
        target: &DensityMap,
        grad: &mut BaseCountingModel,
    ) -> Result<f64> {
        ensure(!boxes.is_empty(), || "at least one exemplar box is required".into())?;
        ensure(
            target.height() == image.height() && target.width() == image.width(),
            || "density target does not match the image size".into(),
        )?;
        let (feat, img_cache) = self.extractor.forward_train(image.pixels());
        let (d, fh, fw) = feat.dim();
        let mut ex_caches = Vec::with_capacity(boxes.len());
        let mut pooled = Vec::with_capacity(boxes.len());
        for b in boxes {
            let crop = image.crop_resized(b, self.exemplar_size, self.exemplar_size)?;
            let (fb, cache) = self.extractor.forward_train(&crop);
            let (_, bh, bw) = fb.dim();
            pooled.push(global_avg_pool(&fb));
            ex_caches.push((cache, bh, bw));
        }
        let n = boxes.len() as f64;
        let mut sim = Array2::<f64>::zeros((fh, fw));
        for (k, b) in pooled.iter().enumerate() {
            let s = correlate(&feat, b);
            sim.zip_mut_with(&s, |m, &v| *m += (v - *m) / (k + 1) as f64);
        }
        let input = concatenate(Axis(0), &[feat.view(), sim.view().insert_axis(Axis(0))])
            .expect("same spatial size");
        let head_cache = self.head.forward_impl(&input, image.height(), image.width());
        let pred = head_cache.out.index_axis(Axis(0), 0);
        let diff = &pred - target.values();
        let loss = diff.iter().map(|v| v * v).sum::<f64>();

        let dout = (diff * 2.0).insert_axis(Axis(0));
        let dinput = self.head.backward(&head_cache, &dout, &mut grad.head);
        let mut dfeat = dinput.slice(s![..d, .., ..]).to_owned();
        let dsim = dinput.index_axis(Axis(0), d).to_owned();
        let mean_b = pooled.iter().fold(Array1::zeros(d), |acc, b| acc + b) / n;
        for c in 0..d {
            let mut ch = dfeat.index_axis_mut(Axis(0), c);
            ch.scaled_add(mean_b[c], &dsim);
        }
        self.extractor.backward(&img_cache, &dfeat, &mut grad.extractor);
        // dL/db_k = (1/n) sum_ij dS_ij w_ij
        let db = Array1::from_shape_fn(d, |c| (&feat.index_axis(Axis(0), c) * &dsim).sum() / n);
        for (cache, bh, bw) in &ex_caches {
            let dfb = global_avg_pool_backward(&db, *bh, *bw);
            self.extractor.backward(cache, &dfb, &mut grad.extractor);
        }
        Ok(loss)
    }
}

impl Parameters for BaseCountingModel {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut p = prefixed("extractor", self.extractor.params());
        p.extend(prefixed("head", self.head.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut p = self.extractor.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Anything that turns an image and exemplar boxes into a density map.
pub trait ExemplarCounter {
    fn density(&self, image: &Image, exemplars: &[BoundingBox]) -> Result<DensityMap>;

    fn count(&self, image: &Image, exemplars: &[BoundingBox]) -> Result<f64> {
        Ok(self.density(image, exemplars)?.sum())
    }
}

impl ExemplarCounter for BaseCountingModel {
    fn density(&self, image: &Image, exemplars: &[BoundingBox]) -> Result<DensityMap> {
        self.count_with_exemplars(image, exemplars)
    }
}

pub fn extract_features(model: &BaseCountingModel, image: &Image) -> FeatureMap {
    FeatureMap {
        values: model.extractor.forward(image.pixels()),
        stride: model.extractor.stride,
        image_size: (image.height(), image.width()),
    }
}

/// Resizes the box crop to the exemplar size, extracts features and pools
/// them globally.
pub fn exemplar_vector(model: &BaseCountingModel, image: &Image, bbox: &BoundingBox) -> Result<ExemplarVector> {
    let crop = image.crop_resized(bbox, model.exemplar_size, model.exemplar_size)?;
    Ok(ExemplarVector(global_avg_pool(&model.extractor.forward(&crop))))
}

fn correlate(feat: &Array3<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (d, h, w) = feat.dim();
    let flat = feat
        .view()
        .into_shape_with_order((d, h * w))
        .expect("feature maps are contiguous");
    b.dot(&flat)
        .into_shape_with_order((h, w))
        .expect("similarity reshape")
}

/// Mean over exemplars of `S_ij = w_ij . b`, with `w_ij` the feature vector at
/// cell `(i, j)`.
pub fn similarity_map(featmap: &FeatureMap, exemplars: &[ExemplarVector]) -> Result<SimilarityMap> {
    ensure(!exemplars.is_empty(), || "similarity map needs at least one exemplar".into())?;
    let d = featmap.channels();
    let (h, w) = featmap.spatial();
    let mut mean = Array2::<f64>::zeros((h, w));
    for (k, b) in exemplars.iter().enumerate() {
        if b.len() != d {
            return Err(Error::Dimension(format!(
                "exemplar vector has {} components, feature map has {d} channels",
                b.len()
            )));
        }
        let s = correlate(&featmap.values, &b.0);
        // running mean: n identical maps average to exactly that map
        mean.zip_mut_with(&s, |m, &v| *m += (v - *m) / (k + 1) as f64);
    }
    Ok(SimilarityMap(mean))
}

/// Runs the counter head on `[F(I); S]`, returning a map at image resolution.
pub fn predict_density(model: &BaseCountingModel, featmap: &FeatureMap, simmap: &SimilarityMap) -> Result<DensityMap> {
    let (h, w) = featmap.spatial();
    if simmap.0.dim() != (h, w) {
        return Err(Error::Dimension(format!(
            "similarity map {:?} does not match feature map {:?}",
            simmap.0.dim(),
            (h, w)
        )));
    }
    if featmap.channels() + 1 != model.head.convs[0].in_channels() {
        return Err(Error::Dimension(format!(
            "feature map has {} channels, counter expects {}",
            featmap.channels(),
            model.head.convs[0].in_channels() - 1
        )));
    }
    let input = concatenate(Axis(0), &[featmap.values.view(), simmap.0.view().insert_axis(Axis(0))])
        .expect("same spatial size");
    let (ih, iw) = featmap.image_size;
    let out = model.head.forward(&input, ih, iw);
    Ok(DensityMap::new(out.index_axis_move(Axis(0), 0)))
}

/// Predicted count: the sum of the density map.
pub fn count(density: &DensityMap) -> f64 {
    density.sum()
}

/// Squared L2 distance between two density maps, summed over pixels.
pub fn counting_loss(pred: &DensityMap, target: &DensityMap) -> Result<f64> {
    if pred.values().dim() != target.values().dim() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.values().dim(),
            target.values().dim()
        )));
    }
    Ok(pred
        .values()
        .iter()
        .zip(target.values().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Batch reduction of [`counting_loss`]: mean over images.
pub fn batch_counting_loss(pairs: &[(DensityMap, DensityMap)]) -> Result<f64> {
    ensure(!pairs.is_empty(), || "empty batch".into())?;
    let mut total = 0.0;
    for (p, t) in pairs {
        total += counting_loss(p, t)?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterTrainLog {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

fn first_exemplars(r: &ImageRecord, n: usize) -> &[BoundingBox] {
    &r.gt_boxes[..r.gt_boxes.len().min(n)]
}

/// Mean counting loss over `records` using their first `n` ground-truth boxes.
pub fn mean_loss(model: &BaseCountingModel, records: &[ImageRecord], n: usize, sigma: f64) -> Result<f64> {
    ensure(!records.is_empty(), || "no records".into())?;
    let mut total = 0.0;
    for r in records {
        let pred = model.count_with_exemplars(&r.pixels, first_exemplars(r, n))?;
        total += counting_loss(&pred, &r.density_target(sigma)?)?;
    }
    Ok(total / records.len() as f64)
}

/// Trains `F` and `C` jointly with AdamW on ground-truth exemplars.
pub fn train_base_model(records: &[ImageRecord], cfg: &CounterConfig) -> Result<(BaseCountingModel, CounterTrainLog)> {
    ensure(!records.is_empty(), || "no training records".into())?;
    for r in records {
        ensure(!r.gt_boxes.is_empty(), || format!("record {} has no ground-truth boxes", r.id))?;
    }
    ensure(cfg.max_exemplars >= 1, || "max_exemplars must be at least 1".into())?;
    let targets = records
        .iter()
        .map(|r| r.density_target(cfg.sigma))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = rng_for(cfg.seed, "counter/train");
    let mut model = BaseCountingModel::new(cfg, &mut rng);
    let mut log = CounterTrainLog {
        initial_loss: mean_loss(&model, records, cfg.max_exemplars, cfg.sigma)?,
        ..Default::default()
    };
    let mut opt = Adam::adamw(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = model.zeroed();
            for &i in batch {
                let r = &records[i];
                let k = r.gt_boxes.len().min(cfg.max_exemplars);
                let boxes: Vec<BoundingBox> = r.gt_boxes.choose_multiple(&mut rng, k).copied().collect();
                total += model.loss_and_grad(&r.pixels, &boxes, &targets[i], &mut grad)?;
            }
            grad.scale(1.0 / batch.len() as f64);
            opt.step(&mut model, &grad);
        }
        let mean = total / records.len() as f64;
        info!("counter epoch {epoch}: loss {mean:.5}");
        log.epoch_losses.push(mean);
    }
    log.final_loss = mean_loss(&model, records, cfg.max_exemplars, cfg.sigma)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> CounterConfig {
        CounterConfig {
            backbone_channels: vec![4, 6],
            reduced_channels: 5,
            head_channels: vec![6, 4],
            exemplar_size: 8,
            ..CounterConfig::default()
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::new(Array3::from_shape_fn((3, h, w), |_| rng.random::<f64>())).unwrap()
    }

    fn fmap(values: Array3<f64>) -> FeatureMap {
        let (_, h, w) = values.dim();
        FeatureMap {
            values,
            stride: 1,
            image_size: (h, w),
        }
    }

    fn basis(d: usize, i: usize) -> ExemplarVector {
        let mut v = Array1::zeros(d);
        v[i] = 1.0;
        ExemplarVector(v)
    }

    #[test]
    fn similarity_identity_orthogonal_and_average() {
        let d = 4;
        let f = fmap(Array3::from_shape_fn((d, 3, 5), |(c, _, _)| if c == 0 { 1.0 } else { 0.0 }));
        let s = similarity_map(&f, &[basis(d, 0)]).unwrap();
        assert!(s.0.iter().all(|&v| v == 1.0));
        let s = similarity_map(&f, &[basis(d, 2)]).unwrap();
        assert!(s.0.iter().all(|&v| v == 0.0));
        let s = similarity_map(&f, &[basis(d, 0), ExemplarVector(Array1::zeros(d))]).unwrap();
        assert!(s.0.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn similarity_errors() {
        let f = fmap(Array3::zeros((4, 2, 2)));
        assert!(similarity_map(&f, &[]).is_err());
        assert!(matches!(similarity_map(&f, &[basis(3, 0)]), Err(Error::Dimension(_))));
    }

    #[test]
    fn count_is_sum() {
        assert_eq!(count(&DensityMap::zeros(4, 4)), 0.0);
        assert_eq!(count(&DensityMap::new(Array2::from_elem((2, 2), 0.25))), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Array2::from_shape_fn((6, 7), |_| rng.random::<f64>());
        let a = count(&DensityMap::new(m.clone() * 3.7));
        assert!((a - 3.7 * count(&DensityMap::new(m))).abs() < 1e-9);
    }

    #[test]
    fn loss_cases() {
        let a = DensityMap::new(Array2::from_elem((2, 2), 0.5));
        assert_eq!(counting_loss(&a, &a).unwrap(), 0.0);
        let b = DensityMap::new(Array2::from_elem((2, 2), 1.5));
        assert_eq!(counting_loss(&a, &b).unwrap(), 4.0);
        assert!(counting_loss(&a, &DensityMap::zeros(3, 2)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let t = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let mut brute = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                brute += (p[[i, j]] - t[[i, j]]).powi(2);
            }
        }
        let got = counting_loss(&DensityMap::new(p), &DensityMap::new(t)).unwrap();
        assert!((got - brute).abs() < 1e-9);
        let batch = vec![(a.clone(), b.clone()), (a.clone(), a.clone())];
        assert_eq!(batch_counting_loss(&batch).unwrap(), 2.0);
    }

    #[test]
    fn features_and_density_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = BaseCountingModel::new(&tiny_cfg(), &mut rng);
        let img = random_image(&mut rng, 24, 32);
        let wide = random_image(&mut rng, 24, 64);
        let f = extract_features(&model, &img);
        assert_eq!(f, extract_features(&model, &img));
        assert_eq!(f.channels(), 5);
        assert_eq!(f.spatial(), (6, 8));
        assert_eq!(extract_features(&model, &wide).spatial(), (6, 16));
        let b = exemplar_vector(&model, &img, &BoundingBox::new(2, 2, 10, 12).unwrap()).unwrap();
        assert_eq!(b.len(), 5);
        let s = similarity_map(&f, &[b]).unwrap();
        let d = predict_density(&model, &f, &s).unwrap();
        assert_eq!((d.height(), d.width()), (24, 32));
        assert!(d.is_nonnegative());
        assert_eq!(d, predict_density(&model, &f, &s).unwrap());
        assert!(predict_density(&model, &f, &SimilarityMap(Array2::zeros((3, 3)))).is_err());
    }

    #[test]
    fn odd_sizes_are_cropped_to_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = BaseCountingModel::new(&tiny_cfg(), &mut rng);
        let img = random_image(&mut rng, 21, 30);
        let d = model
            .count_with_exemplars(&img, &[BoundingBox::new(0, 0, 5, 5).unwrap()])
            .unwrap();
        assert_eq!((d.height(), d.width()), (21, 30));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut model = BaseCountingModel::new(&tiny_cfg(), &mut rng);
        // zero biases put pre-activations exactly on the ReLU kink wherever the
        // input window is all zeros
        for p in model.params_mut() {
            if p.ndim() == 1 {
                let mut p = p;
                p.mapv_inplace(|_| 0.05 * (rng.random::<f64>() + 0.2));
            }
        }
        let img = random_image(&mut rng, 16, 16);
        let boxes = [BoundingBox::new(1, 2, 9, 11).unwrap(), BoundingBox::new(6, 5, 15, 16).unwrap()];
        let target = crate::data::render_density_target(&[(4.0, 5.0), (11.0, 9.5)], 16, 16, 1.5).unwrap();
        let mut grad = model.zeroed();
        model.loss_and_grad(&img, &boxes, &target, &mut grad).unwrap();
        let loss = |m: &BaseCountingModel| {
            counting_loss(&m.count_with_exemplars(&img, &boxes).unwrap(), &target).unwrap()
        };
        let names: Vec<String> = grad.params().into_iter().map(|(n, _)| n).collect();
        let mut checked = 0;
        for (pi, name) in names.iter().enumerate() {
            let g = grad.params()[pi].1.to_owned();
            for probe in [0usize, g.len() / 2, g.len() - 1] {
                let eps = 1e-6;
                let mut plus = model.clone();
                plus.params_mut()[pi].as_slice_mut().unwrap()[probe] += eps;
                let mut minus = model.clone();
                minus.params_mut()[pi].as_slice_mut().unwrap()[probe] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let an = g.as_slice().unwrap()[probe];
                if fd.abs().max(an.abs()) < 1e-7 {
                    continue;
                }
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(rel < 1e-4, "{name}[{probe}]: analytic {an} vs fd {fd}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn training_errors_without_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rec = ImageRecord {
            id: "a".into(),
            pixels: random_image(&mut rng, 16, 16),
            class_name: "c".into(),
            dots: vec![(3.0, 3.0)],
            gt_boxes: vec![],
            split: crate::data::Split::Train,
            instances: vec![],
        };
        assert!(train_base_model(&[rec], &tiny_cfg()).is_err());
    }
}
