//! Zero-shot exemplar selection: sample candidate patches, keep the ones
//! nearest to the class prototype, rank those by predicted counting error and
//! count with the best few.

mod predictor;
mod proposals;
mod sampling;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::counter::{
    exemplar_vector, extract_features, predict_density, similarity_map, BaseCountingModel, ExemplarVector,
    FeatureMap,
};
use crate::data::{BoundingBox, DensityMap, Image, ImageRecord};
use crate::embedding::{embed_patch, labelled_boxes, EmbeddingNetwork, SemanticEmbedding, SemanticProvider};
use crate::error::{ensure, Result};
use crate::prototype::{generate_class_prototype, ClassPrototype, ConditionalVAE};
use crate::seeding::rng_for;

pub use predictor::{
    error_samples, predict_patch_error, sample_mse, single_exemplar_count, to_raw_error, train_error_predictor,
    train_on_samples, ErrorPredictor, ErrorSample, ErrorTarget, PredictorConfig, PredictorTrainLog,
};
pub use proposals::{FileProposals, Proposal, ProposalSource, RandomProposals};
pub use sampling::{sample_boxes, ASPECT_RANGE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchSource {
    Random,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePatch {
    pub bbox: BoundingBox,
    /// `f_i` in the selection embedding space.
    pub embedding: Array1<f64>,
    /// `||f_i - p||`, filled in by [`select_class_relevant`].
    pub prototype_distance: f64,
    pub predicted_error: Option<f64>,
    pub source: PatchSource,
    /// Objectness score from an external proposal source.
    pub score: Option<f64>,
}

/// How class-relevant candidates are ranked for the final exemplars.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ranking {
    /// Smallest predicted counting error.
    Predictor,
    /// Smallest prototype distance, no predictor.
    PrototypeDistance,
    /// Highest external objectness score.
    Objectness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    /// `M`, candidates sampled per image.
    pub num_proposals: usize,
    /// `k`, nearest neighbours of the prototype kept.
    pub k_neighbors: usize,
    /// `s`, exemplars used for counting.
    pub num_exemplars: usize,
    pub size_range: (u32, u32),
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            num_proposals: 450,
            k_neighbors: 10,
            num_exemplars: 3,
            size_range: (10, 24),
            seed: 0,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        let (m, k, s) = (self.num_proposals, self.k_neighbors, self.num_exemplars);
        ensure(1 <= s && s <= k && k <= m, || {
            format!("selector needs 1 <= s <= k <= M, got s={s} k={k} M={m}")
        })?;
        ensure(
            self.size_range.0 >= 1 && self.size_range.0 <= self.size_range.1,
            || format!("invalid size range {:?}", self.size_range),
        )
    }

    pub fn proposal_source(&self) -> RandomProposals {
        RandomProposals {
            count: self.num_proposals,
            size_range: self.size_range,
            seed: self.seed,
        }
    }
}

/// Outcome of the zero-shot pipeline on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub candidates: Vec<CandidatePatch>,
    /// Candidate indices nearest to the prototype, closest first.
    pub class_relevant_indices: Vec<usize>,
    /// Chosen exemplars, best first.
    pub exemplar_indices: Vec<usize>,
    pub density: DensityMap,
    pub count: f64,
}

impl SelectionResult {
    pub fn exemplar_boxes(&self) -> Vec<BoundingBox> {
        self.exemplar_indices.iter().map(|&i| self.candidates[i].bbox).collect()
    }
}

/// Uniform random boxes for an image of the given size.
pub fn sample_patches(image_height: usize, image_width: usize, cfg: &SelectorConfig) -> Result<Vec<BoundingBox>> {
    let mut rng = rng_for(cfg.seed, "selector/patches");
    sample_boxes(image_height, image_width, cfg.num_proposals, cfg.size_range, &mut rng)
}

fn euclidean(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices of the `n` smallest values, ties to the lower index.
pub fn smallest_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    let mut taken = vec![false; values.len()];
    for _ in 0..n.min(values.len()) {
        let mut best: Option<usize> = None;
        for (i, &v) in values.iter().enumerate() {
            if taken[i] {
                continue;
            }
            // strict comparison keeps the earliest index on ties
            if best.is_none_or(|b| v.total_cmp(&values[b]).is_lt()) {
                best = Some(i);
            }
        }
        let b = best.expect("n <= len");
        taken[b] = true;
        chosen.push(b);
    }
    if cfg!(debug_assertions) {
        let mut sorted: Vec<usize> = (0..values.len()).collect();
        sorted.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        sorted.truncate(n);
        debug_assert_eq!(sorted, chosen);
    }
    chosen
}

/// Records each candidate's prototype distance and returns the `k` nearest.
pub fn select_class_relevant(
    candidates: &mut [CandidatePatch],
    prototype: &ClassPrototype,
    k: usize,
) -> Result<Vec<usize>> {
    ensure(k <= candidates.len(), || {
        format!("k={k} exceeds the {} candidates", candidates.len())
    })?;
    let p = prototype.array();
    for c in candidates.iter_mut() {
        ensure(c.embedding.len() == p.len(), || {
            format!(
                "candidate embedding has length {}, prototype has {}",
                c.embedding.len(),
                p.len()
            )
        })?;
        c.prototype_distance = euclidean(&c.embedding, &p);
    }
    let d: Vec<f64> = candidates.iter().map(|c| c.prototype_distance).collect();
    Ok(smallest_indices(&d, k))
}

/// Every model the zero-shot pipeline needs.
#[derive(Clone, Debug)]
pub struct ZeroShotModels {
    pub embedding: EmbeddingNetwork,
    pub vae: ConditionalVAE,
    pub base: BaseCountingModel,
    pub predictor: ErrorPredictor,
    pub semantic: SemanticProvider,
    pub prototype_samples: usize,
    pub prototype_seed: u64,
}

impl ZeroShotModels {
    pub fn prototype(&self, class_name: &str) -> Result<ClassPrototype> {
        let a: SemanticEmbedding = self.semantic.embed(class_name)?;
        generate_class_prototype(&self.vae, &a, self.prototype_samples, self.prototype_seed)
    }
}

/// Embeds every proposal in the selection space.
pub fn embed_candidates(net: &EmbeddingNetwork, image: &Image, proposals: &[Proposal], source: PatchSource) -> Result<Vec<CandidatePatch>> {
    proposals
        .iter()
        .map(|p| {
            Ok(CandidatePatch {
                bbox: p.bbox,
                embedding: embed_patch(net, image, &p.bbox)?,
                prototype_distance: 0.0,
                predicted_error: None,
                source,
                score: p.score,
            })
        })
        .collect()
}

/// Scores the listed candidates with the predictor, each on its own
/// single-exemplar similarity map.
pub fn score_candidates(
    predictor: &ErrorPredictor,
    base: &BaseCountingModel,
    featmap: &FeatureMap,
    image: &Image,
    candidates: &mut [CandidatePatch],
    indices: &[usize],
) -> Result<()> {
    for &i in indices {
        let b = exemplar_vector(base, image, &candidates[i].bbox)?;
        let sim = similarity_map(featmap, &[b])?;
        candidates[i].predicted_error = Some(predict_patch_error(predictor, featmap, &sim)?);
    }
    Ok(())
}

/// Picks `s` of the class-relevant candidates under `ranking`.
pub fn rank_exemplars(
    candidates: &[CandidatePatch],
    relevant: &[usize],
    s: usize,
    ranking: Ranking,
) -> Result<Vec<usize>> {
    ensure(s >= 1 && s <= relevant.len(), || {
        format!("cannot pick {s} exemplars from {} candidates", relevant.len())
    })?;
    let keys = relevant
        .iter()
        .map(|&i| {
            let c = &candidates[i];
            Ok(match ranking {
                Ranking::Predictor => c.predicted_error.ok_or_else(|| {
                    crate::Error::Validation(format!("candidate {i} has not been scored"))
                })?,
                Ranking::PrototypeDistance => c.prototype_distance,
                Ranking::Objectness => -c.score.ok_or_else(|| {
                    crate::Error::Validation(format!("candidate {i} has no objectness score"))
                })?,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    // ties are resolved by candidate index, so order positions by index first
    let mut by_index: Vec<usize> = (0..relevant.len()).collect();
    by_index.sort_by_key(|&j| relevant[j]);
    let sorted_keys: Vec<f64> = by_index.iter().map(|&j| keys[j]).collect();
    Ok(smallest_indices(&sorted_keys, s)
        .into_iter()
        .map(|j| relevant[by_index[j]])
        .collect())
}

/// Counts with the given exemplars; the similarity maps are averaged.
pub fn count_with_boxes(base: &BaseCountingModel, featmap: &FeatureMap, image: &Image, boxes: &[BoundingBox]) -> Result<DensityMap> {
    let vectors = boxes
        .iter()
        .map(|b| exemplar_vector(base, image, b))
        .collect::<Result<Vec<_>>>()?;
    predict_density(base, featmap, &similarity_map(featmap, &vectors)?)
}

/// Runs selection and counting on already-embedded candidates.
pub fn select_from_candidates(
    image: &Image,
    mut candidates: Vec<CandidatePatch>,
    prototype: &ClassPrototype,
    models: &ZeroShotModels,
    cfg: &SelectorConfig,
    ranking: Ranking,
) -> Result<SelectionResult> {
    ensure(cfg.num_exemplars >= 1 && cfg.num_exemplars <= cfg.k_neighbors, || {
        format!("need 1 <= s <= k, got s={} k={}", cfg.num_exemplars, cfg.k_neighbors)
    })?;
    let relevant = select_class_relevant(&mut candidates, prototype, cfg.k_neighbors)?;
    let featmap = extract_features(&models.base, image);
    if ranking == Ranking::Predictor {
        score_candidates(&models.predictor, &models.base, &featmap, image, &mut candidates, &relevant)?;
    }
    let exemplars = rank_exemplars(&candidates, &relevant, cfg.num_exemplars, ranking)?;
    let boxes: Vec<BoundingBox> = exemplars.iter().map(|&i| candidates[i].bbox).collect();
    let density = count_with_boxes(&models.base, &featmap, image, &boxes)?;
    Ok(SelectionResult {
        count: density.sum(),
        candidates,
        class_relevant_indices: relevant,
        exemplar_indices: exemplars,
        density,
    })
}

/// Full pipeline with proposals from `source`.
pub fn select_exemplars_from(
    image: &Image,
    image_id: &str,
    prototype: &ClassPrototype,
    models: &ZeroShotModels,
    cfg: &SelectorConfig,
    source: &dyn ProposalSource,
    ranking: Ranking,
) -> Result<SelectionResult> {
    let proposals = source.proposals(image_id, image.height(), image.width())?;
    let candidates = embed_candidates(&models.embedding, image, &proposals, source.kind())?;
    select_from_candidates(image, candidates, prototype, models, cfg, ranking)
}

/// Zero-shot selection for `class_name` with random proposals.
pub fn select_exemplars(image: &Image, class_name: &str, models: &ZeroShotModels, cfg: &SelectorConfig) -> Result<SelectionResult> {
    cfg.validate()?;
    let prototype = models.prototype(class_name)?;
    let boxes = sample_patches(image.height(), image.width(), cfg)?;
    let proposals: Vec<Proposal> = boxes.into_iter().map(|bbox| Proposal { bbox, score: None }).collect();
    let candidates = embed_candidates(&models.embedding, image, &proposals, PatchSource::Random)?;
    select_from_candidates(image, candidates, &prototype, models, cfg, Ranking::Predictor)
}

pub fn count_zero_shot(
    image: &Image,
    class_name: &str,
    models: &ZeroShotModels,
    cfg: &SelectorConfig,
) -> Result<(f64, SelectionResult)> {
    let result = select_exemplars(image, class_name, models, cfg)?;
    Ok((result.count, result))
}

/// `(b, a)` pairs in the counter's exemplar space: pooled features of every
/// labelled object of `classes` in `records`, with its class's semantic vector.
pub fn counting_space_features(
    base: &BaseCountingModel,
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
            let b = exemplar_vector(base, &records[lb.record].pixels, &lb.bbox)?;
            Ok((b.0, semantic[lb.label].clone()))
        })
        .collect()
}

/// Counts with a counting-space prototype used directly as `b`, with no
/// patch selection.
pub fn count_with_prototype_baseline(
    image: &Image,
    class_name: &str,
    counting_vae: &ConditionalVAE,
    base: &BaseCountingModel,
    provider: &SemanticProvider,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, DensityMap)> {
    let a = provider.embed(class_name)?;
    let proto = generate_class_prototype(counting_vae, &a, n_samples, seed)?;
    count_with_prototype_vector(image, &proto, base)
}

/// Correlates a counting-space prototype directly with the image features.
pub fn count_with_prototype_vector(
    image: &Image,
    proto: &ClassPrototype,
    base: &BaseCountingModel,
) -> Result<(f64, DensityMap)> {
    ensure(proto.vector.len() == base.feature_dim(), || {
        format!(
            "baseline prototype has length {}, counter features have {}",
            proto.vector.len(),
            base.feature_dim()
        )
    })?;
    let featmap = extract_features(base, image);
    let sim = similarity_map(&featmap, &[ExemplarVector(proto.array())])?;
    let density = predict_density(base, &featmap, &sim)?;
    Ok((density.sum(), density))
}

/// Counts with `s` uniformly random patches.
pub fn count_with_random_exemplars(
    image: &Image,
    s: usize,
    base: &BaseCountingModel,
    size_range: (u32, u32),
    seed: u64,
) -> Result<(f64, Vec<BoundingBox>)> {
    ensure(s >= 1, || "need at least one exemplar".into())?;
    let mut rng = rng_for(seed, "selector/random-exemplars");
    let boxes = sample_boxes(image.height(), image.width(), s, size_range, &mut rng)?;
    let featmap = extract_features(base, image);
    let density = count_with_boxes(base, &featmap, image, &boxes)?;
    Ok((density.sum(), boxes))
}

/// Ranks with ties sharing the mean rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure(a.len() == b.len() && a.len() >= 2, || "spearman needs two equal-length samples of size >= 2".into())?;
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(rb.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    ensure(va > 0.0 && vb > 0.0, || "spearman is undefined for constant input".into())?;
    Ok(cov / (va * vb).sqrt())
}

/// Whether the box centre lies inside a target-class instance of `record`.
pub fn centred_on_target(record: &ImageRecord, bbox: &BoundingBox) -> bool {
    let (cx, cy) = bbox.center();
    record.target_instances().any(|i| i.bbox.contains_point(cx, cy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn candidate(embedding: Vec<f64>) -> CandidatePatch {
        CandidatePatch {
            bbox: BoundingBox::new(0, 0, 2, 2).unwrap(),
            embedding: Array1::from(embedding),
            prototype_distance: 0.0,
            predicted_error: None,
            source: PatchSource::Random,
            score: None,
        }
    }

    fn proto(v: Vec<f64>) -> ClassPrototype {
        ClassPrototype {
            class_name: "c".into(),
            vector: v,
            n_samples: 1,
            seed: 0,
        }
    }

    fn brute_force_knn(cands: &[CandidatePatch], p: &[f64], k: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = cands
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let s: f64 = c.embedding.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
                (s.sqrt(), i)
            })
            .collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|x| x.1).collect()
    }

    #[test]
    fn knn_orders_by_distance() {
        let mut c = vec![candidate(vec![3.0]), candidate(vec![1.0]), candidate(vec![-2.0])];
        assert_eq!(select_class_relevant(&mut c, &proto(vec![0.0]), 2).unwrap(), vec![1, 2]);
        assert_eq!(c[0].prototype_distance, 3.0);
        assert!(select_class_relevant(&mut c, &proto(vec![0.0]), 4).is_err());
    }

    #[test]
    fn knn_ties_go_to_lower_index() {
        let mut c = vec![candidate(vec![5.0]), candidate(vec![-1.0]), candidate(vec![1.0])];
        assert_eq!(select_class_relevant(&mut c, &proto(vec![0.0]), 1).unwrap(), vec![1]);
    }

    #[test]
    fn knn_matches_brute_force_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut c: Vec<CandidatePatch> = (0..50)
            .map(|_| candidate((0..8).map(|_| rng.random::<f64>()).collect()))
            .collect();
        let p: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let got = select_class_relevant(&mut c, &proto(p.clone()), 10).unwrap();
        assert_eq!(got, brute_force_knn(&c, &p, 10));
    }

    #[test]
    fn rank_by_predicted_error_and_distance() {
        let mut c: Vec<CandidatePatch> = (0..5).map(|i| candidate(vec![i as f64])).collect();
        for (i, e) in [0.4, 0.1, 0.3, 0.1, 0.9].into_iter().enumerate() {
            c[i].predicted_error = Some(e);
            c[i].prototype_distance = 10.0 - i as f64;
        }
        let relevant = [4, 3, 2, 1];
        assert_eq!(rank_exemplars(&c, &relevant, 2, Ranking::Predictor).unwrap(), vec![1, 3]);
        assert_eq!(rank_exemplars(&c, &relevant, 2, Ranking::PrototypeDistance).unwrap(), vec![4, 3]);
        assert!(rank_exemplars(&c, &relevant, 2, Ranking::Objectness).is_err());
        assert!(rank_exemplars(&c, &relevant, 5, Ranking::Predictor).is_err());
        c[0].predicted_error = None;
        assert!(rank_exemplars(&c, &[0, 1], 1, Ranking::Predictor).is_err());
    }

    #[test]
    fn objectness_prefers_high_scores() {
        let mut c: Vec<CandidatePatch> = (0..3).map(|i| candidate(vec![i as f64])).collect();
        c[0].score = Some(0.2);
        c[1].score = Some(0.9);
        c[2].score = Some(0.5);
        assert_eq!(rank_exemplars(&c, &[0, 1, 2], 2, Ranking::Objectness).unwrap(), vec![1, 2]);
    }

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // ties: ranks [1.5, 1.5, 3] vs [1, 2, 3]
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.8660254037844386).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SelectorConfig::default().validate().is_ok());
        let bad = SelectorConfig {
            num_exemplars: 11,
            ..SelectorConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SelectorConfig {
            k_neighbors: 500,
            ..SelectorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sample_patches_returns_m_contained_boxes() {
        let cfg = SelectorConfig::default();
        let boxes = sample_patches(80, 80, &cfg).unwrap();
        assert_eq!(boxes.len(), 450);
        assert!(boxes.iter().all(|b| b.fits_in(80, 80)));
        assert_eq!(boxes, sample_patches(80, 80, &cfg).unwrap());
        assert!(sample_patches(20, 80, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn smallest_indices_matches_sort(v in proptest::collection::vec(0u8..6, 1..40), n in 1usize..40) {
            let vals: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let n = n.min(vals.len());
            let mut idx: Vec<usize> = (0..vals.len()).collect();
            idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap().then(a.cmp(&b)));
            prop_assert_eq!(smallest_indices(&vals, n), idx[..n].to_vec());
        }

        #[test]
        fn knn_is_translation_invariant(seed in 0u64..500, shift in -50i32..50) {
            // integer coordinates keep distances exact, so ties survive the shift
            let shift = shift as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c: Vec<CandidatePatch> = (0..20)
                .map(|_| candidate((0..4).map(|_| rng.random_range(0..4) as f64).collect()))
                .collect();
            let p: Vec<f64> = (0..4).map(|_| rng.random_range(0..4) as f64).collect();
            let a = select_class_relevant(&mut c, &proto(p.clone()), 5).unwrap();
            let mut moved: Vec<CandidatePatch> = c
                .iter()
                .map(|x| candidate(x.embedding.iter().map(|v| v + shift).collect()))
                .collect();
            let b = select_class_relevant(&mut moved, &proto(p.iter().map(|v| v + shift).collect()), 5).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
