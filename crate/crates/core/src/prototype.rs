//! Conditional VAE over patch features and class prototypes drawn from it.
//!
//! The encoder sees `[x, a]` and emits `(mu, logvar)`; the decoder sees
//! `[z, a]`. A class prototype is the mean of decoder outputs for latent codes
//! drawn from the prior, conditioned on the class's semantic vector.

use std::path::Path;

use log::info;
use ndarray::{concatenate, s, Array1, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::SemanticEmbedding;
use crate::error::{ensure, Error, Result};
use crate::nn::{leaky1, leaky1_backward, prefixed, Adam, Linear, Parameters};
use crate::seeding::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Relu,
    Identity,
}

impl OutputActivation {
    fn apply(self, v: f64) -> f64 {
        match self {
            OutputActivation::Relu => v.max(0.0),
            OutputActivation::Identity => v,
        }
    }

    fn grad(self, out: f64, g: f64) -> f64 {
        match self {
            OutputActivation::Relu if out <= 0.0 => 0.0,
            _ => g,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Samples averaged into a prototype.
    pub n_samples: usize,
    pub output: OutputActivation,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 64,
            hidden_dim: 256,
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            n_samples: 256,
            output: OutputActivation::Relu,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalVAE {
    pub enc_hidden: Linear,
    /// Emits `[mu, logvar]` stacked.
    pub enc_out: Linear,
    pub dec_hidden: Linear,
    pub dec_out: Linear,
    pub output: OutputActivation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    pub kl: f64,
    pub recon: f64,
    pub total: f64,
}

/// Closed-form `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
pub fn gaussian_kl(mu: &Array1<f64>, logvar: &Array1<f64>) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

impl ConditionalVAE {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        semantic_dim: usize,
        cfg: &VaeConfig,
        rng: &mut R,
    ) -> Self {
        let (l, h) = (cfg.latent_dim, cfg.hidden_dim);
        let mut enc_out = Linear::new(h, 2 * l, rng);
        // start near the prior: small means, unit variances
        enc_out.weight.mapv_inplace(|w| w * 0.1);
        ConditionalVAE {
            enc_hidden: Linear::new(feature_dim + semantic_dim, h, rng),
            enc_out,
            dec_hidden: Linear::new(l + semantic_dim, h, rng),
            dec_out: Linear::new(h, feature_dim, rng),
            output: cfg.output,
        }
    }

    /// All weights and biases zero.
    pub fn zeros(feature_dim: usize, semantic_dim: usize, latent_dim: usize, hidden_dim: usize) -> Self {
        ConditionalVAE {
            enc_hidden: Linear::zeros(feature_dim + semantic_dim, hidden_dim),
            enc_out: Linear::zeros(hidden_dim, 2 * latent_dim),
            dec_hidden: Linear::zeros(latent_dim + semantic_dim, hidden_dim),
            dec_out: Linear::zeros(hidden_dim, feature_dim),
            output: OutputActivation::Relu,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_out.output_dim() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.dec_out.output_dim()
    }

    pub fn semantic_dim(&self) -> usize {
        self.dec_hidden.input_dim() - self.latent_dim()
    }

    fn check(&self, x: &Array1<f64>, a: &Array1<f64>) -> Result<()> {
        ensure(x.len() == self.feature_dim(), || {
            format!("feature has length {}, VAE expects {}", x.len(), self.feature_dim())
        })?;
        ensure(a.len() == self.semantic_dim(), || {
            format!("semantic vector has length {}, VAE expects {}", a.len(), self.semantic_dim())
        })
    }

    /// `E(x, a) -> (mu, logvar)`.
    pub fn encode(&self, x: &Array1<f64>, a: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        let input = concatenate(Axis(0), &[x.view(), a.view()]).expect("1-d");
        let h = leaky1(&self.enc_hidden.forward(&input));
        let out = self.enc_out.forward(&h);
        let l = self.latent_dim();
        (out.slice(s![..l]).to_owned(), out.slice(s![l..]).to_owned())
    }

    /// `G(z, a)`.
    pub fn decode(&self, z: &Array1<f64>, a: &Array1<f64>) -> Array1<f64> {
        let input = concatenate(Axis(0), &[z.view(), a.view()]).expect("1-d");
        let h = leaky1(&self.dec_hidden.forward(&input));
        let act = self.output;
        self.dec_out.forward(&h).mapv(|v| act.apply(v))
    }

    /// Loss for one sample with the reparameterisation noise supplied.
    pub fn loss_with_noise(&self, x: &Array1<f64>, a: &Array1<f64>, noise: &Array1<f64>) -> Result<VaeLoss> {
        self.check(x, a)?;
        ensure(noise.len() == self.latent_dim(), || "noise length must equal latent_dim".into())?;
        let (mu, logvar) = self.encode(x, a);
        let z = &mu + &(logvar.mapv(|v| (0.5 * v).exp()) * noise);
        let xh = self.decode(&z, a);
        Ok(make_loss(gaussian_kl(&mu, &logvar), &xh, x))
    }

    /// Accumulates parameter gradients of the total loss into `grad`.
    pub fn loss_and_grad(
        &self,
        x: &Array1<f64>,
        a: &Array1<f64>,
        noise: &Array1<f64>,
        grad: &mut ConditionalVAE,
    ) -> Result<VaeLoss> {
        self.check(x, a)?;
        ensure(noise.len() == self.latent_dim(), || "noise length must equal latent_dim".into())?;
        let l = self.latent_dim();
        let enc_in = concatenate(Axis(0), &[x.view(), a.view()]).expect("1-d");
        let enc_pre = self.enc_hidden.forward(&enc_in);
        let enc_h = leaky1(&enc_pre);
        let enc = self.enc_out.forward(&enc_h);
        let mu = enc.slice(s![..l]).to_owned();
        let logvar = enc.slice(s![l..]).to_owned();
        let std = logvar.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&std * noise);
        let dec_in = concatenate(Axis(0), &[z.view(), a.view()]).expect("1-d");
        let dec_pre = self.dec_hidden.forward(&dec_in);
        let dec_h = leaky1(&dec_pre);
        let act = self.output;
        let xh = self.dec_out.forward(&dec_h).mapv(|v| act.apply(v));
        let loss = make_loss(gaussian_kl(&mu, &logvar), &xh, x);

        let mut dxh = (&xh - x) * 2.0;
        dxh.zip_mut_with(&xh, |g, &o| *g = act.grad(o, *g));
        let dh = self.dec_out.backward(&dec_h, &dxh, &mut grad.dec_out);
        let dpre = leaky1_backward(&dec_pre, &dh);
        let ddec_in = self.dec_hidden.backward(&dec_in, &dpre, &mut grad.dec_hidden);
        let dz = ddec_in.slice(s![..l]).to_owned();
        // KL terms: d/dmu = mu, d/dlogvar = (exp(lv) - 1) / 2
        let dmu = &dz + &mu;
        let dlogvar = &dz * noise * &std * 0.5 + logvar.mapv(|v| 0.5 * (v.exp() - 1.0));
        let denc = concatenate(Axis(0), &[dmu.view(), dlogvar.view()]).expect("1-d");
        let dh = self.enc_out.backward(&enc_h, &denc, &mut grad.enc_out);
        let dpre = leaky1_backward(&enc_pre, &dh);
        self.enc_hidden.backward(&enc_in, &dpre, &mut grad.enc_hidden);
        Ok(loss)
    }
}

fn make_loss(kl: f64, xh: &Array1<f64>, x: &Array1<f64>) -> VaeLoss {
    let recon = xh.iter().zip(x.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    VaeLoss {
        kl,
        recon,
        total: kl + recon,
    }
}

impl Parameters for ConditionalVAE {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut p = prefixed("enc_hidden", self.enc_hidden.params());
        p.extend(prefixed("enc_out", self.enc_out.params()));
        p.extend(prefixed("dec_hidden", self.dec_hidden.params()));
        p.extend(prefixed("dec_out", self.dec_out.params()));
        p
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut p = self.enc_hidden.params_mut();
        p.extend(self.enc_out.params_mut());
        p.extend(self.dec_hidden.params_mut());
        p.extend(self.dec_out.params_mut());
        p
    }
}

fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng))
}

/// KL, reconstruction and total loss for one reparameterised sample.
pub fn vae_loss<R: Rng + ?Sized>(
    vae: &ConditionalVAE,
    x: &Array1<f64>,
    a: &SemanticEmbedding,
    rng: &mut R,
) -> Result<VaeLoss> {
    let noise = standard_normal(vae.latent_dim(), rng);
    vae.loss_with_noise(x, &a.vector, &noise)
}

/// Trains on `(feature, semantic vector)` pairs; returns the model and the
/// mean total loss of every epoch.
pub fn train_vae(features: &[(Array1<f64>, Array1<f64>)], cfg: &VaeConfig) -> Result<(ConditionalVAE, Vec<f64>)> {
    ensure(!features.is_empty(), || "VAE training needs at least one feature".into())?;
    ensure(cfg.latent_dim > 0 && cfg.hidden_dim > 0, || "VAE dimensions must be positive".into())?;
    let (fd, sd) = (features[0].0.len(), features[0].1.len());
    for (x, a) in features {
        ensure(x.len() == fd && a.len() == sd, || "inconsistent feature dimensions".into())?;
    }
    let mut rng = rng_for(cfg.seed, "vae/train");
    let mut vae = ConditionalVAE::new(fd, sd, cfg, &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = VaeLoss::default();
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = vae.zeroed();
            for &i in batch {
                let noise = standard_normal(cfg.latent_dim, &mut rng);
                let l = vae.loss_and_grad(&features[i].0, &features[i].1, &noise, &mut grad)?;
                total.kl += l.kl;
                total.recon += l.recon;
                total.total += l.total;
            }
            grad.scale(1.0 / batch.len() as f64);
            opt.step(&mut vae, &grad);
        }
        let n = features.len() as f64;
        info!(
            "vae epoch {epoch}: total {:.4} (kl {:.4}, recon {:.4})",
            total.total / n,
            total.kl / n,
            total.recon / n
        );
        epochs.push(total.total / n);
    }
    Ok((vae, epochs))
}

/// Mean class feature, with the sampling provenance that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_name: String,
    pub vector: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl ClassPrototype {
    pub fn array(&self) -> Array1<f64> {
        Array1::from(self.vector.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prototype serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Mean of `decoder(z)` over `n_samples` prior draws from a seeded stream.
pub fn mean_of_decoded<F>(decoder: F, latent_dim: usize, n_samples: usize, seed: u64) -> Result<Array1<f64>>
where
    F: Fn(&Array1<f64>) -> Array1<f64>,
{
    ensure(n_samples >= 1, || "n_samples must be at least 1".into())?;
    let mut rng = rng_for(seed, "prototype/samples");
    let mut mean: Option<Array1<f64>> = None;
    for k in 0..n_samples {
        let z = standard_normal(latent_dim, &mut rng);
        let x = decoder(&z);
        match &mut mean {
            None => mean = Some(x),
            Some(m) => m.zip_mut_with(&x, |m, &v| *m += (v - *m) / (k + 1) as f64),
        }
    }
    Ok(mean.expect("n_samples >= 1"))
}

pub fn generate_class_prototype(
    vae: &ConditionalVAE,
    a: &SemanticEmbedding,
    n_samples: usize,
    seed: u64,
) -> Result<ClassPrototype> {
    ensure(a.vector.len() == vae.semantic_dim(), || {
        format!(
            "semantic vector has length {}, VAE expects {}",
            a.vector.len(),
            vae.semantic_dim()
        )
    })?;
    let mean = mean_of_decoded(|z| vae.decode(z, &a.vector), vae.latent_dim(), n_samples, seed)?;
    Ok(ClassPrototype {
        class_name: a.class_name.clone(),
        vector: mean.to_vec(),
        n_samples,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sem(v: Array1<f64>) -> SemanticEmbedding {
        SemanticEmbedding {
            class_name: "grape".into(),
            vector: v,
        }
    }

    fn small_cfg() -> VaeConfig {
        VaeConfig {
            latent_dim: 4,
            hidden_dim: 12,
            epochs: 30,
            batch_size: 8,
            lr: 3e-3,
            output: OutputActivation::Identity,
            ..VaeConfig::default()
        }
    }

    /// Monte-Carlo estimate of KL(q || p) as E_q[log q(z) - log p(z)].
    fn monte_carlo_kl(mu: &Array1<f64>, logvar: &Array1<f64>, n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let mut acc = 0.0;
        for _ in 0..n {
            let mut term = 0.0;
            for (&m, &lv) in mu.iter().zip(logvar.iter()) {
                let e: f64 = StandardNormal.sample(rng);
                let z = m + (0.5 * lv).exp() * e;
                let log_q = -0.5 * (lv + e * e);
                let log_p = -0.5 * z * z;
                term += log_q - log_p;
            }
            acc += term;
        }
        acc / n as f64
    }

    #[test]
    fn kl_is_zero_at_the_prior() {
        let vae = ConditionalVAE::zeros(6, 3, 4, 5);
        let (mu, lv) = vae.encode(&Array1::ones(6), &Array1::ones(3));
        assert!(mu.iter().chain(lv.iter()).all(|&v| v == 0.0));
        let l = vae
            .loss_with_noise(&Array1::zeros(6), &Array1::ones(3), &Array1::ones(4))
            .unwrap();
        assert_eq!(l.kl, 0.0);
    }

    #[test]
    fn kl_closed_form_matches_monte_carlo() {
        let mu = Array1::from_elem(4, 1.0);
        let lv = Array1::zeros(4);
        assert_eq!(gaussian_kl(&mu, &lv), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mc = monte_carlo_kl(&mu, &lv, 100_000, &mut rng);
        assert!((mc - 2.0).abs() / 2.0 < 0.01, "mc {mc}");
    }

    #[test]
    fn perfect_decoder_has_zero_recon() {
        let mut vae = ConditionalVAE::zeros(3, 2, 2, 4);
        vae.output = OutputActivation::Identity;
        let x = Array1::from(vec![0.5, -1.0, 2.0]);
        vae.dec_out.bias.assign(&x);
        let l = vae.loss_with_noise(&x, &Array1::zeros(2), &Array1::ones(2)).unwrap();
        assert_eq!(l.recon, 0.0);
        assert_eq!(l.total, l.kl + l.recon);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for output in [OutputActivation::Identity, OutputActivation::Relu] {
            let cfg = VaeConfig { output, ..small_cfg() };
            let mut vae = ConditionalVAE::new(5, 3, &cfg, &mut rng);
            for mut p in vae.params_mut() {
                if p.ndim() == 1 {
                    p.mapv_inplace(|_| rng.random::<f64>() * 0.2 + 0.05);
                }
            }
            let x = Array1::from_shape_fn(5, |_| rng.random::<f64>());
            let a = Array1::from_shape_fn(3, |_| rng.random::<f64>() - 0.5);
            let noise = standard_normal(4, &mut rng);
            let mut grad = vae.zeroed();
            vae.loss_and_grad(&x, &a, &noise, &mut grad).unwrap();
            let n = vae.params().len();
            for pi in 0..n {
                let g = grad.params()[pi].1.to_owned();
                for probe in [0, g.len() / 2, g.len() - 1] {
                    let eps = 1e-6;
                    let mut plus = vae.clone();
                    plus.params_mut()[pi].as_slice_mut().unwrap()[probe] += eps;
                    let mut minus = vae.clone();
                    minus.params_mut()[pi].as_slice_mut().unwrap()[probe] -= eps;
                    let fd = (plus.loss_with_noise(&x, &a, &noise).unwrap().total
                        - minus.loss_with_noise(&x, &a, &noise).unwrap().total)
                        / (2.0 * eps);
                    let an = g.as_slice().unwrap()[probe];
                    let scale = fd.abs().max(an.abs());
                    if scale < 1e-8 {
                        continue;
                    }
                    let name = &grad.params()[pi].0;
                    assert!((fd - an).abs() / scale < 1e-4, "{name}[{probe}]: {an} vs {fd}");
                }
            }
        }
    }

    fn toy_features() -> Vec<(Array1<f64>, Array1<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        (0..60)
            .map(|i| {
                let c = (i % 3) as f64;
                let a = Array1::from(vec![c, 1.0 - c, 0.5]);
                let x = Array1::from_shape_fn(5, |j| c * j as f64 * 0.3 + 0.1 * rng.random::<f64>());
                (x, a)
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let feats = toy_features();
        let (vae, losses) = train_vae(&feats, &small_cfg()).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
        let (again, _) = train_vae(&feats, &small_cfg()).unwrap();
        assert_eq!(vae, again);
        assert!(train_vae(&[], &small_cfg()).is_err());
    }

    #[test]
    fn constant_decoder_gives_constant_prototype() {
        let mut vae = ConditionalVAE::zeros(3, 2, 4, 6);
        let c = Array1::from(vec![0.25, 1.5, 0.0]);
        vae.dec_out.bias.assign(&c);
        for n in [1, 7, 64] {
            let p = generate_class_prototype(&vae, &sem(Array1::ones(2)), n, 3).unwrap();
            assert_eq!(p.array(), c);
            assert_eq!(p.n_samples, n);
        }
        assert!(generate_class_prototype(&vae, &sem(Array1::ones(2)), 0, 3).is_err());
    }

    #[test]
    fn prototype_matches_loop_and_average() {
        let feats = toy_features();
        let (vae, _) = train_vae(&feats, &VaeConfig { epochs: 2, ..small_cfg() }).unwrap();
        let a = sem(Array1::from(vec![1.0, 0.0, 0.5]));
        let p = generate_class_prototype(&vae, &a, 256, 11).unwrap();
        let mut rng = rng_for(11, "prototype/samples");
        let mut sum = Array1::<f64>::zeros(5);
        let mut samples = Vec::new();
        for _ in 0..256 {
            let z = standard_normal(4, &mut rng);
            let x = vae.decode(&z, &a.vector);
            sum += &x;
            samples.push(x);
        }
        let oracle = sum / 256.0;
        for (u, v) in p.vector.iter().zip(oracle.iter()) {
            assert!((u - v).abs() < 1e-9);
        }
        // n = 1 is the single decoded sample
        let one = generate_class_prototype(&vae, &a, 1, 11).unwrap();
        assert_eq!(one.array(), samples[0]);
        // permutation invariance of the mean
        samples.reverse();
        let rev = samples.iter().fold(Array1::<f64>::zeros(5), |acc, x| acc + x) / 256.0;
        for (u, v) in p.vector.iter().zip(rev.iter()) {
            assert!((u - v).abs() < 1e-9);
        }
        assert_eq!(p, generate_class_prototype(&vae, &a, 256, 11).unwrap());
    }

    #[test]
    fn linear_decoder_prototype_is_within_monte_carlo_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (l, sd, fd) = (6, 3, 5);
        let w = Array2::from_shape_fn((fd, l), |_| rng.random::<f64>() - 0.5);
        let u = Array2::from_shape_fn((fd, sd), |_| rng.random::<f64>() - 0.5);
        let c = Array1::from_shape_fn(fd, |_| rng.random::<f64>());
        let a = Array1::from(vec![0.3, -0.2, 0.9]);
        let n = 4096;
        let p = mean_of_decoded(|z| w.dot(z) + u.dot(&a) + &c, l, n, 17).unwrap();
        let expected = u.dot(&a) + &c;
        for i in 0..fd {
            // the i-th output has variance sum_j W_ij^2
            let sigma_mc = (w.row(i).dot(&w.row(i)) / n as f64).sqrt();
            assert!((p[i] - expected[i]).abs() < 5.0 * sigma_mc);
        }
    }

    #[test]
    fn prototype_json_round_trip() {
        let p = ClassPrototype {
            class_name: "grape".into(),
            vector: vec![0.1, 1.0 / 3.0],
            n_samples: 256,
            seed: 4,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        assert_eq!(ClassPrototype::load(&path).unwrap(), p);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(v in proptest::collection::vec((-3.0f64..3.0, -4.0f64..4.0), 1..8)) {
            let mu = Array1::from_iter(v.iter().map(|p| p.0));
            let lv = Array1::from_iter(v.iter().map(|p| p.1));
            prop_assert!(gaussian_kl(&mu, &lv) >= 0.0);
        }
    }
}
