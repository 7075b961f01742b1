//! Minimal 64-bit neural-network toolkit: layers with hand-written backward
//! passes, a parameter-visiting trait and Adam/AdamW.

mod layers;
mod optim;

pub use layers::*;
pub use optim::Adam;

use ndarray::{Array3, ArrayViewD, ArrayViewMutD};

/// Named, ordered access to every trainable tensor of a model.
///
/// A gradient is stored in a value of the model's own type, so `params()` of
/// the gradient and `params_mut()` of the model line up element for element.
pub trait Parameters {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>>;

    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut g = self.clone();
        for mut p in g.params_mut() {
            p.fill(0.0);
        }
        g
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.params();
        for (mut dst, (_, src)) in self.params_mut().into_iter().zip(src) {
            dst += &src;
        }
    }

    fn scale(&mut self, factor: f64) {
        for mut p in self.params_mut() {
            p.mapv_inplace(|v| v * factor);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Prefixes sub-module parameter names, e.g. `conv0.weight`.
pub fn prefixed<'a>(
    prefix: &str,
    params: Vec<(String, ArrayViewD<'a, f64>)>,
) -> Vec<(String, ArrayViewD<'a, f64>)> {
    params
        .into_iter()
        .map(|(n, p)| (format!("{prefix}.{n}"), p))
        .collect()
}

/// Stack of convolutions, each followed by ReLU except optionally the last.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvChain {
    pub layers: Vec<Conv2d>,
    pub relu_last: bool,
}

#[derive(Clone, Debug)]
pub struct ChainCache {
    caches: Vec<ConvCache>,
    outputs: Vec<Array3<f64>>,
}

impl ConvChain {
    fn relu_at(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_last
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut h = x.clone();
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(&h);
            if self.relu_at(i) {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    pub fn forward_train(&self, x: &Array3<f64>) -> (Array3<f64>, ChainCache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (i, conv) in self.layers.iter().enumerate() {
            let (mut y, cache) = conv.forward_train(&h);
            if self.relu_at(i) {
                y.mapv_inplace(|v| v.max(0.0));
            }
            caches.push(cache);
            outputs.push(y.clone());
            h = y;
        }
        (h, ChainCache { caches, outputs })
    }

    pub fn backward(
        &self,
        cache: &ChainCache,
        grad_out: &Array3<f64>,
        grad: &mut ConvChain,
        need_input: bool,
    ) -> Option<Array3<f64>> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if self.relu_at(i) {
                g = relu3_backward(&cache.outputs[i], &g);
            }
            let want = i > 0 || need_input;
            match self.layers[i].backward(&cache.caches[i], &g, &mut grad.layers[i], want) {
                Some(dx) => g = dx,
                None => return None,
            }
        }
        Some(g)
    }
}

impl Parameters for ConvChain {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("conv{i}"), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
