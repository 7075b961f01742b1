//! Layers with explicit forward/backward passes over `(channels, height, width)`
//! activations. Every layer keeps its parameters as plain `ndarray` arrays so a
//! model of the same type doubles as its own gradient accumulator.

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Parameters;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `(out, in, k, k)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// Saved state for [`Conv2d::backward`].
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// He-normal initialisation, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Array4::from_shape_fn((out_ch, in_ch, kernel, kernel), |_| {
            let v: f64 = StandardNormal.sample(rng);
            v * std
        });
        Conv2d {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
            padding,
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Array4::zeros((out_ch, in_ch, kernel, kernel)),
            bias: Array1::zeros(out_ch),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let oh = (h + 2 * self.padding - k) / self.stride + 1;
        let ow = (w + 2 * self.padding - k) / self.stride + 1;
        (oh, ow)
    }

    fn weight_matrix(&self) -> Array2<f64> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("conv weight is contiguous")
            .to_owned()
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let cols = im2col(x, self.kernel(), self.stride, self.padding, oh, ow);
        let mut out = self.weight_matrix().dot(&cols);
        for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += *b;
        }
        let out = out
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("conv output reshape");
        (
            out,
            ConvCache {
                cols,
                in_dim: (c, h, w),
                out_hw: (oh, ow),
            },
        )
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &Array3<f64>,
        grad: &mut Conv2d,
        need_input: bool,
    ) -> Option<Array3<f64>> {
        let (oh, ow) = cache.out_hw;
        let go = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels(), oh * ow))
            .expect("grad reshape");
        let gw = go.dot(&cache.cols.t());
        let (o, i, k, _) = self.weight.dim();
        let gw = gw
            .into_shape_with_order((o, i, k, k))
            .expect("weight grad reshape");
        grad.weight += &gw;
        grad.bias += &go.sum_axis(Axis(1));
        if !need_input {
            return None;
        }
        let dcols = self.weight_matrix().t().dot(&go);
        Some(col2im(&dcols, cache.in_dim, k, self.stride, self.padding, oh, ow))
    }
}

impl Parameters for Conv2d {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![self.weight.view_mut().into_dyn(), self.bias.view_mut().into_dyn()]
    }
}

fn im2col(x: &Array3<f64>, k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let base = ((ci * k + ki) * k + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (ci * h + iy as usize) * w;
                    let dst = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            cs[dst + ox] = xs[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    (c, h, w): (usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut out = Array3::zeros((c, h, w));
    let os = out.as_slice_mut().expect("fresh array");
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let base = ((ci * k + ki) * k + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + iy as usize) * w;
                    let src = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            os[dst + ix as usize] += cs[src + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (2.0 / input as f64).sqrt();
        let weight = Array2::from_shape_fn((output, input), |_| {
            let v: f64 = StandardNormal.sample(rng);
            v * std
        });
        Linear {
            weight,
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dim().1
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dim().0
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(&self, x: &Array1<f64>, grad_out: &Array1<f64>, grad: &mut Linear) -> Array1<f64> {
        for (mut row, g) in grad.weight.axis_iter_mut(Axis(0)).zip(grad_out.iter()) {
            row.scaled_add(*g, x);
        }
        grad.bias += grad_out;
        self.weight.t().dot(grad_out)
    }
}

impl Parameters for Linear {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![self.weight.view_mut().into_dyn(), self.bias.view_mut().into_dyn()]
    }
}

pub fn relu3(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its *output*.
pub fn relu3_backward(out: &Array3<f64>, grad: &Array3<f64>) -> Array3<f64> {
    let mut g = grad.clone();
    g.zip_mut_with(out, |g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

pub fn relu1(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu1_backward(out: &Array1<f64>, grad: &Array1<f64>) -> Array1<f64> {
    let mut g = grad.clone();
    g.zip_mut_with(out, |g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky1(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Gradient of LeakyReLU given its *input*.
pub fn leaky1_backward(input: &Array1<f64>, grad: &Array1<f64>) -> Array1<f64> {
    let mut g = grad.clone();
    g.zip_mut_with(input, |g, &x| {
        if x <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    });
    g
}

/// Spatial mean per channel.
pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = x.dim();
    let n = (h * w) as f64;
    Array1::from_shape_fn(c, |ci| x.index_axis(Axis(0), ci).sum() / n)
}

pub fn global_avg_pool_backward(grad: &Array1<f64>, h: usize, w: usize) -> Array3<f64> {
    let n = (h * w) as f64;
    Array3::from_shape_fn((grad.len(), h, w), |(c, _, _)| grad[c] / n)
}

/// Per-axis sampling table for half-pixel-centred bilinear interpolation.
#[derive(Clone, Debug)]
struct AxisInterp {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisInterp {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (src.floor() as usize).min(in_len - 1);
            let h = (l + 1).min(in_len - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { src - l as f64 });
        }
        AxisInterp { lo, hi, frac }
    }
}

/// Bilinear resampling of every channel to `(out_h, out_w)`.
pub fn bilinear_resize(x: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let ay = AxisInterp::new(h, out_h);
    let ax = AxisInterp::new(w, out_w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ci in 0..c {
        let src = x.index_axis(Axis(0), ci);
        let mut dst = out.index_axis_mut(Axis(0), ci);
        for oy in 0..out_h {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
                let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
                dst[[oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_resize_backward(grad: &Array3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let (c, out_h, out_w) = grad.dim();
    let ay = AxisInterp::new(in_h, out_h);
    let ax = AxisInterp::new(in_w, out_w);
    let mut out = Array3::zeros((c, in_h, in_w));
    for ci in 0..c {
        let g = grad.index_axis(Axis(0), ci);
        let mut dst = out.index_axis_mut(Axis(0), ci);
        for oy in 0..out_h {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let v = g[[oy, ox]];
                dst[[y0, x0]] += v * (1.0 - fy) * (1.0 - fx);
                dst[[y0, x1]] += v * (1.0 - fy) * fx;
                dst[[y1, x0]] += v * fy * (1.0 - fx);
                dst[[y1, x1]] += v * fy * fx;
            }
        }
    }
    out
}

/// Crops (bottom/right) or zero-pads to exactly `(h, w)`.
pub fn fit_to(x: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, xh, xw) = x.dim();
    let mut out = Array3::zeros((c, h, w));
    let ch = h.min(xh);
    let cw = w.min(xw);
    out.slice_mut(ndarray::s![.., ..ch, ..cw])
        .assign(&x.slice(ndarray::s![.., ..ch, ..cw]));
    out
}

/// Adaptive average pooling of a `(c, h, w)` map onto an `(oh, ow)` grid,
/// using bins `[floor(i*h/oh), ceil((i+1)*h/oh))`.
pub fn adaptive_avg_pool(x: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        for i in 0..oh {
            let (y0, y1) = bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = bin(j, w, ow);
                let cell = x.slice(ndarray::s![ci, y0..y1, x0..x1]);
                out[[ci, i, j]] = cell.sum() / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(grad: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, oh, ow) = grad.dim();
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..oh {
            let (y0, y1) = bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = bin(j, w, ow);
                let g = grad[[ci, i, j]] / ((y1 - y0) * (x1 - x0)) as f64;
                out.slice_mut(ndarray::s![ci, y0..y1, x0..x1])
                    .mapv_inplace(|v| v + g);
            }
        }
    }
    out
}

fn bin(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end.max(start + 1).min(len.max(1)))
}

/// Mean softmax cross-entropy of one logit vector; returns `(loss, dlogits)`.
pub fn softmax_cross_entropy(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps = logits.mapv(|v| (v - max).exp());
    let z = exps.sum();
    let probs = exps / z;
    let loss = -(probs[label].max(1e-300)).ln();
    let mut grad = probs;
    grad[label] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(c: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let (oh, ow) = c.out_size(h, w);
        let k = c.kernel();
        Array3::from_shape_fn((c.out_channels(), oh, ow), |(o, oy, ox)| {
            let mut acc = c.bias[o];
            for i in 0..c.in_channels() {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * c.stride + ki) as isize - c.padding as isize;
                        let ix = (ox * c.stride + kj) as isize - c.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += c.weight[[o, i, ki, kj]] * x[[i, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let conv = Conv2d::new(3, 4, 3, stride, pad, &mut rng);
            let x = Array3::from_shape_fn((3, 7, 9), |_| rng.random::<f64>() - 0.5);
            let a = conv.forward(&x);
            let b = naive_conv(&conv, &x);
            assert_eq!(a.dim(), b.dim());
            for (p, q) in a.iter().zip(b.iter()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_input_gradient_is_adjoint() {
        // <conv(x) - b, g> is linear in x, so <dx, v> must equal <conv(v) - b, g>.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = Array3::from_shape_fn((2, 8, 6), |_| rng.random::<f64>());
        let v = Array3::from_shape_fn((2, 8, 6), |_| rng.random::<f64>());
        let (y, cache) = conv.forward_train(&x);
        let g = Array3::from_shape_fn(y.dim(), |_| rng.random::<f64>());
        let mut grad = conv.zeroed();
        let dx = conv.backward(&cache, &g, &mut grad, true).unwrap();
        let mut cv = conv.forward(&v);
        for (o, mut ch) in cv.axis_iter_mut(Axis(0)).enumerate() {
            ch -= conv.bias[o];
        }
        let lhs: f64 = (&dx * &v).sum();
        let rhs: f64 = (&cv * &g).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array3::from_shape_fn((2, 5, 7), |_| rng.random::<f64>());
        let g = Array3::from_shape_fn((2, 10, 14), |_| rng.random::<f64>());
        let y = bilinear_resize(&x, 10, 14);
        let dx = bilinear_resize_backward(&g, 5, 7);
        let lhs = (&y * &g).sum();
        let rhs = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f64);
        assert_eq!(bilinear_resize(&x, 4, 4), x);
        let c = Array3::from_elem((2, 3, 5), 0.25);
        assert!(bilinear_resize(&c, 11, 2).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn adaptive_pool_adjoint_and_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array3::from_shape_fn((1, 10, 10), |_| rng.random::<f64>());
        let y = adaptive_avg_pool(&x, 5, 5);
        assert!((y[[0, 0, 0]] - x.slice(ndarray::s![0, 0..2, 0..2]).mean().unwrap()).abs() < 1e-15);
        let g = Array3::from_shape_fn((1, 5, 5), |_| rng.random::<f64>());
        let dx = adaptive_avg_pool_backward(&g, 10, 10);
        assert!(((&y * &g).sum() - (&x * &dx).sum()).abs() < 1e-12);
        // Overlapping bins when the input is smaller than twice the grid.
        let small = Array3::from_elem((1, 3, 3), 1.0);
        assert!(adaptive_avg_pool(&small, 5, 5).iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let logits = Array1::from(vec![0.3, -1.2, 2.0]);
        let (loss, g) = softmax_cross_entropy(&logits, 2);
        assert!(loss > 0.0);
        assert!(g.sum().abs() < 1e-12);
    }
}
