use ndarray::Array2;

use crate::error::{ensure, Result};

/// Per-pixel object density; its sum is the object count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    values: Array2<f64>,
}

impl DensityMap {
    pub fn new(values: Array2<f64>) -> Self {
        DensityMap { values }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DensityMap::new(Array2::zeros((height, width)))
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.sum()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }
}

/// Truncation radius of each Gaussian kernel, in units of sigma.
pub const KERNEL_TRUNCATION: f64 = 4.0;

/// One isotropic Gaussian per dot, evaluated at pixel centres, truncated at
/// `4 sigma` (and at the image border) and renormalised to unit mass.
pub fn render_density_target(
    dots: &[(f64, f64)],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<DensityMap> {
    ensure(sigma > 0.0 && sigma.is_finite(), || format!("sigma must be positive, got {sigma}"))?;
    ensure(height > 0 && width > 0, || "density map must be non-empty".into())?;
    let mut map = Array2::<f64>::zeros((height, width));
    let radius = KERNEL_TRUNCATION * sigma;
    let mut kernel: Vec<(usize, usize, f64)> = Vec::new();
    for &(x, y) in dots {
        ensure(
            x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64,
            || format!("dot ({x}, {y}) outside {height}x{width} map"),
        )?;
        kernel.clear();
        let r0 = ((y - radius).floor().max(0.0)) as usize;
        let r1 = ((y + radius).ceil() as usize).min(height - 1);
        let c0 = ((x - radius).floor().max(0.0)) as usize;
        let c1 = ((x + radius).ceil() as usize).min(width - 1);
        let mut total = 0.0;
        for i in r0..=r1 {
            let dy = i as f64 + 0.5 - y;
            for j in c0..=c1 {
                let dx = j as f64 + 0.5 - x;
                let d2 = dx * dx + dy * dy;
                if d2 <= radius * radius {
                    let v = (-d2 / (2.0 * sigma * sigma)).exp();
                    total += v;
                    kernel.push((i, j, v));
                }
            }
        }
        if total > 0.0 {
            for &(i, j, v) in &kernel {
                map[[i, j]] += v / total;
            }
        } else {
            // sigma far below a pixel: all mass lands on the containing pixel
            map[[y as usize, x as usize]] += 1.0;
        }
    }
    Ok(DensityMap::new(map))
}

/// Mass-preserving area-weighted resampling to `(height, width)`.
pub fn resize_density(map: &DensityMap, height: usize, width: usize) -> DensityMap {
    let wy = area_weights(map.height(), height);
    let wx = area_weights(map.width(), width);
    DensityMap::new(wy.dot(map.values()).dot(&wx.t()))
}

/// `(out, in)` matrix: share of input cell `p` that falls in output cell `o`.
fn area_weights(in_len: usize, out_len: usize) -> Array2<f64> {
    let scale = out_len as f64 / in_len as f64;
    let mut w = Array2::zeros((out_len, in_len));
    for p in 0..in_len {
        let a = p as f64 * scale;
        let b = (p + 1) as f64 * scale;
        let first = a.floor() as usize;
        let last = (b.ceil() as usize).min(out_len);
        for o in first..last {
            let overlap = (b.min((o + 1) as f64) - a.max(o as f64)).max(0.0);
            w[[o, p]] = overlap / scale;
        }
    }
    w
}
