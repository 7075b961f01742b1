//! Class heatmaps: exemplar embeddings correlated against a dense grid of
//! patch embeddings.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{Array1, Array2};

use crate::data::io::save_rgb;
use crate::data::{BoundingBox, Image};
use crate::embedding::{embed_patch, EmbeddingNetwork};
use crate::error::{ensure, Result};

pub const HEATMAP_STRIDE: usize = 8;

/// Box of side `side` centred on the grid cell `(i, j)`, shifted to lie
/// inside the image.
fn cell_box(i: usize, j: usize, side: usize, h: usize, w: usize) -> BoundingBox {
    let half = side / 2;
    let cy = i * HEATMAP_STRIDE + HEATMAP_STRIDE / 2;
    let cx = j * HEATMAP_STRIDE + HEATMAP_STRIDE / 2;
    let y1 = cy.saturating_sub(half).min(h - side);
    let x1 = cx.saturating_sub(half).min(w - side);
    BoundingBox::new(x1 as u32, y1 as u32, (x1 + side) as u32, (y1 + side) as u32).expect("side is positive")
}

/// Raw correlation on the stride-8 grid: the dot product of each cell's
/// patch embedding with the mean exemplar embedding. Patches take the mean
/// exemplar side length.
pub fn correlation_grid(image: &Image, exemplars: &[BoundingBox], net: &EmbeddingNetwork) -> Result<Array2<f64>> {
    ensure(!exemplars.is_empty(), || "heatmap needs at least one exemplar".into())?;
    let (h, w) = (image.height(), image.width());
    let mut mean = Array1::<f64>::zeros(net.embedding_dim());
    let mut side = 0.0;
    for b in exemplars {
        mean += &embed_patch(net, image, b)?;
        side += (b.width() + b.height()) as f64 / 2.0;
    }
    mean /= exemplars.len() as f64;
    let side = ((side / exemplars.len() as f64).round() as usize).clamp(2, h.min(w));
    let (gh, gw) = (h.div_ceil(HEATMAP_STRIDE), w.div_ceil(HEATMAP_STRIDE));
    let mut grid = Array2::zeros((gh, gw));
    for i in 0..gh {
        for j in 0..gw {
            let e = embed_patch(net, image, &cell_box(i, j, side, h, w))?;
            grid[[i, j]] = e.dot(&mean);
        }
    }
    Ok(grid)
}

/// Normalised correlation grid and which cells survive the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHeatmap {
    pub normalized: Array2<f64>,
    pub keep: Array2<bool>,
}

impl ClassHeatmap {
    /// Normalised values with masked cells set to zero.
    pub fn masked(&self) -> Array2<f64> {
        let mut out = self.normalized.clone();
        out.zip_mut_with(&self.keep, |v, &k| {
            if !k {
                *v = 0.0
            }
        });
        out
    }
}

/// Min-max normalises to `[0, 1]` and masks every cell below `threshold`.
/// A constant map normalises to all ones.
pub fn normalize_and_mask(grid: &Array2<f64>, threshold: f64) -> ClassHeatmap {
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized = grid.mapv(|v| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 });
    let keep = normalized.mapv(|v| v >= threshold);
    ClassHeatmap { normalized, keep }
}

fn colormap(t: f64) -> [f64; 3] {
    let ramp = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Overlay at image resolution: masked cells are darkened, surviving cells
/// are blended with a colour map of their value.
pub fn overlay(image: &Image, heatmap: &ClassHeatmap) -> RgbImage {
    let px = image.pixels();
    ImageBuffer::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let cell = [y / HEATMAP_STRIDE, x / HEATMAP_STRIDE];
        let c = colormap(heatmap.normalized[cell]);
        let kept = heatmap.keep[cell];
        let mut out = [0u8; 3];
        for k in 0..3 {
            let p = px[[k, y, x]];
            let blended = if kept { 0.5 * p + 0.5 * c[k] } else { 0.3 * p };
            out[k] = (blended * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

/// Computes the heatmap of `image` for `exemplars` and writes the overlay
/// PNG to `path`.
pub fn emit_class_heatmap(
    image: &Image,
    exemplars: &[BoundingBox],
    net: &EmbeddingNetwork,
    threshold: f64,
    path: &Path,
) -> Result<ClassHeatmap> {
    ensure((0.0..=1.0).contains(&threshold), || format!("threshold {threshold} outside [0, 1]"))?;
    let heatmap = normalize_and_mask(&correlation_grid(image, exemplars, net)?, threshold);
    save_rgb(&overlay(image, &heatmap), path)?;
    Ok(heatmap)
}
