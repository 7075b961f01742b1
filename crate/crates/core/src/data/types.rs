use std::fmt;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::data::density::{render_density_target, DensityMap};
use crate::error::{ensure, Error, Result};
use crate::nn::bilinear_resize;

/// Half-open integer box `[x1, x2) x [y1, y2)` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[u32; 4]", try_from = "[u32; 4]")]
pub struct BoundingBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BoundingBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        ensure(x1 < x2 && y1 < y2, || {
            format!("degenerate box [{x1}, {y1}, {x2}, {y2}]")
        })?;
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x1 + self.x2) as f64 / 2.0,
            (self.y1 + self.y2) as f64 / 2.0,
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 as f64 && x < self.x2 as f64 && y >= self.y1 as f64 && y < self.y2 as f64
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && self.x2 as usize <= width
            && self.y2 as usize <= height
    }

    pub(crate) fn check_in(&self, height: usize, width: usize) -> Result<()> {
        ensure(self.fits_in(height, width), || {
            format!("box {self} outside {height}x{width} image or degenerate")
        })
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2)
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl TryFrom<[u32; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [u32; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

/// RGB image stored channel-first, `(3, H, W)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Array3<f64>);

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        ensure(c == 3 && h > 0 && w > 0, || {
            format!("image must be (3, H, W) with H, W > 0, got ({c}, {h}, {w})")
        })?;
        ensure(
            pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            || "pixel values must lie in [0, 1]".into(),
        )?;
        Ok(Image(pixels))
    }

    pub(crate) fn from_raw(pixels: Array3<f64>) -> Self {
        Image(pixels)
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.0
    }

    /// Crop `bbox` and resample it bilinearly to `(out_h, out_w)`.
    pub fn crop_resized(&self, bbox: &BoundingBox, out_h: usize, out_w: usize) -> Result<Array3<f64>> {
        bbox.check_in(self.height(), self.width())?;
        let crop = self
            .0
            .slice(s![
                ..,
                bbox.y1 as usize..bbox.y2 as usize,
                bbox.x1 as usize..bbox.x2 as usize
            ])
            .to_owned();
        Ok(bilinear_resize(&crop, out_h, out_w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

/// One drawn object, target or distractor. Only synthetic data carries these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_name: String,
    pub bbox: BoundingBox,
    pub center: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Image,
    pub class_name: String,
    /// Object centres `(x, y)` of the target class.
    pub dots: Vec<(f64, f64)>,
    pub gt_boxes: Vec<BoundingBox>,
    pub split: Split,
    pub instances: Vec<Instance>,
}

impl ImageRecord {
    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    /// Ground-truth object count.
    pub fn count(&self) -> usize {
        self.dots.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for &(x, y) in &self.dots {
            ensure(
                x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64,
                || format!("dot ({x}, {y}) outside {h}x{w} image"),
            )?;
        }
        for b in &self.gt_boxes {
            b.check_in(h, w)?;
        }
        for inst in &self.instances {
            inst.bbox.check_in(h, w)?;
        }
        Ok(())
    }

    pub fn density_target(&self, sigma: f64) -> Result<DensityMap> {
        render_density_target(&self.dots, self.height(), self.width(), sigma)
    }

    /// Boxes of target-class instances, when known.
    pub fn target_instances(&self) -> impl Iterator<Item = &Instance> {
        self.instances
            .iter()
            .filter(move |i| i.class_name == self.class_name)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitClasses {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitClasses {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub(crate) fn get_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn disjoint(&self) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        self.all().all(|c| seen.insert(c))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub classes: SplitClasses,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &[ImageRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub(crate) fn split_mut(&mut self, split: Split) -> &mut Vec<ImageRecord> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
