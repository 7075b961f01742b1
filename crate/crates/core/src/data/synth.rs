//! Procedural counting dataset: each class is a (hue, texture, shape) tuple and
//! every image holds several instances of one target class among distractors
//! of other classes from the same split.

use std::collections::BTreeSet;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::types::{BoundingBox, DatasetBundle, Image, ImageRecord, Instance, Split, SplitClasses};
use crate::error::{ensure, Result};
use crate::seeding::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
    Cross,
    Star,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Hue {
    Red,
    Yellow,
    Green,
    Cyan,
    Blue,
    Magenta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Texture {
    Solid,
    Striped,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Disc,
        Shape::Square,
        Shape::Triangle,
        Shape::Ring,
        Shape::Cross,
        Shape::Star,
    ];

    fn name(self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
            Shape::Star => "star",
        }
    }

    /// Point test in unit-radius local coordinates (`y` grows downwards).
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            Shape::Disc => x * x + y * y <= 1.0,
            Shape::Square => x.abs() <= 0.82 && y.abs() <= 0.82,
            Shape::Triangle => {
                // apex up, base at y = 0.8
                y <= 0.8 && y >= -1.0 && x.abs() <= (y + 1.0) * 0.5774
            }
            Shape::Ring => {
                let r2 = x * x + y * y;
                (0.3..=1.0).contains(&r2)
            }
            Shape::Cross => {
                (x.abs() <= 0.34 && y.abs() <= 1.0) || (y.abs() <= 0.34 && x.abs() <= 1.0)
            }
            Shape::Star => {
                let r = (x * x + y * y).sqrt();
                if r > 1.0 {
                    return false;
                }
                let theta = y.atan2(x) + std::f64::consts::FRAC_PI_2;
                let sector = std::f64::consts::TAU / 5.0;
                let t = (theta.rem_euclid(sector) / sector - 0.5).abs() * 2.0;
                // t = 1 at a spike tip, 0 between spikes
                r <= 0.42 + 0.58 * t
            }
        }
    }
}

impl Hue {
    pub const ALL: [Hue; 6] = [Hue::Red, Hue::Yellow, Hue::Green, Hue::Cyan, Hue::Blue, Hue::Magenta];

    fn name(self) -> &'static str {
        match self {
            Hue::Red => "red",
            Hue::Yellow => "yellow",
            Hue::Green => "green",
            Hue::Cyan => "cyan",
            Hue::Blue => "blue",
            Hue::Magenta => "magenta",
        }
    }

    fn degrees(self) -> f64 {
        match self {
            Hue::Red => 0.0,
            Hue::Yellow => 60.0,
            Hue::Green => 120.0,
            Hue::Cyan => 180.0,
            Hue::Blue => 240.0,
            Hue::Magenta => 300.0,
        }
    }
}

impl Texture {
    pub const ALL: [Texture; 2] = [Texture::Solid, Texture::Striped];

    fn name(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Striped => "striped",
        }
    }
}

/// A synthetic object class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassSpec {
    pub hue: Hue,
    pub texture: Texture,
    pub shape: Shape,
}

impl ClassSpec {
    /// Every class the generator can draw, in a fixed order.
    pub fn catalogue() -> Vec<ClassSpec> {
        let mut out = Vec::new();
        for &shape in &Shape::ALL {
            for &hue in &Hue::ALL {
                for &texture in &Texture::ALL {
                    out.push(ClassSpec { hue, texture, shape });
                }
            }
        }
        out
    }

    /// `hue-texture-shape`, e.g. `red-striped-star`.
    pub fn name(&self) -> String {
        format!("{}-{}-{}", self.hue.name(), self.texture.name(), self.shape.name())
    }

    pub fn parse(name: &str) -> Option<ClassSpec> {
        ClassSpec::catalogue().into_iter().find(|c| c.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// `(train, val, test)` image counts.
    pub images_per_split: (usize, usize, usize),
    /// `(height, width)`
    pub image_size: (usize, usize),
    /// Inclusive range of target instances per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of object radii in pixels.
    pub object_scale: (f64, f64),
    pub distractor_classes_per_image: (usize, usize),
    /// Inclusive range of instances per distractor class.
    pub distractors_per_class: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 36,
            images_per_split: (120, 36, 36),
            image_size: (80, 80),
            objects_per_image: (3, 10),
            object_scale: (4.5, 6.5),
            distractor_classes_per_image: (1, 2),
            distractors_per_class: (2, 4),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let max_classes = ClassSpec::catalogue().len();
        ensure(self.num_classes >= 3 && self.num_classes <= max_classes, || {
            format!("num_classes must be in [3, {max_classes}], got {}", self.num_classes)
        })?;
        let (lo, hi) = self.objects_per_image;
        ensure(lo >= 1 && lo <= hi, || format!("objects_per_image range [{lo}, {hi}] is empty or zero"))?;
        let (rlo, rhi) = self.object_scale;
        ensure(rlo >= 1.0 && rlo <= rhi, || format!("object_scale range [{rlo}, {rhi}] is invalid"))?;
        let (h, w) = self.image_size;
        ensure(h as f64 > 2.0 * rhi + 2.0 && w as f64 > 2.0 * rhi + 2.0, || {
            format!("image {h}x{w} too small for objects of radius {rhi}")
        })?;
        let (dlo, dhi) = self.distractor_classes_per_image;
        ensure(dlo <= dhi, || format!("distractor_classes_per_image range [{dlo}, {dhi}] is empty"))?;
        let (plo, phi) = self.distractors_per_class;
        ensure(plo <= phi, || format!("distractors_per_class range [{plo}, {phi}] is empty"))?;
        Ok(())
    }

    /// `(train, val, test)` class counts: `max(1, n/6)` each for val and test.
    pub fn class_split(&self) -> (usize, usize, usize) {
        let held = (self.num_classes / 6).max(1);
        (self.num_classes - 2 * held, held, held)
    }
}

/// Picks the split class lists, preferring assignments where every attribute
/// of a held-out class also occurs in some training class.
fn choose_classes(spec: &SyntheticSpec) -> SplitClasses {
    let mut rng = rng_for(spec.seed, "synth/classes");
    let (n_train, n_val, _) = spec.class_split();
    let mut best: Option<(usize, Vec<ClassSpec>)> = None;
    for _ in 0..500 {
        let mut cat = ClassSpec::catalogue();
        cat.shuffle(&mut rng);
        cat.truncate(spec.num_classes);
        let (train, held) = cat.split_at(n_train);
        let shapes: BTreeSet<_> = train.iter().map(|c| c.shape).collect();
        let hues: BTreeSet<_> = train.iter().map(|c| c.hue).collect();
        let textures: BTreeSet<_> = train.iter().map(|c| c.texture).collect();
        let uncovered = held
            .iter()
            .map(|c| {
                usize::from(!shapes.contains(&c.shape))
                    + usize::from(!hues.contains(&c.hue))
                    + usize::from(!textures.contains(&c.texture))
            })
            .sum::<usize>();
        if best.as_ref().is_none_or(|(u, _)| uncovered < *u) {
            best = Some((uncovered, cat));
        }
        if uncovered == 0 {
            break;
        }
    }
    let cat = best.expect("at least one attempt").1;
    let names: Vec<String> = cat.iter().map(ClassSpec::name).collect();
    SplitClasses {
        train: names[..n_train].to_vec(),
        val: names[n_train..n_train + n_val].to_vec(),
        test: names[n_train + n_val..].to_vec(),
    }
}

/// Generates the full bundle. Output depends only on `spec`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let classes = choose_classes(spec);
    let mut bundle = DatasetBundle {
        classes,
        ..Default::default()
    };
    let counts = [
        spec.images_per_split.0,
        spec.images_per_split.1,
        spec.images_per_split.2,
    ];
    for (split, &n) in Split::ALL.iter().zip(&counts) {
        let names = bundle.classes.get(*split).to_vec();
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let target = &names[i % names.len()];
            records.push(generate_image(spec, *split, i, target, &names)?);
        }
        *bundle.split_mut(*split) = records;
    }
    Ok(bundle)
}

struct Placed {
    class: ClassSpec,
    cx: f64,
    cy: f64,
    r: f64,
    hue_deg: f64,
    sat: f64,
    val: f64,
}

fn generate_image(
    spec: &SyntheticSpec,
    split: Split,
    index: usize,
    target_name: &str,
    split_classes: &[String],
) -> Result<ImageRecord> {
    let mut rng = rng_for(spec.seed, &format!("synth/{split}/{index}"));
    let (h, w) = spec.image_size;
    let target = ClassSpec::parse(target_name).expect("generated class names parse");

    let n_targets = rng.random_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let others: Vec<&String> = split_classes.iter().filter(|c| *c != target_name).collect();
    let n_distractor_classes = rng
        .random_range(spec.distractor_classes_per_image.0..=spec.distractor_classes_per_image.1)
        .min(others.len());
    let mut distractors: Vec<&String> = others;
    distractors.shuffle(&mut rng);
    distractors.truncate(n_distractor_classes);

    let mut wanted: Vec<ClassSpec> = vec![target; n_targets];
    for name in &distractors {
        let c = ClassSpec::parse(name).expect("generated class names parse");
        let n = rng.random_range(spec.distractors_per_class.0..=spec.distractors_per_class.1);
        wanted.extend(std::iter::repeat_n(c, n));
    }

    let mut placed: Vec<Placed> = Vec::with_capacity(wanted.len());
    'attempt: for _ in 0..50 {
        placed.clear();
        for &class in &wanted {
            let mut ok = false;
            for _ in 0..400 {
                let r = rng.random_range(spec.object_scale.0..=spec.object_scale.1);
                let cx = quantize(rng.random_range(r + 0.5..w as f64 - r - 0.5));
                let cy = quantize(rng.random_range(r + 0.5..h as f64 - r - 0.5));
                let clear = placed.iter().all(|p| {
                    let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
                    d >= p.r + r + 1.5
                });
                if clear {
                    let jitter: f64 = rng.random_range(-6.0..6.0);
                    placed.push(Placed {
                        class,
                        cx,
                        cy,
                        r,
                        hue_deg: class.hue.degrees() + jitter,
                        sat: rng.random_range(0.7..1.0),
                        val: rng.random_range(0.75..1.0),
                    });
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'attempt;
            }
        }
        break;
    }
    ensure(placed.len() == wanted.len(), || {
        format!("could not place {} objects in a {h}x{w} image; reduce counts or scale", wanted.len())
    })?;

    let pixels = render(&mut rng, h, w, &placed);
    let instances: Vec<Instance> = placed
        .iter()
        .map(|p| Instance {
            class_name: p.class.name(),
            bbox: tight_box(p, h, w),
            center: (p.cx, p.cy),
        })
        .collect();
    let dots: Vec<(f64, f64)> = placed[..n_targets].iter().map(|p| (p.cx, p.cy)).collect();
    let mut order: Vec<usize> = (0..n_targets).collect();
    order.shuffle(&mut rng);
    let gt_boxes = order
        .iter()
        .take(3)
        .map(|&i| instances[i].bbox)
        .collect();

    Ok(ImageRecord {
        id: format!("{split}_{index:04}"),
        pixels: Image::from_raw(pixels),
        class_name: target_name.to_string(),
        dots,
        gt_boxes,
        split,
        instances,
    })
}

/// Centres sit on a 1/8 px grid so they serialise exactly.
fn quantize(v: f64) -> f64 {
    (v * 8.0).round() / 8.0
}

fn tight_box(p: &Placed, h: usize, w: usize) -> BoundingBox {
    let x1 = (p.cx - p.r).floor().max(0.0) as u32;
    let y1 = (p.cy - p.r).floor().max(0.0) as u32;
    let x2 = ((p.cx + p.r).ceil() as u32).min(w as u32);
    let y2 = ((p.cy + p.r).ceil() as u32).min(h as u32);
    BoundingBox { x1, y1, x2, y2 }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

const SUPERSAMPLE: usize = 4;

fn render<R: Rng>(rng: &mut R, h: usize, w: usize, placed: &[Placed]) -> Array3<f64> {
    let bg = hsv_to_rgb(
        rng.random_range(0.0..360.0),
        rng.random_range(0.0..0.25),
        rng.random_range(0.2..0.5),
    );
    let mut img = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let n: f64 = rng.random_range(-0.03..0.03);
            for c in 0..3 {
                img[[c, y, x]] = bg[c] + n;
            }
        }
    }
    for p in placed {
        let color = hsv_to_rgb(p.hue_deg, p.sat, p.val);
        let y0 = (p.cy - p.r - 1.0).floor().max(0.0) as usize;
        let y1 = ((p.cy + p.r + 1.0).ceil() as usize).min(h);
        let x0 = (p.cx - p.r - 1.0).floor().max(0.0) as usize;
        let x1 = ((p.cx + p.r + 1.0).ceil() as usize).min(w);
        for y in y0..y1 {
            let stripe_dark = p.class.texture == Texture::Striped
                && ((y as f64 - (p.cy - p.r)).floor() as i64).div_euclid(2) % 2 == 1;
            let shade = if stripe_dark { 0.4 } else { 1.0 };
            for x in x0..x1 {
                let mut cover = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        if p.class.shape.contains((px - p.cx) / p.r, (py - p.cy) / p.r) {
                            cover += 1;
                        }
                    }
                }
                if cover == 0 {
                    continue;
                }
                let a = cover as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    let v = &mut img[[c, y, x]];
                    *v = a * color[c] * shade + (1.0 - a) * *v;
                }
            }
        }
    }
    img.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    img
}

/// Split class lists for `spec` without rendering any image.
pub fn split_classes(spec: &SyntheticSpec) -> Result<SplitClasses> {
    spec.validate()?;
    Ok(choose_classes(spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 12,
            images_per_split: (1, 0, 0),
            image_size: (48, 48),
            objects_per_image: (5, 5),
            object_scale: (3.0, 4.0),
            distractor_classes_per_image: (1, 1),
            distractors_per_class: (2, 2),
            seed,
        }
    }

    #[test]
    fn fixed_object_count_and_three_boxes() {
        let b = generate_synthetic_dataset(&tiny(1)).unwrap();
        assert_eq!(b.train.len(), 1);
        let r = &b.train[0];
        assert_eq!(r.dots.len(), 5);
        assert_eq!(r.gt_boxes.len(), 3);
        assert_eq!(r.instances.len(), 7);
        r.validate().unwrap();
        for bx in &r.gt_boxes {
            assert!(r.dots.iter().any(|&(x, y)| bx.contains_point(x, y)));
        }
    }

    #[test]
    fn generation_is_bit_identical() {
        let a = generate_synthetic_dataset(&tiny(5)).unwrap();
        let b = generate_synthetic_dataset(&tiny(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&tiny(6)).unwrap();
        assert_ne!(a.train[0].pixels, c.train[0].pixels);
    }

    #[test]
    fn twelve_classes_split_eight_two_two() {
        let spec = tiny(2);
        let classes = split_classes(&spec).unwrap();
        assert_eq!((classes.train.len(), classes.val.len(), classes.test.len()), (8, 2, 2));
        assert!(classes.disjoint());
    }

    #[test]
    fn held_out_attributes_are_covered_by_training_classes() {
        let spec = SyntheticSpec::default();
        let classes = split_classes(&spec).unwrap();
        let train: Vec<ClassSpec> = classes.train.iter().map(|n| ClassSpec::parse(n).unwrap()).collect();
        for name in classes.val.iter().chain(&classes.test) {
            let c = ClassSpec::parse(name).unwrap();
            assert!(train.iter().any(|t| t.shape == c.shape));
            assert!(train.iter().any(|t| t.hue == c.hue));
            assert!(train.iter().any(|t| t.texture == c.texture));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = tiny(0);
        s.objects_per_image = (4, 2);
        assert!(generate_synthetic_dataset(&s).is_err());
        let mut s = tiny(0);
        s.num_classes = 2;
        assert!(generate_synthetic_dataset(&s).is_err());
        let mut s = tiny(0);
        s.image_size = (8, 8);
        assert!(generate_synthetic_dataset(&s).is_err());
    }

    #[test]
    fn pixels_are_quantised_to_bytes() {
        let b = generate_synthetic_dataset(&tiny(3)).unwrap();
        for &v in b.train[0].pixels.pixels().iter() {
            let q = (v * 255.0).round();
            assert_eq!(q / 255.0, v);
        }
    }

    #[test]
    fn shapes_have_distinct_footprints() {
        let grid: Vec<(f64, f64)> = (0..21)
            .flat_map(|i| (0..21).map(move |j| (i as f64 / 10.0 - 1.0, j as f64 / 10.0 - 1.0)))
            .collect();
        let masks: Vec<Vec<bool>> = Shape::ALL
            .iter()
            .map(|s| grid.iter().map(|&(x, y)| s.contains(x, y)).collect())
            .collect();
        for i in 0..masks.len() {
            assert!(masks[i].iter().any(|&b| b));
            for j in i + 1..masks.len() {
                assert_ne!(masks[i], masks[j]);
            }
        }
    }
}
