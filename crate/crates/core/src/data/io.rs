//! On-disk dataset layout:
//!
//! ```text
//! <root>/images/<id>.png
//! <root>/annotations/annotations.json   { "<id>.png": { class_name, points, boxes, split, instances } }
//! <root>/manifest.json                  { splits: { train: [...], ... }, classes: { train: [...], ... } }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::density::DensityMap;
use crate::data::types::{BoundingBox, DatasetBundle, Image, ImageRecord, Instance, Split, SplitClasses};
use crate::error::{Error, Result};

pub const ANNOTATION_FILE: &str = "annotations/annotations.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    pub class_name: String,
    pub points: Vec<[f64; 2]>,
    pub boxes: Vec<[u32; 4]>,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instances: Vec<Instance>,
}

fn default_split() -> Split {
    Split::Test
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub splits: BTreeMap<Split, Vec<String>>,
    pub classes: SplitClasses,
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut px = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            px[[c, y as usize, x as usize]] = p[c] as f64 / 255.0;
        }
    }
    Image::new(px)
}

pub fn to_rgb8(img: &Image) -> RgbImage {
    let px = img.pixels();
    ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let v = |c: usize| (px[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([v(0), v(1), v(2)])
    })
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    save_rgb(&to_rgb8(img), path)
}

pub(crate) fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a density map as an 8-bit grayscale PNG scaled by its maximum.
pub fn write_density_png(map: &DensityMap, path: &Path) -> Result<()> {
    let max = map.values().fold(0.0f64, |a, &b| a.max(b));
    let v: &Array2<f64> = map.values();
    let img = ImageBuffer::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        let g = if max > 0.0 {
            (v[[y as usize, x as usize]] / max * 255.0).round() as u8
        } else {
            0
        };
        Rgb([g, g, g])
    });
    save_rgb(&img, path)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn entry_for(r: &ImageRecord) -> AnnotationEntry {
    AnnotationEntry {
        class_name: r.class_name.clone(),
        points: r.dots.iter().map(|&(x, y)| [x, y]).collect(),
        boxes: r.gt_boxes.iter().map(|&b| b.into()).collect(),
        split: r.split,
        instances: r.instances.clone(),
    }
}

/// Writes images, the annotation document and the manifest under `root`.
pub fn export_bundle(bundle: &DatasetBundle, root: &Path) -> Result<()> {
    let mut annotations = BTreeMap::new();
    let mut manifest = Manifest {
        classes: bundle.classes.clone(),
        ..Default::default()
    };
    for split in Split::ALL {
        let names = manifest.splits.entry(split).or_default();
        for r in bundle.split(split) {
            let file = format!("{}.png", r.id);
            write_png(&r.pixels, &root.join(IMAGES_DIR).join(&file))?;
            names.push(file.clone());
            annotations.insert(file, entry_for(r));
        }
    }
    write_json(&annotations, &root.join(ANNOTATION_FILE))?;
    write_json(&manifest, &root.join(MANIFEST_FILE))
}

/// Parses an annotation document, loading each referenced image from
/// `images_dir`. Every failing entry is collected into one
/// [`Error::Rejected`] report.
pub fn load_annotations(annotation_path: &Path, images_dir: &Path) -> Result<DatasetBundle> {
    let raw: BTreeMap<String, serde_json::Value> = read_json(annotation_path)?;
    let mut bundle = DatasetBundle::default();
    let mut rejected = Vec::new();
    for (file, value) in raw {
        match load_entry(&file, value, images_dir) {
            Ok(rec) => {
                let classes = bundle.classes.get_mut(rec.split);
                if !classes.contains(&rec.class_name) {
                    classes.push(rec.class_name.clone());
                }
                bundle.split_mut(rec.split).push(rec);
            }
            Err(e) => rejected.push(format!("{file}: {e}")),
        }
    }
    if !rejected.is_empty() {
        return Err(Error::Rejected(rejected));
    }
    Ok(bundle)
}

fn load_entry(file: &str, value: serde_json::Value, images_dir: &Path) -> Result<ImageRecord> {
    let entry: AnnotationEntry =
        serde_json::from_value(value).map_err(|e| Error::Validation(format!("malformed entry: {e}")))?;
    let mut gt_boxes = Vec::with_capacity(entry.boxes.len());
    for b in &entry.boxes {
        gt_boxes.push(BoundingBox::try_from(*b)?);
    }
    let path: PathBuf = images_dir.join(file);
    if !path.exists() {
        return Err(Error::Validation(format!("missing image file {}", path.display())));
    }
    let pixels = read_png(&path)?;
    let id = Path::new(file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.to_string());
    let rec = ImageRecord {
        id,
        pixels,
        class_name: entry.class_name,
        dots: entry.points.iter().map(|p| (p[0], p[1])).collect(),
        gt_boxes,
        split: entry.split,
        instances: entry.instances,
    };
    rec.validate()?;
    Ok(rec)
}

/// Loads a dataset directory written by [`export_bundle`]; split membership
/// and class lists come from the manifest.
pub fn load_dataset(root: &Path) -> Result<DatasetBundle> {
    let manifest: Manifest = read_json(&root.join(MANIFEST_FILE))?;
    let loaded = load_annotations(&root.join(ANNOTATION_FILE), &root.join(IMAGES_DIR))?;
    let mut by_file: BTreeMap<String, ImageRecord> = loaded
        .records()
        .map(|r| (format!("{}.png", r.id), r.clone()))
        .collect();
    let mut bundle = DatasetBundle {
        classes: manifest.classes.clone(),
        ..Default::default()
    };
    for (split, files) in &manifest.splits {
        for f in files {
            let mut rec = by_file
                .remove(f)
                .ok_or_else(|| Error::Validation(format!("manifest lists {f} but it has no annotation")))?;
            rec.split = *split;
            bundle.split_mut(*split).push(rec);
        }
    }
    Ok(bundle)
}
