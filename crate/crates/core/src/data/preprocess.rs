use crate::data::types::{BoundingBox, Image, ImageRecord};
use crate::error::{ensure, Result};
use crate::nn::bilinear_resize;

/// Resizes a record to `target_height`, keeping the aspect ratio and mapping
/// dots, ground-truth boxes and instance boxes into the new frame.
///
/// Boxes are expanded outward (floor/ceil) so a dot inside a box stays inside
/// it after scaling.
pub fn preprocess_image(record: &ImageRecord, target_height: usize) -> Result<ImageRecord> {
    ensure(target_height > 0, || "target_height must be positive".into())?;
    let (h, w) = (record.height(), record.width());
    if target_height == h {
        return Ok(record.clone());
    }
    let new_w = ((w as f64 * target_height as f64 / h as f64).round() as usize).max(1);
    let sy = target_height as f64 / h as f64;
    let sx = new_w as f64 / w as f64;
    let pixels = Image::from_raw(bilinear_resize(record.pixels.pixels(), target_height, new_w));
    let scale_box = |b: &BoundingBox| -> BoundingBox {
        let x1 = (b.x1 as f64 * sx).floor() as u32;
        let y1 = (b.y1 as f64 * sy).floor() as u32;
        let x2 = ((b.x2 as f64 * sx).ceil() as u32).min(new_w as u32).max(x1 + 1);
        let y2 = ((b.y2 as f64 * sy).ceil() as u32).min(target_height as u32).max(y1 + 1);
        BoundingBox { x1, y1, x2, y2 }
    };
    let mut out = ImageRecord {
        id: record.id.clone(),
        pixels,
        class_name: record.class_name.clone(),
        dots: record.dots.iter().map(|&(x, y)| (x * sx, y * sy)).collect(),
        gt_boxes: record.gt_boxes.iter().map(scale_box).collect(),
        split: record.split,
        instances: record.instances.clone(),
    };
    for inst in &mut out.instances {
        inst.bbox = scale_box(&inst.bbox);
        inst.center = (inst.center.0 * sx, inst.center.1 * sy);
    }
    out.validate()?;
    Ok(out)
}
