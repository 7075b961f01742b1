use rand::Rng;

use crate::data::BoundingBox;
use crate::error::{ensure, Result};

pub const ASPECT_RANGE: (f64, f64) = (0.75, 1.33);

/// Draws `n` boxes fully inside an `h x w` image. The nominal side is uniform
/// in `size_range`, the aspect ratio (width / height) uniform in
/// [`ASPECT_RANGE`]; both sides are then clamped to the image.
///
/// Boxes are drawn one after another from `rng`, so the first `m` boxes of a
/// draw of `n > m` equal a draw of `m` from the same stream.
pub fn sample_boxes<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    n: usize,
    size_range: (u32, u32),
    rng: &mut R,
) -> Result<Vec<BoundingBox>> {
    let (lo, hi) = size_range;
    ensure(lo >= 1 && lo <= hi, || format!("invalid size range [{lo}, {hi}]"))?;
    ensure(hi as usize <= h.min(w), || {
        format!("size range [{lo}, {hi}] does not fit in a {h}x{w} image")
    })?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let side = rng.random_range(lo as f64..=hi as f64);
        let aspect: f64 = rng.random_range(ASPECT_RANGE.0..=ASPECT_RANGE.1);
        let bw = ((side * aspect.sqrt()).round() as usize).clamp(1, w);
        let bh = ((side / aspect.sqrt()).round() as usize).clamp(1, h);
        let x1 = rng.random_range(0..=w - bw);
        let y1 = rng.random_range(0..=h - bh);
        out.push(BoundingBox::new(x1 as u32, y1 as u32, (x1 + bw) as u32, (y1 + bh) as u32)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use proptest::prelude::*;

    #[test]
    fn prefix_property() {
        let a = sample_boxes(80, 90, 600, (10, 24), &mut rng_for(3, "x")).unwrap();
        let b = sample_boxes(80, 90, 150, (10, 24), &mut rng_for(3, "x")).unwrap();
        assert_eq!(&a[..150], &b[..]);
    }

    #[test]
    fn rejects_ranges_that_do_not_fit() {
        assert!(sample_boxes(20, 40, 3, (10, 24), &mut rng_for(0, "x")).is_err());
        assert!(sample_boxes(40, 40, 3, (12, 10), &mut rng_for(0, "x")).is_err());
        assert!(sample_boxes(40, 40, 3, (0, 10), &mut rng_for(0, "x")).is_err());
    }

    proptest! {
        #[test]
        fn boxes_are_contained(h in 24usize..120, w in 24usize..120, seed in 0u64..1000) {
            let boxes = sample_boxes(h, w, 40, (8, 24), &mut rng_for(seed, "p")).unwrap();
            prop_assert_eq!(boxes.len(), 40);
            for b in boxes {
                prop_assert!(b.fits_in(h, w));
                let ar = b.width() as f64 / b.height() as f64;
                prop_assert!(ar > 0.6 && ar < 1.6);
            }
        }
    }
}
