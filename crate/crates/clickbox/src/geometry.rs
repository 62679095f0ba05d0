//! Boxes, clicks and the spatial predicates everything else is built from.

use crate::error::{Error, Result};

/// Axis-aligned rectangle in image pixel coordinates, `x1 < x2`, `y1 < y2`.
/// Area is `(x2 - x1) * (y2 - y1)`; boundaries are closed for containment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!(
                "box coordinates must be finite: ({x1},{y1},{x2},{y2})"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::Data(format!(
                "degenerate box ({x1},{y1},{x2},{y2}): require x1<x2 and y1<y2"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

/// A class-tagged point annotation at the perceived object center.
#[derive(Debug, Clone, PartialEq)]
pub struct Click {
    pub x: f64,
    pub y: f64,
    pub class_id: usize,
    pub image_id: String,
}

/// Intersection-over-union of two boxes, in [0, 1]; 0 when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Closed-boundary containment: clicks landing exactly on an edge count as inside.
pub fn contains(b: &BoundingBox, c: &Click) -> bool {
    b.x1 <= c.x && c.x <= b.x2 && b.y1 <= c.y && c.y <= b.y2
}

/// Euclidean distance between the box center and the click.
pub fn center_distance(b: &BoundingBox, c: &Click) -> f64 {
    let (cx, cy) = b.center();
    ((cx - c.x).powi(2) + (cy - c.y).powi(2)).sqrt()
}

/// Clamps a box to the `[0, width] x [0, height]` image frame. Errors when
/// the box lies entirely outside the image.
pub fn clip(b: &BoundingBox, width: usize, height: usize) -> Result<BoundingBox> {
    let x1 = b.x1.clamp(0.0, width as f64);
    let y1 = b.y1.clamp(0.0, height as f64);
    let x2 = b.x2.clamp(0.0, width as f64);
    let y2 = b.y2.clamp(0.0, height as f64);
    if x1 >= x2 || y1 >= y2 {
        return Err(Error::Data(format!(
            "box ({},{},{},{}) does not intersect {width}x{height} image",
            b.x1, b.y1, b.x2, b.y2
        )));
    }
    BoundingBox::new(x1, y1, x2, y2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn click(x: f64, y: f64) -> Click {
        Click {
            x,
            y,
            class_id: 0,
            image_id: "img".into(),
        }
    }

    /// Pixel-count IoU on the integer grid: each pixel (x, y) covers the unit
    /// cell [x, x+1) x [y, y+1), so integer boxes rasterize exactly.
    fn iou_raster_oracle(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let count = |bb: &BoundingBox, x: i64, y: i64| {
            (x as f64) >= bb.x1 && (x as f64) < bb.x2 && (y as f64) >= bb.y1 && (y as f64) < bb.y2
        };
        let x_lo = a.x1.min(b.x1) as i64;
        let x_hi = a.x2.max(b.x2) as i64;
        let y_lo = a.y1.min(b.y1) as i64;
        let y_hi = a.y2.max(b.y2) as i64;
        let (mut inter, mut uni) = (0u64, 0u64);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (ina, inb) = (count(a, x, y), count(b, x, y));
                if ina && inb {
                    inter += 1;
                }
                if ina || inb {
                    uni += 1;
                }
            }
        }
        if uni == 0 {
            0.0
        } else {
            inter as f64 / uni as f64
        }
    }

    #[test]
    fn iou_identical_disjoint_and_hand_case() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = bx(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &far), 0.0);
        // (0,0,10,10) vs (5,5,15,15): intersection 25, union 175.
        let b = bx(5.0, 5.0, 15.0, 15.0);
        assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
        assert!((iou(&a, &b) - iou_raster_oracle(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn iou_matches_raster_oracle_on_random_integer_boxes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..500 {
            let make = |rng: &mut rand_chacha::ChaCha8Rng| {
                let x1 = rng.random_range(0..30) as f64;
                let y1 = rng.random_range(0..30) as f64;
                let w = rng.random_range(1..20) as f64;
                let h = rng.random_range(1..20) as f64;
                bx(x1, y1, x1 + w, y1 + h)
            };
            let a = make(&mut rng);
            let b = make(&mut rng);
            assert!(
                (iou(&a, &b) - iou_raster_oracle(&a, &b)).abs() <= 1e-9,
                "{a:?} {b:?}"
            );
        }
    }

    #[test]
    fn contains_uses_closed_boundaries() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert!(contains(&b, &click(5.0, 5.0)));
        assert!(!contains(&b, &click(15.0, 5.0)));
        assert!(contains(&b, &click(0.0, 4.0))); // on the x = x1 edge
        assert!(contains(&b, &click(10.0, 10.0))); // corner
    }

    #[test]
    fn center_distance_hand_cases() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(center_distance(&b, &click(5.0, 5.0)), 0.0);
        assert!((center_distance(&b, &click(8.0, 9.0)) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn clip_behavior() {
        let inner = bx(2.0, 2.0, 8.0, 8.0);
        assert_eq!(clip(&inner, 10, 10).unwrap(), inner);
        let big = bx(-5.0, -5.0, 20.0, 20.0);
        assert_eq!(clip(&big, 10, 10).unwrap(), bx(0.0, 0.0, 10.0, 10.0));
        let outside = bx(20.0, 20.0, 30.0, 30.0);
        assert!(clip(&outside, 10, 10).is_err());
    }

    #[test]
    fn box_validation() {
        assert!(BoundingBox::new(5.0, 0.0, 5.0, 10.0).is_err());
        assert!(BoundingBox::new(6.0, 0.0, 5.0, 10.0).is_err());
        assert!(BoundingBox::new(0.0, f64::NAN, 5.0, 10.0).is_err());
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            ax1 in 0.0f64..50.0, ay1 in 0.0f64..50.0,
            aw in 1.0f64..30.0, ah in 1.0f64..30.0,
            bx1 in 0.0f64..50.0, by1 in 0.0f64..50.0,
            bw in 1.0f64..30.0, bh in 1.0f64..30.0,
        ) {
            let a = bx(ax1, ay1, ax1 + aw, ay1 + ah);
            let b = bx(bx1, by1, bx1 + bw, by1 + bh);
            prop_assert_eq!(iou(&a, &b).to_bits(), iou(&b, &a).to_bits());
            prop_assert!(iou(&a, &b) >= 0.0 && iou(&a, &b) <= 1.0);
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_shrinks_when_translated_apart(
            x1 in 0.0f64..20.0, y1 in 0.0f64..20.0,
            w in 1.0f64..15.0, h in 1.0f64..15.0,
            shift1 in 0.0f64..40.0, extra in 0.1f64..40.0,
        ) {
            let a = bx(x1, y1, x1 + w, y1 + h);
            let near = bx(x1 + shift1, y1, x1 + shift1 + w, y1 + h);
            let far = bx(x1 + shift1 + extra, y1, x1 + shift1 + extra + w, y1 + h);
            prop_assert!(iou(&a, &far) <= iou(&a, &near) + 1e-12);
        }

        #[test]
        fn center_distance_is_translation_invariant(
            x1 in 0.0f64..20.0, y1 in 0.0f64..20.0,
            w in 1.0f64..15.0, h in 1.0f64..15.0,
            cx in -5.0f64..25.0, cy in -5.0f64..25.0,
            dx in -10.0f64..10.0, dy in -10.0f64..10.0,
        ) {
            let b = bx(x1, y1, x1 + w, y1 + h);
            let shifted = bx(x1 + dx, y1 + dy, x1 + w + dx, y1 + h + dy);
            let c = click(cx, cy);
            let cs = click(cx + dx, cy + dy);
            prop_assert!((center_distance(&b, &c) - center_distance(&shifted, &cs)).abs() <= 1e-9);
        }
    }
}
