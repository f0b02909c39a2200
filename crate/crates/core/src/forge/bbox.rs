use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box: top-left corner `(x, y)` and side lengths `(w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Validation(format!("box sides must be positive, got {w}x{h}")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Scales both sides by `factor` around the centre, without clipping.
    pub fn scaled(&self, factor: f64) -> Self {
        let (cx, cy) = self.center();
        let (w, h) = (self.w * factor, self.h * factor);
        Self { x: cx - w / 2.0, y: cy - h / 2.0, w, h }
    }

    /// Intersection with `[0, W) × [0, H)`; `None` when it is empty.
    pub fn clip(&self, (height, width): (usize, usize)) -> Option<Self> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        (x1 > x0 && y1 > y0).then(|| Self { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }

    /// Integer pixel rectangle `(x, y, w, h)` covering the box.
    pub fn pixel_rect(&self) -> (usize, usize, usize, usize) {
        let x0 = self.x.round().max(0.0) as usize;
        let y0 = self.y.round().max(0.0) as usize;
        let x1 = (self.x + self.w).round().max(0.0) as usize;
        let y1 = (self.y + self.h).round().max(0.0) as usize;
        (x0, y0, x1.saturating_sub(x0).max(1), y1.saturating_sub(y0).max(1))
    }
}

/// Centre-preserving per-side scaling followed by intersection with the
/// image bounds `(H, W)`.
pub fn enlarge_box(bbox: BoundingBox, factor: f64, image_bounds: (usize, usize)) -> Result<BoundingBox> {
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(Error::Validation(format!("enlargement factor must be >= 1, got {factor}")));
    }
    bbox.scaled(factor)
        .clip(image_bounds)
        .ok_or_else(|| Error::Validation("enlarged box lies outside the image".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: BoundingBox, b: (f64, f64, f64, f64)) -> bool {
        [(a.x, b.0), (a.y, b.1), (a.w, b.2), (a.h, b.3)]
            .iter()
            .all(|(p, q)| (p - q).abs() < 1e-9)
    }

    #[test]
    fn enlargement_examples() {
        let b = BoundingBox::new(10.0, 10.0, 100.0, 100.0).unwrap();
        assert!(close(b.scaled(1.3), (-5.0, -5.0, 130.0, 130.0)));
        assert!(close(enlarge_box(b, 1.3, (500, 500)).unwrap(), (0.0, 0.0, 125.0, 125.0)));
        assert!(close(enlarge_box(b, 1.0, (500, 500)).unwrap(), (10.0, 10.0, 100.0, 100.0)));

        let c = BoundingBox::new(200.0, 200.0, 100.0, 100.0).unwrap();
        assert!(close(enlarge_box(c, 1.3, (1000, 1000)).unwrap(), (185.0, 185.0, 130.0, 130.0)));
    }

    #[test]
    fn invalid_inputs() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        let b = BoundingBox::new(10.0, 10.0, 10.0, 10.0).unwrap();
        assert!(enlarge_box(b, 0.9, (100, 100)).is_err());
        let outside = BoundingBox::new(500.0, 500.0, 10.0, 10.0).unwrap();
        assert!(matches!(enlarge_box(outside, 1.3, (100, 100)), Err(Error::Validation(_))));
    }
}
