use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Binary `h × w` map; 1 marks a manipulated pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ManipulationMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ManipulationMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {height}x{width} mask",
                data.len()
            )));
        }
        let mask = Self { height, width, data };
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.iter().find(|v| **v > 1) {
            Some(v) => Err(Error::Validation(format!("mask value {v} is not 0 or 1"))),
            None => Ok(()),
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.popcount() == 0
    }

    pub fn union_with(&mut self, other: &ManipulationMask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| *v as f32).collect()
    }
}

/// Placement zones of a face crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FacialZone {
    /// Left eye region.
    UpperLeft,
    /// Right eye region.
    UpperRight,
    /// Nose region.
    Center,
    /// Mouth region.
    LowerCenter,
    /// The whole face.
    Face,
}

impl FacialZone {
    pub const COMPONENTS: [FacialZone; 4] = [
        FacialZone::UpperLeft,
        FacialZone::UpperRight,
        FacialZone::Center,
        FacialZone::LowerCenter,
    ];

    /// Nominal centre and half-extent ranges as fractions of `(w, h)`:
    /// `(cx, cy, rx_range, ry_range)`.
    fn geometry(self) -> (f64, f64, (f64, f64), (f64, f64)) {
        match self {
            FacialZone::UpperLeft => (0.34, 0.38, (0.10, 0.14), (0.08, 0.11)),
            FacialZone::UpperRight => (0.66, 0.38, (0.10, 0.14), (0.08, 0.11)),
            FacialZone::Center => (0.50, 0.56, (0.08, 0.11), (0.10, 0.14)),
            FacialZone::LowerCenter => (0.50, 0.76, (0.14, 0.20), (0.07, 0.10)),
            FacialZone::Face => (0.50, 0.53, (0.30, 0.36), (0.38, 0.44)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Ellipse,
    Rect,
}

/// A region to rasterise. Coordinates are pixels; pixel `(x, y)` is inside a
/// continuous shape when its centre `(x + ½, y + ½)` is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Region {
    /// Columns `x..x+w`, rows `y..y+h`.
    Rect { x: usize, y: usize, w: usize, h: usize },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    /// Even-odd fill of a closed polygon.
    Polygon { points: Vec<(f64, f64)> },
    /// Randomly sized and jittered shape inside a facial zone.
    Zone { zone: FacialZone, shape: ShapeKind },
}

impl Region {
    fn check_bounds(&self, h: usize, w: usize) -> Result<()> {
        let (hf, wf) = (h as f64, w as f64);
        let ok = match self {
            Region::Rect { x, y, w: rw, h: rh } => *rw > 0 && *rh > 0 && x + rw <= w && y + rh <= h,
            Region::Ellipse { cx, cy, rx, ry } => {
                *rx > 0.0 && *ry > 0.0 && cx - rx >= 0.0 && cy - ry >= 0.0 && cx + rx <= wf && cy + ry <= hf
            }
            Region::Polygon { points } => {
                points.len() >= 3
                    && points
                        .iter()
                        .all(|(px, py)| (0.0..=wf).contains(px) && (0.0..=hf).contains(py))
            }
            Region::Zone { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("region {self:?} is not inside a {h}x{w} image")))
        }
    }

    fn resolve<R: Rng>(&self, h: usize, w: usize, rng: &mut R) -> Region {
        match self {
            Region::Zone { zone, shape } => {
                let (cx, cy, (rx0, rx1), (ry0, ry1)) = zone.geometry();
                let (wf, hf) = (w as f64, h as f64);
                let jitter = 0.03;
                let cx = (cx + rng.gen_range(-jitter..=jitter)) * wf;
                let cy = (cy + rng.gen_range(-jitter..=jitter)) * hf;
                let rx = (rng.gen_range(rx0..=rx1) * wf).max(1.0);
                let ry = (rng.gen_range(ry0..=ry1) * hf).max(1.0);
                let cx = cx.clamp(rx, wf - rx);
                let cy = cy.clamp(ry, hf - ry);
                match shape {
                    ShapeKind::Ellipse => Region::Ellipse { cx, cy, rx, ry },
                    ShapeKind::Rect => {
                        let x = (cx - rx).round().max(0.0) as usize;
                        let y = (cy - ry).round().max(0.0) as usize;
                        let rw = ((2.0 * rx).round() as usize).clamp(1, w - x);
                        let rh = ((2.0 * ry).round() as usize).clamp(1, h - y);
                        Region::Rect { x, y, w: rw, h: rh }
                    }
                }
            }
            other => other.clone(),
        }
    }

    fn rasterize_into(&self, mask: &mut ManipulationMask) {
        let (h, w) = (mask.height, mask.width);
        match self {
            Region::Rect { x, y, w: rw, h: rh } => {
                for yy in *y..(*y + *rh).min(h) {
                    for xx in *x..(*x + *rw).min(w) {
                        mask.data[yy * w + xx] = 1;
                    }
                }
            }
            Region::Ellipse { cx, cy, rx, ry } => {
                for yy in 0..h {
                    for xx in 0..w {
                        let dx = (xx as f64 + 0.5 - cx) / rx;
                        let dy = (yy as f64 + 0.5 - cy) / ry;
                        if dx * dx + dy * dy <= 1.0 {
                            mask.data[yy * w + xx] = 1;
                        }
                    }
                }
            }
            Region::Polygon { points } => {
                for yy in 0..h {
                    for xx in 0..w {
                        if point_in_polygon(xx as f64 + 0.5, yy as f64 + 0.5, points) {
                            mask.data[yy * w + xx] = 1;
                        }
                    }
                }
            }
            Region::Zone { .. } => unreachable!("zones are resolved before rasterisation"),
        }
    }
}

fn point_in_polygon(px: f64, py: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Union of the rasterised `components`. Zone regions are placed with an
/// RNG seeded from `rng_seed`, so the result is a pure function of its inputs.
pub fn synth_component_mask(shape: (usize, usize), components: &[Region], rng_seed: u64) -> Result<ManipulationMask> {
    let (h, w) = shape;
    if components.is_empty() {
        return Err(Error::Validation("at least one component region is required".into()));
    }
    if h == 0 || w == 0 {
        return Err(Error::Validation(format!("mask shape {h}x{w} is empty")));
    }
    let mut rng = seed::rng_for(rng_seed, "component-mask");
    let mut mask = ManipulationMask::zeros(h, w);
    for region in components {
        region.check_bounds(h, w)?;
        region.resolve(h, w, &mut rng).rasterize_into(&mut mask);
    }
    Ok(mask)
}
