//! Pixel-space geometry shared by fusion, sampling, marking and scoring.
//!
//! Boxes use the `[x1, y1, x2, y2]` convention with the origin at the top-left
//! corner. Coordinates are continuous; detectors are free to emit fractional
//! boxes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default slack, in pixels, used by [`contains`] callers that do not pick one.
pub const DEFAULT_CONTAINMENT_EPS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("coordinate is not finite")]
    NonFinite,
    #[error("coordinate is negative")]
    Negative,
    #[error("degenerate box [{x1}, {y1}, {x2}, {y2}]: need x1 < x2 and y1 < y2")]
    Degenerate { x1: f64, y1: f64, x2: f64, y2: f64 },
}

fn check_coord(v: f64) -> Result<(), GeometryError> {
    if !v.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    if v < 0.0 {
        return Err(GeometryError::Negative);
    }
    Ok(())
}

/// A point in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    x: f64,
    y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Result<Self, GeometryError> {
        check_coord(x)?;
        check_coord(y)?;
        Ok(Self { x, y })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }
}

impl TryFrom<[f64; 2]> for Point {
    type Error = GeometryError;

    fn try_from([x, y]: [f64; 2]) -> Result<Self, Self::Error> {
        Point::new(x, y)
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Axis-aligned box with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        for v in [x1, y1, x2, y2] {
            check_coord(v)?;
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::Degenerate { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        let (hw, hh) = (width / 2.0, height / 2.0);
        Self::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
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

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// True when the box lies inside a `width` x `height` image.
    pub fn within_image(&self, width: f64, height: f64) -> bool {
        self.x2 <= width && self.y2 <= height
    }

    /// Area of the overlap with `other`, zero when disjoint or touching.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from([x1, y1, x2, y2]: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(x1, y1, x2, y2)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Exactly 1 for identical boxes and exactly 0 for
/// disjoint ones.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// True iff `inner` lies within `outer` grown by `eps` on every side.
pub fn contains(outer: &BBox, inner: &BBox, eps: f64) -> bool {
    inner.x1 >= outer.x1 - eps
        && inner.y1 >= outer.y1 - eps
        && inner.x2 <= outer.x2 + eps
        && inner.y2 <= outer.y2 + eps
}

pub fn center(b: &BBox) -> Point {
    Point {
        x: (b.x1 + b.x2) / 2.0,
        y: (b.y1 + b.y2) / 2.0,
    }
}

/// Membership test, inclusive on all four edges.
pub fn point_in(b: &BBox, p: &Point) -> bool {
    p.x >= b.x1 && p.x <= b.x2 && p.y >= b.y1 && p.y <= b.y2
}

pub fn euclidean(p: &Point, q: &Point) -> f64 {
    (p.x - q.x).hypot(p.y - q.y)
}
