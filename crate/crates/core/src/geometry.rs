//! Boxes, points and the relations between them.
//!
//! Image coordinates have their origin at the top-left corner, x to the
//! right and y downward; pixel `(0, 0)` covers `[0, 1) × [0, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Axis-aligned box in opposing-corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x_tl: f64,
    pub y_tl: f64,
    pub x_br: f64,
    pub y_br: f64,
}

impl Box {
    pub fn new(x_tl: f64, y_tl: f64, x_br: f64, y_br: f64) -> Result<Self> {
        let b = Self { x_tl, y_tl, x_br, y_br };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_tl, self.y_tl, self.x_br, self.y_br];
        if coords.iter().any(|c| !c.is_finite()) {
            return config_err(format!("box has non-finite coordinates: {self:?}"));
        }
        if self.x_tl > self.x_br || self.y_tl > self.y_br {
            return config_err(format!("box corners out of order: {self:?}"));
        }
        Ok(())
    }

    pub fn from_center_size(xc: f64, yc: f64, w: f64, h: f64) -> Self {
        Self { x_tl: xc - w / 2.0, y_tl: yc - h / 2.0, x_br: xc + w / 2.0, y_br: yc + h / 2.0 }
    }

    /// `(x_c, y_c, w, h)`.
    pub fn center_size(&self) -> (f64, f64, f64, f64) {
        (
            (self.x_tl + self.x_br) / 2.0,
            (self.y_tl + self.y_br) / 2.0,
            self.x_br - self.x_tl,
            self.y_br - self.y_tl,
        )
    }

    pub fn width(&self) -> f64 {
        self.x_br - self.x_tl
    }

    pub fn height(&self) -> f64 {
        self.y_br - self.y_tl
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { x_tl: self.x_tl + dx, y_tl: self.y_tl + dy, x_br: self.x_br + dx, y_br: self.y_br + dy }
    }

    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self {
            x_tl: self.x_tl.clamp(0.0, width),
            y_tl: self.y_tl.clamp(0.0, height),
            x_br: self.x_br.clamp(0.0, width),
            y_br: self.y_br.clamp(0.0, height),
        }
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x_tl && p.x <= self.x_br && p.y >= self.y_tl && p.y <= self.y_br
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Which 2-d point to extract from a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    Center,
    TopLeft,
    BottomRight,
}

impl PointKind {
    pub const ALL: [PointKind; 3] = [PointKind::Center, PointKind::TopLeft, PointKind::BottomRight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PointKind::Center => "center",
            PointKind::TopLeft => "top_left",
            PointKind::BottomRight => "bottom_right",
        }
    }
}

pub fn extract_point(b: &Box, kind: PointKind) -> Point2 {
    match kind {
        PointKind::Center => Point2::new((b.x_tl + b.x_br) / 2.0, (b.y_tl + b.y_br) / 2.0),
        PointKind::TopLeft => Point2::new(b.x_tl, b.y_tl),
        PointKind::BottomRight => Point2::new(b.x_br, b.y_br),
    }
}

/// `key − query` in image pixels.
pub fn relative_location(query: Point2, key: Point2) -> (f64, f64) {
    (key.x - query.x, key.y - query.y)
}

/// Intersection over union. Zero-area boxes always give 0.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let iw = (a.x_br.min(b.x_br) - a.x_tl.max(b.x_tl)).max(0.0);
    let ih = (a.y_br.min(b.y_br) - a.y_tl.max(b.y_tl)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One pyramid level: stride in pixels and bin counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl LevelSpec {
    pub fn new(stride: usize, height: usize, width: usize) -> Result<Self> {
        if stride == 0 || height == 0 || width == 0 {
            return config_err(format!("level extents must be positive: {stride}/{height}/{width}"));
        }
        Ok(Self { stride, height, width })
    }

    /// Covered image extent `(height, width)` in pixels.
    pub fn image_extent(&self) -> (usize, usize) {
        (self.height * self.stride, self.width * self.stride)
    }

    pub fn bins(&self) -> usize {
        self.height * self.width
    }

    /// Center of bin `(row, col)` in image pixels.
    pub fn bin_center(&self, row: usize, col: usize) -> Point2 {
        let s = self.stride as f64;
        Point2::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }
}
