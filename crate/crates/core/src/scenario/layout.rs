//! World-frame road geometry used for rasterization and evaluation.

use serde::{Deserialize, Serialize};

/// Lane centerline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Centerline {
    /// `y` as a function of `x`: `from_y` before `blend_start`, `to_y` after
    /// `blend_end`, and a smoothstep in between.
    Longitudinal { from_y: f64, to_y: f64, blend_start: f64, blend_end: f64 },
    /// A road running along `y` at fixed `x`.
    Lateral { x: f64 },
}

fn smoothstep(u: f64) -> (f64, f64) {
    let u = u.clamp(0.0, 1.0);
    (u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u))
}

impl Centerline {
    pub fn straight(y: f64) -> Self {
        Centerline::Longitudinal { from_y: y, to_y: y, blend_start: 0.0, blend_end: 1.0 }
    }

    /// Lateral position and slope `dy/dx` at `x`.
    pub fn y_at(&self, x: f64) -> (f64, f64) {
        match *self {
            Centerline::Longitudinal { from_y, to_y, blend_start, blend_end } => {
                if from_y == to_y {
                    return (from_y, 0.0);
                }
                let span = blend_end - blend_start;
                let (s, ds) = smoothstep((x - blend_start) / span);
                let inside = x > blend_start && x < blend_end;
                (from_y + (to_y - from_y) * s, if inside { (to_y - from_y) * ds / span } else { 0.0 })
            }
            Centerline::Lateral { .. } => (0.0, 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub center: Centerline,
    pub half_width: f64,
    /// Travel direction along the centerline tangent: 0 for `+x`, pi for
    /// oncoming, +-pi/2 for lateral roads.
    pub direction: f64,
    pub drivable: bool,
    /// Extent along the lane axis.
    pub extent: (f64, f64),
}

impl Lane {
    /// Signed offset of a world point from the centerline, or `None` if the
    /// point lies outside the lane.
    pub fn offset(&self, px: f64, py: f64) -> Option<f64> {
        let (along, off) = match self.center {
            Centerline::Longitudinal { .. } => {
                let (y, slope) = self.center.y_at(px);
                (px, (py - y) / (1.0 + slope * slope).sqrt())
            }
            Centerline::Lateral { x } => (py, px - x),
        };
        (along >= self.extent.0 && along <= self.extent.1 && off.abs() <= self.half_width).then_some(off)
    }

    /// Travel heading at a world point.
    pub fn heading_at(&self, px: f64) -> f64 {
        match self.center {
            Centerline::Longitudinal { .. } => {
                let (_, slope) = self.center.y_at(px);
                crate::trajectory::wrap_angle(self.direction + slope.atan())
            }
            Centerline::Lateral { .. } => self.direction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Painted line along `y = const`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divider {
    pub y: f64,
    pub half_width: f64,
    pub x_min: f64,
    pub x_max: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoadLayout {
    pub lanes: Vec<Lane>,
    pub dividers: Vec<Divider>,
    pub crosswalks: Vec<Rect>,
    /// Area the ego may not enter while the light is red.
    pub stop_zone: Option<Rect>,
}

impl RoadLayout {
    pub fn drivable(&self, x: f64, y: f64) -> bool {
        self.lanes.iter().any(|l| l.drivable && l.offset(x, y).is_some())
    }

    pub fn divider(&self, x: f64, y: f64) -> bool {
        self.dividers.iter().any(|d| x >= d.x_min && x <= d.x_max && (y - d.y).abs() <= d.half_width)
    }

    pub fn crosswalk(&self, x: f64, y: f64) -> bool {
        self.crosswalks.iter().any(|r| r.contains(x, y))
    }

    /// The lane containing the point whose centerline is closest, with the
    /// absolute offset to it.
    pub fn lane_at(&self, x: f64, y: f64) -> Option<(&Lane, f64)> {
        self.lanes
            .iter()
            .filter_map(|l| l.offset(x, y).map(|o| (l, o.abs())))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}
