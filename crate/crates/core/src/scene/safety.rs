//! Distance-to-nearest-obstacle grids and their bilinear queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Waypoint;

/// Value stored in every cell when there is nothing to collide with.
pub const NO_OBSTACLE_DISTANCE: f64 = 1e6;

/// An obstacle footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Obstacle {
    Disk { center: Waypoint, radius: f64 },
    Segment { a: Waypoint, b: Waypoint },
}

impl Obstacle {
    /// Euclidean distance from `p` to the footprint, zero inside it.
    pub fn distance(&self, p: Waypoint) -> f64 {
        match *self {
            Obstacle::Disk { center, radius } => (p.dist(center) - radius).max(0.0),
            Obstacle::Segment { a, b } => point_segment_distance(p, a, b),
        }
    }
}

pub fn point_segment_distance(p: Waypoint, a: Waypoint, b: Waypoint) -> f64 {
    let ab = b - a;
    let len2 = ab.x * ab.x + ab.y * ab.y;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let ap = p - a;
    let t = ((ap.x * ab.x + ap.y * ab.y) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Waypoint,
    pub max: Waypoint,
}

impl Default for Bounds {
    fn default() -> Self {
        Self { min: Waypoint::new(-10.0, -20.0), max: Waypoint::new(60.0, 20.0) }
    }
}

/// Grid of distances to the nearest obstacle. Cell `(r, c)` is centred at
/// `origin + (c, r) * cell_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyField {
    pub origin: Waypoint,
    #[serde(rename = "cell")]
    pub cell_size: f64,
    pub rows: Vec<Vec<f64>>,
}

/// Result of a field lookup; `clamped` is set when the query fell outside the
/// grid and was moved onto its border.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyQuery {
    pub distance: f64,
    pub clamped: bool,
}

impl SafetyField {
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_cols(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Waypoint {
        Waypoint::new(
            self.origin.x + col as f64 * self.cell_size,
            self.origin.y + row as f64 * self.cell_size,
        )
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.rows[row][col]
    }

    /// Bilinear interpolation of the four surrounding cell centres.
    pub fn query(&self, p: Waypoint) -> SafetyQuery {
        let (r0, c0, tr, tc, clamped) = grid_coords(
            self.origin,
            self.cell_size,
            self.num_rows(),
            self.num_cols(),
            p,
        );
        let r1 = (r0 + 1).min(self.num_rows() - 1);
        let c1 = (c0 + 1).min(self.num_cols() - 1);
        let v00 = self.rows[r0][c0];
        let v01 = self.rows[r0][c1];
        let v10 = self.rows[r1][c0];
        let v11 = self.rows[r1][c1];
        let distance = (1.0 - tr) * ((1.0 - tc) * v00 + tc * v01) + tr * ((1.0 - tc) * v10 + tc * v11);
        SafetyQuery { distance, clamped }
    }
}

/// Maps a point to a base cell and fractional offsets, clamping onto the grid.
pub(crate) fn grid_coords(
    origin: Waypoint,
    cell: f64,
    rows: usize,
    cols: usize,
    p: Waypoint,
) -> (usize, usize, f64, f64, bool) {
    let fc = (p.x - origin.x) / cell;
    let fr = (p.y - origin.y) / cell;
    let max_c = (cols - 1) as f64;
    let max_r = (rows - 1) as f64;
    let clamped = !(0.0..=max_c).contains(&fc) || !(0.0..=max_r).contains(&fr);
    let fc = if fc.is_nan() { 0.0 } else { fc.clamp(0.0, max_c) };
    let fr = if fr.is_nan() { 0.0 } else { fr.clamp(0.0, max_r) };
    let c0 = (fc.floor() as usize).min(cols.saturating_sub(2));
    let r0 = (fr.floor() as usize).min(rows.saturating_sub(2));
    let tc = if cols > 1 { fc - c0 as f64 } else { 0.0 };
    let tr = if rows > 1 { fr - r0 as f64 } else { 0.0 };
    (r0, c0, tr, tc, clamped)
}

/// Distance-to-nearest-obstacle for `p` by brute force over all obstacles.
pub fn nearest_obstacle_distance(obstacles: &[Obstacle], p: Waypoint) -> f64 {
    obstacles
        .iter()
        .map(|o| o.distance(p))
        .fold(NO_OBSTACLE_DISTANCE, f64::min)
}

/// Exact brute-force distance field over `bounds` at `cell_size` resolution.
pub fn build_safety_field(
    obstacles: &[Obstacle],
    bounds: Bounds,
    cell_size: f64,
) -> Result<SafetyField> {
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(Error::InvalidScale(cell_size));
    }
    let width = bounds.max.x - bounds.min.x;
    let height = bounds.max.y - bounds.min.y;
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::Config(format!(
            "degenerate safety bounds {width} x {height}"
        )));
    }
    let cols = ((width / cell_size).ceil() as usize).max(1);
    let rows = ((height / cell_size).ceil() as usize).max(1);
    let origin = Waypoint::new(bounds.min.x + cell_size / 2.0, bounds.min.y + cell_size / 2.0);
    let mut field = SafetyField { origin, cell_size, rows: Vec::with_capacity(rows) };
    for r in 0..rows {
        let row = (0..cols)
            .map(|c| {
                let p = Waypoint::new(origin.x + c as f64 * cell_size, origin.y + r as f64 * cell_size);
                nearest_obstacle_distance(obstacles, p)
            })
            .collect();
        field.rows.push(row);
    }
    Ok(field)
}
