//! Sinusoidal embeddings and the parameter-free scene inputs: agent and map
//! token features and the rasterized feature grid sampled along trajectories.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scene::safety::grid_coords;
use crate::scene::{PolylineKind, Scene, LANE_HALF_WIDTH};
use crate::trajectory::{Trajectory, Waypoint};

const SINE_BASE: f64 = 10_000.0;

/// Interleaved `sin, cos` pairs at frequencies `base^(-2i/d)`.
pub fn sine_embed(positions: &[f64], d: usize) -> Result<Vec<Vec<f64>>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidDim(d, "sine embedding needs an even, nonzero dimension"));
    }
    Ok(positions.iter().map(|&p| sine_row(p, d)).collect())
}

fn sine_row(p: f64, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let freq = SINE_BASE.powf(-(2.0 * i as f64) / d as f64);
        out.push((p * freq).sin());
        out.push((p * freq).cos());
    }
    out
}

/// Concatenated embeddings of `x` and `y`, each of width `d / 2`.
pub fn sine_embed_2d(p: Waypoint, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::InvalidDim(d, "2D sine embedding needs a dimension divisible by 4"));
    }
    let mut v = sine_row(p.x, d / 2);
    v.extend(sine_row(p.y, d / 2));
    Ok(v)
}

/// Per-waypoint embedding in meters plus a step-index embedding, one row per
/// waypoint.
pub(crate) fn waypoint_embedding(traj: &Trajectory, scale: f64, d: usize) -> Array2<f64> {
    let mut e = Array2::zeros((traj.len(), d));
    for (k, (p, mut row)) in traj.points().iter().zip(e.rows_mut()).enumerate() {
        let pos = sine_embed_2d(*p * scale, d).expect("dimension validated at construction");
        let idx = sine_row(k as f64, d);
        for ((o, a), b) in row.iter_mut().zip(pos).zip(idx) {
            *o = a + b;
        }
    }
    e
}

pub(crate) fn row_matrix(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((1, n), v).expect("row shape")
}

/// Channels of the scene grid: clipped clearance, clearance decay, and lane
/// proximity.
pub const GRID_CHANNELS: usize = 3;
/// Agent token features: position, velocity, radius.
pub const AGENT_FEATURES: usize = 5;
/// Map token features: midpoint, unit direction, length, kind one-hot.
pub const MAP_FEATURES: usize = 7;

const POS_SCALE: f64 = 30.0;
const VEL_SCALE: f64 = 10.0;
const CLEARANCE_CLIP: f64 = 5.0;
/// Length of the polyline pieces that become map tokens.
pub const MAP_CHUNK: f64 = 10.0;
const EGO_RADIUS: f64 = 1.0;

/// Multi-channel raster over the safety-field geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub origin: Waypoint,
    pub cell: f64,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<[f64; GRID_CHANNELS]>,
}

impl FeatureGrid {
    pub fn from_scene(scene: &Scene) -> Self {
        let f = &scene.safety;
        let (rows, cols) = (f.num_rows(), f.num_cols());
        let centerlines: Vec<_> = scene.polylines.iter().filter(|l| l.kind == PolylineKind::Centerline).collect();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let dist = f.value(r, c);
                let p = f.cell_center(r, c);
                let lane = centerlines.iter().map(|l| l.distance(p)).fold(f64::INFINITY, f64::min);
                let lane_prox = if lane.is_finite() { (-(lane / LANE_HALF_WIDTH).powi(2)).exp() } else { 0.0 };
                data.push([dist.min(CLEARANCE_CLIP) / CLEARANCE_CLIP, (-dist).exp(), lane_prox]);
            }
        }
        Self { origin: f.origin, cell: f.cell_size, rows, cols, data }
    }

    /// Grid with every cell equal to `v`.
    pub fn uniform(v: [f64; GRID_CHANNELS], origin: Waypoint, cell: f64, rows: usize, cols: usize) -> Self {
        Self { origin, cell, rows, cols, data: vec![v; rows * cols] }
    }

    /// Bilinear sample; the flag reports clamping onto the grid border.
    pub fn sample(&self, p: Waypoint) -> ([f64; GRID_CHANNELS], bool) {
        let (r0, c0, tr, tc, clamped) = grid_coords(self.origin, self.cell, self.rows, self.cols, p);
        let r1 = (r0 + 1).min(self.rows - 1);
        let c1 = (c0 + 1).min(self.cols - 1);
        let at = |r: usize, c: usize| self.data[r * self.cols + c];
        let mut out = [0.0; GRID_CHANNELS];
        for (ch, o) in out.iter_mut().enumerate() {
            *o = (1.0 - tr) * ((1.0 - tc) * at(r0, c0)[ch] + tc * at(r0, c1)[ch])
                + tr * ((1.0 - tc) * at(r1, c0)[ch] + tc * at(r1, c1)[ch]);
        }
        (out, clamped)
    }
}

/// Everything the network reads from a scene that does not depend on its
/// parameters. Built once per scene and reused across training steps.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub agent_features: Array2<f64>,
    pub agent_pos: Array2<f64>,
    pub map_features: Array2<f64>,
    pub map_pos: Array2<f64>,
    /// One `T x d` waypoint embedding per mode, from that mode's anchor.
    pub nav_inputs: Vec<Array2<f64>>,
    pub grid: FeatureGrid,
}

impl SceneInputs {
    pub fn new(scene: &Scene, modes: usize, d: usize) -> Result<Self> {
        if scene.anchors.is_empty() {
            return Err(Error::MissingAnchors(scene.id.clone()));
        }
        if d == 0 || d % 4 != 0 {
            return Err(Error::InvalidDim(d, "embedding dimension must be divisible by 4"));
        }
        // The ego vehicle is always the first agent token.
        let mut agents = vec![(Waypoint::ZERO, Waypoint::new(scene.ego_speed(), 0.0), EGO_RADIUS)];
        agents.extend(scene.agents.iter().map(|a| (a.position, a.velocity, a.radius)));
        let mut agent_features = Array2::zeros((agents.len(), AGENT_FEATURES));
        let mut agent_pos = Array2::zeros((agents.len(), d));
        for (i, (p, v, r)) in agents.iter().enumerate() {
            let f = [p.x / POS_SCALE, p.y / POS_SCALE, v.x / VEL_SCALE, v.y / VEL_SCALE, *r];
            agent_features.row_mut(i).assign(&ndarray::ArrayView1::from(&f));
            agent_pos.row_mut(i).assign(&ndarray::Array1::from(sine_embed_2d(*p, d)?));
        }

        let chunks = map_chunks(scene);
        let mut map_features = Array2::zeros((chunks.len(), MAP_FEATURES));
        let mut map_pos = Array2::zeros((chunks.len(), d));
        for (i, (a, b, kind)) in chunks.iter().enumerate() {
            let mid = (*a + *b) * 0.5;
            let len = a.dist(*b);
            let dir = if len > 0.0 { (*b - *a) * (1.0 / len) } else { Waypoint::ZERO };
            let center = f64::from(u8::from(*kind == PolylineKind::Centerline));
            let f = [mid.x / POS_SCALE, mid.y / POS_SCALE, dir.x, dir.y, len / MAP_CHUNK, center, 1.0 - center];
            map_features.row_mut(i).assign(&ndarray::ArrayView1::from(&f));
            map_pos.row_mut(i).assign(&ndarray::Array1::from(sine_embed_2d(mid, d)?));
        }

        let nav_inputs = (0..modes)
            .map(|m| waypoint_embedding(&scene.anchors[m % scene.anchors.len()], 1.0, d))
            .collect();
        Ok(Self { agent_features, agent_pos, map_features, map_pos, nav_inputs, grid: FeatureGrid::from_scene(scene) })
    }
}

/// Splits every polyline into pieces of about [`MAP_CHUNK`] meters.
fn map_chunks(scene: &Scene) -> Vec<(Waypoint, Waypoint, PolylineKind)> {
    let mut out = Vec::new();
    for line in &scene.polylines {
        let pts = &line.points;
        if pts.len() < 2 {
            continue;
        }
        let mut start = pts[0];
        let mut acc = 0.0;
        for w in pts.windows(2) {
            let mut a = w[0];
            let b = w[1];
            let mut seg = a.dist(b);
            while acc + seg >= MAP_CHUNK && seg > 0.0 {
                let t = (MAP_CHUNK - acc) / seg;
                let cut = a + (b - a) * t;
                out.push((start, cut, line.kind));
                start = cut;
                seg -= MAP_CHUNK - acc;
                a = cut;
                acc = 0.0;
            }
            acc += seg;
        }
        if acc > 1e-9 {
            out.push((start, *pts.last().expect("non-empty"), line.kind));
        }
    }
    out
}
