//! Trajectory-space primitives: waypoints, trajectories, mode sets, and the
//! JSON-Lines record used by the CLI.

use std::io::{BufRead, Write};
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admissible |x| or |y| in ego-frame meters.
pub const SCENE_BOUND: f64 = 200.0;

/// Default number of future waypoints.
pub const DEFAULT_HORIZON: usize = 6;
/// Default seconds per waypoint (2 Hz).
pub const DEFAULT_DT: f64 = 0.5;
/// Default number of predicted modes.
pub const DEFAULT_MODES: usize = 6;

/// A 2D ego-frame point in meters (x longitudinal, y lateral).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
}

impl Waypoint {
    pub const ZERO: Waypoint = Waypoint { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Waypoint) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    fn validate(self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::InvalidTrajectory(format!(
                "non-finite waypoint ({}, {})",
                self.x, self.y
            )));
        }
        if self.x.abs() > SCENE_BOUND || self.y.abs() > SCENE_BOUND {
            return Err(Error::InvalidTrajectory(format!(
                "waypoint ({}, {}) outside the {SCENE_BOUND} m scene bound",
                self.x, self.y
            )));
        }
        Ok(())
    }
}

impl From<[f64; 2]> for Waypoint {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Waypoint> for [f64; 2] {
    fn from(w: Waypoint) -> Self {
        [w.x, w.y]
    }
}

impl Add for Waypoint {
    type Output = Waypoint;
    fn add(self, o: Waypoint) -> Waypoint {
        Waypoint::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Waypoint {
    type Output = Waypoint;
    fn sub(self, o: Waypoint) -> Waypoint {
        Waypoint::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Waypoint {
    type Output = Waypoint;
    fn mul(self, s: f64) -> Waypoint {
        Waypoint::new(self.x * s, self.y * s)
    }
}

#[derive(Deserialize)]
struct RawTrajectory {
    dt: f64,
    points: Vec<Waypoint>,
}

/// An ordered sequence of future waypoints in absolute ego-frame positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory")]
pub struct Trajectory {
    dt: f64,
    points: Vec<Waypoint>,
}

impl TryFrom<RawTrajectory> for Trajectory {
    type Error = Error;
    fn try_from(raw: RawTrajectory) -> Result<Self> {
        Trajectory::new(raw.points, raw.dt)
    }
}

impl Trajectory {
    /// Validated constructor: finite points inside the scene bound, `dt > 0`.
    pub fn new(points: Vec<Waypoint>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidTrajectory(format!("horizon dt {dt} must be > 0")));
        }
        if points.is_empty() {
            return Err(Error::InvalidTrajectory("empty trajectory".into()));
        }
        for p in &points {
            p.validate()?;
        }
        Ok(Self { dt, points })
    }

    /// Builds a trajectory without the scene-bound check. Used for internal
    /// intermediate values (normalized or noised trajectories).
    pub(crate) fn from_points(points: Vec<Waypoint>, dt: f64) -> Self {
        Self { dt, points }
    }

    pub fn zeros(len: usize, dt: f64) -> Self {
        Self::from_points(vec![Waypoint::ZERO; len], dt)
    }

    /// Builds from interleaved `(x_1, y_1, ..., x_T, y_T)`.
    pub fn from_flat(flat: &[f64], dt: f64) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::InvalidTrajectory(format!(
                "flat vector has odd length {}",
                flat.len()
            )));
        }
        let points = flat.chunks_exact(2).map(|c| Waypoint::new(c[0], c[1])).collect();
        Self::new(points, dt)
    }

    pub(crate) fn from_flat_unchecked(flat: &[f64], dt: f64) -> Self {
        let points = flat.chunks_exact(2).map(|c| Waypoint::new(c[0], c[1])).collect();
        Self::from_points(points, dt)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Waypoint] {
        &self.points
    }

    pub fn last(&self) -> Waypoint {
        *self.points.last().expect("trajectories are non-empty")
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.is_finite())
    }

    /// Re-checks the construction invariants.
    pub fn validate(&self) -> Result<()> {
        Trajectory::new(self.points.clone(), self.dt).map(|_| ())
    }

    pub fn map(&self, f: impl Fn(Waypoint) -> Waypoint) -> Trajectory {
        Trajectory::from_points(self.points.iter().map(|&p| f(p)).collect(), self.dt)
    }

    /// Interleaved `(x_1, y_1, ..., x_T, y_T)`.
    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    /// l2 distance between the flattened forms.
    pub fn distance(&self, other: &Trajectory) -> f64 {
        self.squared_distance(other).sqrt()
    }

    pub fn squared_distance(&self, other: &Trajectory) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| {
                let d = *a - *b;
                d.x * d.x + d.y * d.y
            })
            .sum()
    }

    /// Per-step displacements, the inverse of [`cumulative_sum`].
    pub fn displacements(&self) -> Trajectory {
        let mut prev = Waypoint::ZERO;
        let pts = self
            .points
            .iter()
            .map(|&p| {
                let d = p - prev;
                prev = p;
                d
            })
            .collect();
        Trajectory::from_points(pts, self.dt)
    }
}

/// Prefix sum of per-step displacements into absolute positions.
pub fn cumulative_sum(deltas: &Trajectory) -> Result<Trajectory> {
    if !deltas.is_finite() {
        return Err(Error::InvalidTrajectory("non-finite displacement".into()));
    }
    let mut acc = Waypoint::ZERO;
    let pts = deltas
        .points
        .iter()
        .map(|&d| {
            acc = acc + d;
            acc
        })
        .collect();
    Ok(Trajectory::from_points(pts, deltas.dt))
}

/// Divides every coordinate by `scale`.
pub fn normalize(traj: &Trajectory, scale: f64) -> Result<Trajectory> {
    check_scale(scale)?;
    Ok(traj.map(|p| Waypoint::new(p.x / scale, p.y / scale)))
}

/// Multiplies every coordinate by `scale`.
pub fn denormalize(traj: &Trajectory, scale: f64) -> Result<Trajectory> {
    check_scale(scale)?;
    Ok(traj.map(|p| p * scale))
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidScale(scale))
    }
}

/// `M` mode-indexed trajectories predicted for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    scene_id: String,
    modes: Vec<Trajectory>,
}

impl TrajectorySet {
    pub fn new(scene_id: impl Into<String>, modes: Vec<Trajectory>) -> Result<Self> {
        if let Some(first) = modes.first() {
            if modes
                .iter()
                .any(|m| m.len() != first.len() || (m.dt - first.dt).abs() > 1e-12)
            {
                return Err(Error::InvalidSet(
                    "modes must share horizon length and dt".into(),
                ));
            }
        }
        Ok(Self { scene_id: scene_id.into(), modes })
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn modes(&self) -> &[Trajectory] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.modes.first().map_or(0, Trajectory::len)
    }

    pub fn into_modes(self) -> Vec<Trajectory> {
        self.modes
    }
}

/// One line of the trajectory JSON-Lines format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub scene_id: String,
    pub mode: usize,
    pub dt: f64,
    pub points: Vec<[f64; 2]>,
}

impl TrajectoryRecord {
    pub fn from_trajectory(scene_id: &str, mode: usize, traj: &Trajectory) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            mode,
            dt: traj.dt,
            points: traj.points.iter().map(|&p| p.into()).collect(),
        }
    }

    pub fn to_trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(self.points.iter().map(|&p| p.into()).collect(), self.dt)
    }
}

/// Writes every mode of every set, one JSON object per line.
pub fn write_jsonl<W: Write>(mut w: W, sets: &[TrajectorySet]) -> Result<()> {
    for set in sets {
        for (m, traj) in set.modes.iter().enumerate() {
            let rec = TrajectoryRecord::from_trajectory(&set.scene_id, m, traj);
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads JSON-Lines records and regroups them into sets by scene id, keeping
/// first-seen scene order and sorting modes by index. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TrajectorySet>> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: std::collections::HashMap<String, Vec<(usize, Trajectory)>> =
        std::collections::HashMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        let traj = rec
            .to_trajectory()
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        let entry = grouped.entry(rec.scene_id.clone()).or_insert_with(|| {
            order.push(rec.scene_id.clone());
            Vec::new()
        });
        entry.push((rec.mode, traj));
    }
    order
        .into_iter()
        .map(|id| {
            let mut modes = grouped.remove(&id).unwrap_or_default();
            modes.sort_by_key(|(m, _)| *m);
            TrajectorySet::new(id, modes.into_iter().map(|(_, t)| t).collect())
        })
        .collect()
}
