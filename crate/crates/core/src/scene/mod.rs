//! Procedural driving scenes: road polylines, surrounding agents, the expert
//! trajectory, its reference variants, anchors, and the safety field.

mod anchors;
mod refs;
pub mod safety;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, stream};
use crate::trajectory::{Trajectory, Waypoint, DEFAULT_DT, DEFAULT_HORIZON, DEFAULT_MODES};

pub use anchors::generate_anchors;
pub use refs::generate_reference_gts;
pub use safety::{build_safety_field, Bounds, Obstacle, SafetyField, SafetyQuery};

/// Half of a lane width; a point is drivable when it is this close to a lane
/// centerline.
pub const LANE_HALF_WIDTH: f64 = 1.75;
/// Lane spacing in meters.
pub const LANE_WIDTH: f64 = 3.5;
/// Default safety margin used when validating generated references.
pub const DEFAULT_D_THRESH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    LeftTurn,
    RightTurn,
    Obstacle,
    Merge,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::Straight,
        Template::LeftTurn,
        Template::RightTurn,
        Template::Obstacle,
        Template::Merge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::LeftTurn => "left_turn",
            Template::RightTurn => "right_turn",
            Template::Obstacle => "obstacle",
            Template::Merge => "merge",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Template::ALL
            .into_iter()
            .find(|t| t.name() == norm || t.name().replace('_', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown scene template '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    Centerline,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub kind: PolylineKind,
    pub points: Vec<Waypoint>,
}

impl Polyline {
    pub fn distance(&self, p: Waypoint) -> f64 {
        match self.points.as_slice() {
            [] => f64::INFINITY,
            [only] => p.dist(*only),
            pts => pts
                .windows(2)
                .map(|w| safety::point_segment_distance(p, w[0], w[1]))
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn segments(&self) -> impl Iterator<Item = (Waypoint, Waypoint)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }
}

/// A surrounding road user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Waypoint,
    pub velocity: Waypoint,
    pub radius: f64,
}

impl AgentState {
    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }
}

/// Conditioning context plus supervision targets for one planning problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub template: Template,
    pub polylines: Vec<Polyline>,
    pub agents: Vec<AgentState>,
    pub goal: Waypoint,
    pub gt: Trajectory,
    pub refs: Vec<Trajectory>,
    pub anchors: Vec<Trajectory>,
    pub safety: SafetyField,
}

impl Scene {
    /// Inside the drivable corridor: close enough to some lane centerline.
    pub fn in_corridor(&self, p: Waypoint) -> bool {
        self.polylines
            .iter()
            .filter(|l| l.kind == PolylineKind::Centerline)
            .any(|l| l.distance(p) <= LANE_HALF_WIDTH + 0.05)
    }

    pub fn trajectory_in_corridor(&self, t: &Trajectory) -> bool {
        t.points().iter().all(|&p| self.in_corridor(p))
    }

    /// Current ego speed, read off the first expert displacement.
    pub fn ego_speed(&self) -> f64 {
        self.gt.points()[0].norm() / self.gt.dt()
    }

    pub fn obstacles(&self) -> Vec<Obstacle> {
        scene_obstacles(&self.agents, &self.polylines)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(s)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.refs.is_empty() {
            return Err(Error::InvalidCorpus(format!("scene {} has no reference trajectories", self.id)));
        }
        let t = self.gt.len();
        if self.refs.iter().chain(&self.anchors).any(|r| r.len() != t) {
            return Err(Error::InvalidCorpus(format!(
                "scene {}: references and anchors must share the gt horizon {t}",
                self.id
            )));
        }
        if self.safety.num_rows() == 0 || self.safety.num_cols() == 0 {
            return Err(Error::InvalidCorpus(format!("scene {} has an empty safety field", self.id)));
        }
        if self.safety.rows.iter().any(|r| r.len() != self.safety.num_cols()) {
            return Err(Error::InvalidCorpus(format!("scene {} has a ragged safety field", self.id)));
        }
        Ok(())
    }
}

pub fn scene_obstacles(agents: &[AgentState], polylines: &[Polyline]) -> Vec<Obstacle> {
    let mut obs: Vec<Obstacle> = agents
        .iter()
        .map(|a| Obstacle::Disk { center: a.position, radius: a.radius })
        .collect();
    for line in polylines.iter().filter(|l| l.kind == PolylineKind::Boundary) {
        obs.extend(line.segments().map(|(a, b)| Obstacle::Segment { a, b }));
    }
    obs
}

/// Scene-generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub horizon: usize,
    pub dt: f64,
    pub k_ref: usize,
    pub cell_size: f64,
    pub bounds: Bounds,
    pub d_thresh: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            dt: DEFAULT_DT,
            k_ref: DEFAULT_MODES,
            cell_size: 0.5,
            bounds: Bounds::default(),
            d_thresh: DEFAULT_D_THRESH,
        }
    }
}

/// [`generate_scene_with`] at default settings.
pub fn generate_scene(seed: u64, template: Template) -> Result<Scene> {
    generate_scene_with(seed, template, &SceneConfig::default())
}

/// Deterministic scene for `(seed, template)`. The result has its reference
/// set filled (`cfg.k_ref`, at least one) and no anchors; anchors come from a
/// corpus via [`generate_anchors`].
pub fn generate_scene_with(seed: u64, template: Template, cfg: &SceneConfig) -> Result<Scene> {
    let mut rng = rng_for(seed, stream::SCENE, template as u64);
    let mut last_err = None;
    for _attempt in 0..64 {
        let layout = Layout::sample(template, cfg, &mut rng);
        let gt = layout.expert(cfg)?;
        let polylines = layout.polylines(cfg);
        let agents = place_agents(&layout, &gt, &polylines, cfg, &mut rng);
        let safety = build_safety_field(&scene_obstacles(&agents, &polylines), cfg.bounds, cfg.cell_size)?;
        let mut scene = Scene {
            id: format!("{}-{seed:016x}", template.name()),
            template,
            polylines,
            agents,
            goal: gt.last(),
            gt: gt.clone(),
            refs: vec![gt],
            anchors: Vec::new(),
            safety,
        };
        if !refs::is_admissible(&scene, &scene.gt, cfg.d_thresh) {
            continue;
        }
        match generate_reference_gts(&scene, cfg.k_ref.max(1), derive_seed(seed, stream::REFS, 0)) {
            Ok(r) => {
                scene.refs = r;
                return Ok(scene);
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or(Error::InsufficientData(format!(
        "could not lay out a valid {template} scene"
    ))))
}

/// Builds `count` scenes cycling through `templates`, then fills every
/// scene's anchors with `modes` k-means centres over the corpus experts.
pub fn generate_corpus(
    count: usize,
    seed: u64,
    templates: &[Template],
    modes: usize,
    cfg: &SceneConfig,
) -> Result<Vec<Scene>> {
    if templates.is_empty() {
        return Err(Error::Config("at least one scene template is required".into()));
    }
    let mut scenes = (0..count)
        .map(|i| {
            let template = templates[i % templates.len()];
            generate_scene_with(derive_seed(seed, stream::SCENE, i as u64), template, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    if !scenes.is_empty() {
        let anchors = generate_anchors(&scenes, modes, derive_seed(seed, stream::ANCHORS, 0))?;
        for s in &mut scenes {
            s.anchors = anchors.clone();
        }
    }
    Ok(scenes)
}

/// Route geometry of one template instance.
#[derive(Debug, Clone)]
struct Layout {
    template: Template,
    speed: f64,
    /// Distance covered over the horizon.
    horizon_len: f64,
    /// Straight: lateral drift reached at the horizon.
    drift: f64,
    /// Turns: straight run-up before the arc, radius, signed angle.
    run_up: f64,
    radius: f64,
    angle: f64,
    /// Lane changes: longitudinal start/end of the shift.
    shift_start: f64,
    shift_end: f64,
    /// Obstacle x position, or the merge point where the ego lane ends.
    feature_x: f64,
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

impl Layout {
    fn sample(template: Template, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Self {
        let speed = rng.random_range(5.0..12.0);
        let length = speed * cfg.horizon as f64 * cfg.dt;
        let mut l = Layout {
            template,
            speed,
            horizon_len: length,
            drift: 0.0,
            run_up: 0.0,
            radius: f64::INFINITY,
            angle: 0.0,
            shift_start: 0.0,
            shift_end: 0.0,
            feature_x: 0.0,
        };
        match template {
            Template::Straight => l.drift = rng.random_range(-0.3..0.3),
            Template::LeftTurn | Template::RightTurn => {
                let sign = if template == Template::LeftTurn { 1.0 } else { -1.0 };
                l.run_up = rng.random_range(0.0..0.25) * length;
                let angle = rng.random_range(75.0f64..105.0).to_radians();
                l.radius = ((length - l.run_up) / angle).max(6.0);
                l.angle = sign * angle;
            }
            Template::Obstacle => {
                l.feature_x = rng.random_range(0.5..0.7) * length + 2.0;
                l.shift_start = (l.feature_x - 14.0).max(0.0);
                l.shift_end = (l.feature_x - 3.0).max(l.shift_start + 4.0);
            }
            Template::Merge => {
                l.shift_start = rng.random_range(0.1..0.3) * length;
                l.shift_end = l.shift_start + rng.random_range(0.35..0.5) * length;
                l.feature_x = l.shift_end + 3.0;
            }
        }
        l
    }

    /// Point at longitudinal route parameter `s` of the followed path.
    fn route(&self, s: f64) -> Waypoint {
        match self.template {
            Template::Straight => Waypoint::new(s, self.drift * (s / self.horizon_len).powi(2)),
            Template::LeftTurn | Template::RightTurn => turn_point(self.run_up, self.radius, self.angle, s, 0.0),
            Template::Obstacle | Template::Merge => {
                let u = (s - self.shift_start) / (self.shift_end - self.shift_start);
                Waypoint::new(s, LANE_WIDTH * smoothstep(u))
            }
        }
    }

    fn expert(&self, cfg: &SceneConfig) -> Result<Trajectory> {
        let pts = (1..=cfg.horizon)
            .map(|k| self.route(self.speed * k as f64 * cfg.dt))
            .collect();
        Trajectory::new(pts, cfg.dt)
    }

    fn polylines(&self, cfg: &SceneConfig) -> Vec<Polyline> {
        let b = cfg.bounds;
        let xs = |y: f64, x0: f64, x1: f64| vec![Waypoint::new(x0, y), Waypoint::new(x1, y)];
        let center = |points| Polyline { kind: PolylineKind::Centerline, points };
        let boundary = |points| Polyline { kind: PolylineKind::Boundary, points };
        let edge = LANE_WIDTH + LANE_HALF_WIDTH + 0.75;
        match self.template {
            Template::Straight | Template::Obstacle => vec![
                center(xs(-LANE_WIDTH, b.min.x, b.max.x)),
                center(xs(0.0, b.min.x, b.max.x)),
                center(xs(LANE_WIDTH, b.min.x, b.max.x)),
                boundary(xs(-edge, b.min.x, b.max.x)),
                boundary(xs(edge, b.min.x, b.max.x)),
            ],
            Template::Merge => {
                let x_end = self.feature_x;
                let right = -(LANE_HALF_WIDTH + 0.75);
                vec![
                    center(xs(0.0, b.min.x, x_end)),
                    center(xs(LANE_WIDTH, b.min.x, b.max.x)),
                    boundary(xs(edge, b.min.x, b.max.x)),
                    boundary(vec![
                        Waypoint::new(b.min.x, right),
                        Waypoint::new(x_end, right),
                        Waypoint::new(x_end + 8.0, LANE_WIDTH + right),
                        Waypoint::new(b.max.x.max(x_end + 9.0), LANE_WIDTH + right),
                    ]),
                ]
            }
            Template::LeftTurn | Template::RightTurn => {
                let half = LANE_HALF_WIDTH + 1.0;
                let inside = |p: Waypoint| {
                    p.x >= b.min.x - 5.0 && p.x <= b.max.x + 5.0 && p.y >= b.min.y - 5.0 && p.y <= b.max.y + 5.0
                };
                let trace = |offset: f64| {
                    let mut pts = Vec::new();
                    let mut s = b.min.x;
                    while s <= 120.0 {
                        let p = turn_point(self.run_up, self.radius, self.angle, s, offset);
                        if !inside(p) && s > 0.0 {
                            break;
                        }
                        pts.push(p);
                        s += 1.0;
                    }
                    pts
                };
                vec![center(trace(0.0)), boundary(trace(half)), boundary(trace(-half))]
            }
        }
    }
}

/// Straight run-up along +x, a circular arc, then straight again; `offset`
/// displaces to the left of travel.
fn turn_point(run_up: f64, radius: f64, angle: f64, s: f64, offset: f64) -> Waypoint {
    let sign = angle.signum();
    let arc_len = radius * angle.abs();
    if s <= run_up {
        return Waypoint::new(s, offset);
    }
    let centre = Waypoint::new(run_up, sign * radius);
    let arc_pos = |phi: f64| {
        // phi: heading; position on the circle at that heading.
        let r = radius - sign * offset;
        Waypoint::new(centre.x + r * phi.sin(), centre.y - sign * r * phi.cos())
    };
    if s <= run_up + arc_len {
        let phi = (s - run_up) / radius;
        return arc_pos(phi);
    }
    let end = arc_pos(angle.abs());
    let heading = angle;
    let extra = s - run_up - arc_len;
    Waypoint::new(end.x + extra * heading.cos(), end.y + extra * heading.sin())
}

fn place_agents(
    layout: &Layout,
    gt: &Trajectory,
    polylines: &[Polyline],
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<AgentState> {
    let mut agents = Vec::new();
    if layout.template == Template::Obstacle {
        agents.push(AgentState {
            position: Waypoint::new(layout.feature_x, 0.0),
            velocity: Waypoint::ZERO,
            radius: 1.2,
        });
    }
    let target = rng.random_range(2..=5usize);
    let centerlines: Vec<&Polyline> =
        polylines.iter().filter(|l| l.kind == PolylineKind::Centerline).collect();
    let mut path = vec![Waypoint::ZERO];
    path.extend_from_slice(gt.points());
    let path = Polyline { kind: PolylineKind::Centerline, points: path };
    let b = cfg.bounds;
    for _ in 0..200 {
        if agents.len() >= target {
            break;
        }
        let line = centerlines[rng.random_range(0..centerlines.len())];
        let seg = rng.random_range(0..line.points.len() - 1);
        let (a, c) = (line.points[seg], line.points[seg + 1]);
        let u: f64 = rng.random();
        let dir = c - a;
        let len = dir.norm().max(1e-9);
        let (tx, ty) = (dir.x / len, dir.y / len);
        // Either in-lane traffic or a vehicle parked beyond the road edge.
        let parked = rng.random_bool(0.3);
        let lateral = if parked {
            (LANE_HALF_WIDTH + 3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        } else {
            rng.random_range(-0.4..0.4)
        };
        let pos = a + dir * u + Waypoint::new(-ty, tx) * lateral;
        let radius = rng.random_range(0.8..1.2);
        let speed = if parked { 0.0 } else { rng.random_range(0.0..10.0) };
        if pos.x < b.min.x + 2.0 || pos.x > b.max.x - 2.0 || pos.y < b.min.y + 2.0 || pos.y > b.max.y - 2.0 {
            continue;
        }
        if path.distance(pos) < radius + 2.4 || pos.norm() < radius + 4.0 {
            continue;
        }
        if agents.iter().any(|o: &AgentState| o.position.dist(pos) < o.radius + radius + 1.0) {
            continue;
        }
        agents.push(AgentState { position: pos, velocity: Waypoint::new(tx * speed, ty * speed), radius });
    }
    agents
}

/// Arc-length parameterised polyline through the origin and `traj`, with a
/// straight extrapolation past its end.
pub(crate) fn sample_along(points: &[Waypoint], s: f64) -> Waypoint {
    let mut acc = 0.0;
    for w in points.windows(2) {
        let seg = w[1].dist(w[0]);
        if seg > 0.0 && acc + seg >= s {
            return w[0] + (w[1] - w[0]) * ((s - acc) / seg);
        }
        acc += seg;
    }
    let n = points.len();
    let (a, b) = (points[n - 2], points[n - 1]);
    let seg = b.dist(a).max(1e-9);
    b + (b - a) * ((s - acc) / seg)
}
