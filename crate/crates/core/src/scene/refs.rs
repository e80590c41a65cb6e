//! Reference trajectories: kinematically smooth variants of the expert path.

use rand::Rng;

use super::{sample_along, Scene, DEFAULT_D_THRESH};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::trajectory::{Trajectory, Waypoint};

/// Minimum flattened l2 distance between any two returned references.
pub const MIN_REFERENCE_SEPARATION: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
enum Variant {
    Expert,
    Lateral(f64),
    Speed(f64),
    Onset(usize),
    LateralSpeed(f64, f64),
}

/// True when every waypoint is drivable and clear of obstacles by `d_thresh`.
pub(crate) fn is_admissible(scene: &Scene, traj: &Trajectory, d_thresh: f64) -> bool {
    scene.trajectory_in_corridor(traj)
        && traj
            .points()
            .iter()
            .all(|&p| scene.safety.query(p).distance >= d_thresh)
}

/// `k` references for `scene`: the expert itself first, then lateral-offset,
/// speed and onset-delay variants in a fixed order, keeping only those that
/// stay in the corridor, clear the safety margin, and sit at least
/// [`MIN_REFERENCE_SEPARATION`] from every earlier pick. The result for `k` is
/// a prefix of the result for `k + 1` under the same seed.
pub fn generate_reference_gts(scene: &Scene, k: usize, rng_seed: u64) -> Result<Vec<Trajectory>> {
    if k == 0 {
        return Err(Error::InsufficientDiversity { requested: 0, found: 0 });
    }
    let mut rng = rng_for(rng_seed, 0, 0);
    let lat = rng.random_range(1.2..1.5);
    let spd = rng.random_range(0.2..0.3);
    let pool = [
        Variant::Expert,
        Variant::Lateral(lat),
        Variant::Lateral(-lat),
        Variant::Speed(1.0 + spd),
        Variant::Speed(1.0 - spd),
        Variant::Onset(2),
        Variant::Lateral(lat / 2.0),
        Variant::Lateral(-lat / 2.0),
        Variant::Speed(1.0 + spd / 2.0),
        Variant::Speed(1.0 - spd / 2.0),
        Variant::Onset(1),
        Variant::LateralSpeed(lat, 1.0 + spd),
        Variant::LateralSpeed(-lat, 1.0 - spd),
        Variant::LateralSpeed(lat, 1.0 - spd),
        Variant::LateralSpeed(-lat, 1.0 + spd),
        Variant::Onset(3),
        Variant::LateralSpeed(lat / 2.0, 1.0 + spd / 2.0),
        Variant::LateralSpeed(-lat / 2.0, 1.0 - spd / 2.0),
        Variant::LateralSpeed(lat / 2.0, 1.0 - spd / 2.0),
        Variant::LateralSpeed(-lat / 2.0, 1.0 + spd / 2.0),
        Variant::Speed(1.0 + 1.5 * spd),
        Variant::Speed(1.0 - 1.5 * spd),
    ];
    let mut picked: Vec<Trajectory> = Vec::with_capacity(k);
    for v in pool {
        if picked.len() == k {
            break;
        }
        let Some(cand) = apply(scene, v) else { continue };
        if !is_admissible(scene, &cand, DEFAULT_D_THRESH) {
            continue;
        }
        if picked.iter().any(|p| p.distance(&cand) < MIN_REFERENCE_SEPARATION) {
            continue;
        }
        picked.push(cand);
    }
    if picked.len() < k {
        return Err(Error::InsufficientDiversity { requested: k, found: picked.len() });
    }
    Ok(picked)
}

fn apply(scene: &Scene, v: Variant) -> Option<Trajectory> {
    let gt = &scene.gt;
    let pts = match v {
        Variant::Expert => gt.points().to_vec(),
        Variant::Lateral(off) => lateral(gt, off),
        Variant::Speed(f) => speed(gt, f),
        Variant::Onset(n) => onset(gt, n, scene.ego_speed()),
        Variant::LateralSpeed(off, f) => {
            let fast = Trajectory::new(speed(gt, f), gt.dt()).ok()?;
            lateral(&fast, off)
        }
    };
    Trajectory::new(pts, gt.dt()).ok()
}

fn path_with_origin(t: &Trajectory) -> Vec<Waypoint> {
    let mut pts = Vec::with_capacity(t.len() + 1);
    pts.push(Waypoint::ZERO);
    pts.extend_from_slice(t.points());
    pts
}

/// Offset along the left normal, ramped in over the first half of the horizon.
fn lateral(t: &Trajectory, offset: f64) -> Vec<Waypoint> {
    let path = path_with_origin(t);
    let n = t.len();
    let ramp_len = (n as f64 / 2.0).max(1.0);
    (1..=n)
        .map(|i| {
            let prev = path[i - 1];
            let next = if i + 1 < path.len() { path[i + 1] } else { path[i] };
            let tan = next - prev;
            let len = tan.norm().max(1e-9);
            let normal = Waypoint::new(-tan.y / len, tan.x / len);
            let u = (i as f64 / ramp_len).min(1.0);
            let ramp = u * u * (3.0 - 2.0 * u);
            path[i] + normal * (offset * ramp)
        })
        .collect()
}

/// Same geometric path travelled at `factor` times the speed.
fn speed(t: &Trajectory, factor: f64) -> Vec<Waypoint> {
    let path = path_with_origin(t);
    let mut arc = 0.0;
    path.windows(2)
        .map(|w| {
            arc += w[1].dist(w[0]);
            sample_along(&path, arc * factor)
        })
        .collect()
}

/// Keep straight for `steps` more steps, then replay the expert manoeuvre.
fn onset(t: &Trajectory, steps: usize, v: f64) -> Vec<Waypoint> {
    let step_len = v * t.dt();
    (1..=t.len())
        .map(|k| {
            if k <= steps {
                Waypoint::new(step_len * k as f64, 0.0)
            } else {
                t.points()[k - steps - 1] + Waypoint::new(step_len * steps as f64, 0.0)
            }
        })
        .collect()
}
