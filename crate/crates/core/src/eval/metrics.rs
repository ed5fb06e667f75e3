//! Per-trajectory driving metrics and their aggregate.

use serde::{Deserialize, Serialize};

use crate::kinematics::{wrap_angle, Trajectory};
use crate::scenario::{swept_collision, Scenario, EGO_RADIUS};

/// Sub-samples per step for the swept collision check.
pub const COLLISION_SUBSTEPS: usize = 10;
/// Time-to-collision at or beyond which the TTC score saturates at 1.
pub const TTC_HORIZON: f64 = 3.0;
pub const COMFORT_MAX_ACCEL: f64 = 4.0;
pub const COMFORT_MAX_JERK: f64 = 8.0;
pub const COMFORT_MAX_YAW_ACCEL: f64 = 2.0;
/// Weights of TTC, EP and comfort inside the aggregate.
pub const PDMS_WEIGHTS: [f64; 3] = [5.0, 5.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubScores {
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub comfort: f64,
}

impl SubScores {
    pub fn pdms(&self) -> f64 {
        mini_pdms(self)
    }
}

pub fn no_collision(traj: &Trajectory, scenario: &Scenario) -> f64 {
    if swept_collision(&scenario.ego_init, traj, &scenario.obstacles, COLLISION_SUBSTEPS) {
        0.0
    } else {
        1.0
    }
}

pub fn drivable_compliance(traj: &Trajectory, scenario: &Scenario) -> f64 {
    if traj.states.iter().all(|s| scenario.corridor.contains(s.position())) {
        1.0
    } else {
        0.0
    }
}

/// Distance advanced along the centerline from the start pose to the last waypoint.
pub fn corridor_progress(traj: &Trajectory, scenario: &Scenario) -> f64 {
    let start = scenario.corridor.project(scenario.ego_init.position()).station;
    traj.last()
        .map_or(0.0, |s| scenario.corridor.project(s.position()).station - start)
}

/// Progress relative to the expert, clipped to `[0, 1]`.
pub fn ego_progress(traj: &Trajectory, scenario: &Scenario) -> f64 {
    let reference = corridor_progress(&scenario.expert, scenario);
    if reference <= 1e-6 {
        return 1.0;
    }
    (corridor_progress(traj, scenario) / reference).clamp(0.0, 1.0)
}

/// Earliest `tau >= 0` with `|p + v tau| <= r`, if any.
fn first_contact(p: [f64; 2], v: [f64; 2], r: f64) -> Option<f64> {
    let c = p[0] * p[0] + p[1] * p[1] - r * r;
    if c <= 0.0 {
        return Some(0.0);
    }
    let a = v[0] * v[0] + v[1] * v[1];
    let b = 2.0 * (p[0] * v[0] + p[1] * v[1]);
    if a <= 0.0 || b >= 0.0 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    Some((-b - disc.sqrt()) / (2.0 * a))
}

/// Minimum time-to-collision along the trajectory, extrapolating the ego
/// along its heading and every obstacle at its own constant velocity.
pub fn min_time_to_collision(traj: &Trajectory, scenario: &Scenario) -> f64 {
    let mut best = f64::INFINITY;
    for (i, s) in traj.states.iter().enumerate() {
        let t = (i + 1) as f64 * traj.dt;
        let ego_v = [s.speed * s.heading.cos(), s.speed * s.heading.sin()];
        for o in &scenario.obstacles {
            let c = o.position_at(t);
            let p = [c[0] - s.x, c[1] - s.y];
            let v = [o.velocity[0] - ego_v[0], o.velocity[1] - ego_v[1]];
            if let Some(tau) = first_contact(p, v, EGO_RADIUS + o.radius) {
                best = best.min(tau);
            }
        }
    }
    best
}

pub fn time_to_collision(traj: &Trajectory, scenario: &Scenario) -> f64 {
    (min_time_to_collision(traj, scenario) / TTC_HORIZON).clamp(0.0, 1.0)
}

/// Finite-difference kinematics of the waypoint sequence, starting from the
/// scenario's initial pose: `(speeds, headings)` per segment.
fn segment_kinematics(traj: &Trajectory, scenario: &Scenario) -> (Vec<f64>, Vec<f64>) {
    let mut prev = scenario.ego_init.position();
    let mut heading = scenario.ego_init.heading;
    let mut speeds = Vec::with_capacity(traj.len());
    let mut headings = Vec::with_capacity(traj.len());
    for s in &traj.states {
        let (dx, dy) = (s.x - prev[0], s.y - prev[1]);
        let d = dx.hypot(dy);
        if d > 1e-6 {
            heading = dy.atan2(dx);
        }
        speeds.push(d / traj.dt);
        headings.push(heading);
        prev = s.position();
    }
    (speeds, headings)
}

/// 1 when acceleration, jerk and yaw acceleration all stay within the
/// comfort limits, else 0.
pub fn comfort(traj: &Trajectory, scenario: &Scenario) -> f64 {
    let dt = traj.dt;
    let (speeds, headings) = segment_kinematics(traj, scenario);
    let diff = |v: &[f64]| v.windows(2).map(|w| (w[1] - w[0]) / dt).collect::<Vec<_>>();
    let accel = diff(&speeds);
    let jerk = diff(&accel);
    let yaw_rate: Vec<f64> = headings.windows(2).map(|w| wrap_angle(w[1] - w[0]) / dt).collect();
    let yaw_accel = diff(&yaw_rate);
    let within = |v: &[f64], lim: f64| v.iter().all(|x| x.abs() <= lim + 1e-9);
    if within(&accel, COMFORT_MAX_ACCEL) && within(&jerk, COMFORT_MAX_JERK) && within(&yaw_accel, COMFORT_MAX_YAW_ACCEL) {
        1.0
    } else {
        0.0
    }
}

pub fn mini_pdms(s: &SubScores) -> f64 {
    let [wt, we, wc] = PDMS_WEIGHTS;
    s.nc * s.dac * (wt * s.ttc + we * s.ep + wc * s.comfort) / (wt + we + wc)
}

pub fn sub_scores(traj: &Trajectory, scenario: &Scenario) -> SubScores {
    SubScores {
        nc: no_collision(traj, scenario),
        dac: drivable_compliance(traj, scenario),
        ep: ego_progress(traj, scenario),
        ttc: time_to_collision(traj, scenario),
        comfort: comfort(traj, scenario),
    }
}
