//! Vehicle state, control inputs and the kinematic bicycle transition.
//!
//! The transition uses the yaw-rate form: heading integrates the commanded
//! yaw rate directly, so no wheelbase is needed. Positions advance with the
//! pre-step speed and heading (forward Euler).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-PI, PI]`.
///
/// Angles already in range are returned bit-for-bit unchanged.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut wrapped = angle.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped -= 2.0 * PI;
    }
    if wrapped <= -PI {
        wrapped += 2.0 * PI;
    }
    wrapped
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl EgoState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            speed: speed.max(0.0),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite() && self.speed.is_finite()
    }

    /// Expresses a world point in this state's body frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Rotates a world-frame vector into this state's body frame.
    pub fn rotate_to_local(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub accel: f64,
    pub yaw_rate: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput {
        accel: 0.0,
        yaw_rate: 0.0,
    };

    pub fn new(accel: f64, yaw_rate: f64) -> Self {
        Self { accel, yaw_rate }
    }

    pub fn clamped(self, limits: &ControlLimits) -> Self {
        Self {
            accel: self.accel.clamp(-limits.max_accel, limits.max_accel),
            yaw_rate: self.yaw_rate.clamp(-limits.max_yaw_rate, limits.max_yaw_rate),
        }
    }

    pub fn is_admissible(&self, limits: &ControlLimits) -> bool {
        self.accel.is_finite()
            && self.yaw_rate.is_finite()
            && self.accel.abs() <= limits.max_accel
            && self.yaw_rate.abs() <= limits.max_yaw_rate
    }
}

/// Admissible control box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlLimits {
    pub max_accel: f64,
    pub max_yaw_rate: f64,
}

impl Default for ControlLimits {
    fn default() -> Self {
        Self {
            max_accel: 4.0,
            max_yaw_rate: 1.0,
        }
    }
}

/// `T` future states sampled every `dt` seconds. The start state is not included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<EgoState>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(states: Vec<EgoState>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { states, dt })
    }

    /// Builds a trajectory from waypoints, deriving heading and speed from
    /// forward differences. The final state reuses the last segment.
    pub fn from_positions(start: &EgoState, positions: &[[f64; 2]], dt: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("empty waypoint list".into()));
        }
        let n = positions.len();
        let mut states = Vec::with_capacity(n);
        let mut prev_heading = start.heading;
        for i in 0..n {
            let (from, to) = if i + 1 < n {
                (positions[i], positions[i + 1])
            } else if n >= 2 {
                (positions[n - 2], positions[n - 1])
            } else {
                (start.position(), positions[0])
            };
            let dx = to[0] - from[0];
            let dy = to[1] - from[1];
            let dist = dx.hypot(dy);
            let heading = if dist > 1e-6 { dy.atan2(dx) } else { prev_heading };
            prev_heading = heading;
            states.push(EgoState::new(positions[i][0], positions[i][1], heading, dist / dt));
        }
        Trajectory::new(states, dt)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.states.iter().map(EgoState::position).collect()
    }

    pub fn last(&self) -> Option<&EgoState> {
        self.states.last()
    }
}

/// One forward-Euler step of the yaw-rate bicycle model.
pub fn bicycle_step(state: &EgoState, ctrl: &ControlInput, dt: f64) -> Result<EgoState> {
    if !state.is_finite() || !ctrl.accel.is_finite() || !ctrl.yaw_rate.is_finite() || !dt.is_finite() {
        return Err(Error::NonFinite(format!(
            "bicycle_step input: state={state:?} ctrl={ctrl:?} dt={dt}"
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    Ok(EgoState {
        x: state.x + state.speed * state.heading.cos() * dt,
        y: state.y + state.speed * state.heading.sin() * dt,
        heading: wrap_angle(state.heading + ctrl.yaw_rate * dt),
        speed: (state.speed + ctrl.accel * dt).max(0.0),
    })
}

/// Rolls `controls` out from `start`, clamping each control to the default limits.
pub fn rollout_controls(start: &EgoState, controls: &[ControlInput], dt: f64) -> Result<Trajectory> {
    rollout_controls_with(start, controls, dt, &ControlLimits::default())
}

pub fn rollout_controls_with(
    start: &EgoState,
    controls: &[ControlInput],
    dt: f64,
    limits: &ControlLimits,
) -> Result<Trajectory> {
    if controls.is_empty() {
        return Err(Error::InvalidArgument("empty control sequence".into()));
    }
    let mut states = Vec::with_capacity(controls.len());
    let mut state = *start;
    for ctrl in controls {
        state = bicycle_step(&state, &ctrl.clamped(limits), dt)?;
        states.push(state);
    }
    Trajectory::new(states, dt)
}

/// Constant-velocity extrapolation from `start` (zero controls).
pub fn constant_velocity(start: &EgoState, horizon: usize, dt: f64) -> Result<Trajectory> {
    rollout_controls(start, &vec![ControlInput::ZERO; horizon], dt)
}

/// Recovers the controls that map each state to its successor.
///
/// Returns `None` when some transition is not explained by the bicycle model
/// (position mismatch above `tol`).
pub fn recover_controls(start: &EgoState, traj: &Trajectory, tol: f64) -> Option<Vec<ControlInput>> {
    let mut prev = *start;
    let mut out = Vec::with_capacity(traj.len());
    for s in &traj.states {
        let ex = prev.x + prev.speed * prev.heading.cos() * traj.dt;
        let ey = prev.y + prev.speed * prev.heading.sin() * traj.dt;
        if (ex - s.x).abs() > tol || (ey - s.y).abs() > tol {
            return None;
        }
        out.push(ControlInput {
            accel: (s.speed - prev.speed) / traj.dt,
            yaw_rate: wrap_angle(s.heading - prev.heading) / traj.dt,
        });
        prev = *s;
    }
    Some(out)
}

fn check_lengths(pred: &Trajectory, reference: &Trajectory) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::LengthMismatch(pred.len(), reference.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    Ok(())
}

fn dist(a: &EgoState, b: &EgoState) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Average displacement error over (x, y).
pub fn ade(pred: &Trajectory, reference: &Trajectory) -> Result<f64> {
    check_lengths(pred, reference)?;
    let total: f64 = pred.states.iter().zip(&reference.states).map(|(a, b)| dist(a, b)).sum();
    Ok(total / pred.len() as f64)
}

/// Final displacement error over (x, y).
pub fn fde(pred: &Trajectory, reference: &Trajectory) -> Result<f64> {
    check_lengths(pred, reference)?;
    Ok(dist(pred.states.last().unwrap(), reference.states.last().unwrap()))
}
