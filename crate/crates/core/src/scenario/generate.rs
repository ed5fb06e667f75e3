//! Procedural scenario synthesis with a pure-pursuit expert.

use std::f64::consts::FRAC_PI_2;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::geometry::{cumulative_lengths, point_at, project};
use super::{validate_scenario, LaneCorridor, Maneuver, Obstacle, Scenario, ScenarioConfig, EGO_RADIUS};
use crate::error::{Error, Result};
use crate::kinematics::{bicycle_step, wrap_angle, ControlInput, EgoState, Trajectory};
use crate::tensor::Array;

/// Centerline vertex spacing in meters.
const SPACING: f64 = 1.0;
/// Corridor length behind the ego start.
const BACKSTOP: f64 = 10.0;
const ACCEL_LIMIT: f64 = 2.5;
const JERK_LIMIT: f64 = 4.0;
const YAW_ACCEL_LIMIT: f64 = 1.5;

struct PathBuilder {
    points: Vec<[f64; 2]>,
    heading: f64,
}

impl PathBuilder {
    fn new(start: [f64; 2]) -> Self {
        Self {
            points: vec![start],
            heading: 0.0,
        }
    }

    fn last(&self) -> [f64; 2] {
        *self.points.last().unwrap()
    }

    fn straight(&mut self, length: f64) -> &mut Self {
        let n = (length / SPACING).ceil().max(1.0) as usize;
        let step = length / n as f64;
        let (s, c) = self.heading.sin_cos();
        for _ in 0..n {
            let p = self.last();
            self.points.push([p[0] + step * c, p[1] + step * s]);
        }
        self
    }

    /// Circular arc turning by `angle` (positive = left).
    fn arc(&mut self, radius: f64, angle: f64) -> &mut Self {
        let n = (radius * angle.abs() / SPACING).ceil().max(1.0) as usize;
        let dphi = angle / n as f64;
        let chord = 2.0 * radius * (dphi.abs() / 2.0).sin();
        for _ in 0..n {
            let mid = self.heading + dphi / 2.0;
            let p = self.last();
            self.points.push([p[0] + chord * mid.cos(), p[1] + chord * mid.sin()]);
            self.heading += dphi;
        }
        self
    }
}

/// Reference speed as a function of centerline station.
enum SpeedProfile {
    Cruise(f64),
    StopAt { station: f64, decel: f64 },
}

impl SpeedProfile {
    fn at(&self, station: f64) -> f64 {
        match *self {
            SpeedProfile::Cruise(v) => v,
            SpeedProfile::StopAt { station: stop, decel } => (2.0 * decel * (stop - station).max(0.0)).sqrt(),
        }
    }
}

struct Plan {
    maneuver: Maneuver,
    corridor: LaneCorridor,
    reference: Vec<[f64; 2]>,
    obstacles: Vec<Obstacle>,
    ego: EgoState,
    speed: SpeedProfile,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn offset_path(points: &[[f64; 2]], offset: impl Fn(f64) -> f64) -> Vec<[f64; 2]> {
    let cum = cumulative_lengths(points);
    (0..points.len())
        .map(|i| {
            let (a, b) = if i + 1 < points.len() {
                (points[i], points[i + 1])
            } else {
                (points[i - 1], points[i])
            };
            let h = (b[1] - a[1]).atan2(b[0] - a[0]);
            let d = offset(cum[i]);
            [points[i][0] - d * h.sin(), points[i][1] + d * h.cos()]
        })
        .collect()
}

fn sample_plan(rng: &mut ChaCha8Rng, config: &ScenarioConfig) -> Result<Plan> {
    let dist = WeightedIndex::new(config.maneuver_weights)
        .map_err(|e| Error::InvalidArgument(format!("maneuver weights: {e}")))?;
    let maneuver = Maneuver::ALL[dist.sample(rng)];
    let mut path = PathBuilder::new([-BACKSTOP, 0.0]);
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut half_width = rng.gen_range(2.5..3.5);
    let mut main_obstacle = None;
    let ego_station = BACKSTOP;
    let (v0, speed) = match maneuver {
        Maneuver::Straight => {
            path.straight(110.0);
            (12.0 + sign * rng.gen_range(2.0..4.0), SpeedProfile::Cruise(12.0))
        }
        Maneuver::LeftTurn | Maneuver::RightTurn => {
            let dir = if maneuver == Maneuver::LeftTurn { 1.0 } else { -1.0 };
            path.straight(BACKSTOP + rng.gen_range(5.0..15.0))
                .arc(rng.gen_range(12.0..18.0), dir * FRAC_PI_2)
                .straight(60.0);
            (rng.gen_range(8.0..11.0), SpeedProfile::Cruise(6.0))
        }
        Maneuver::LaneFollowCurve => {
            path.straight(BACKSTOP + rng.gen_range(0.0..10.0))
                .arc(rng.gen_range(40.0..80.0), sign * rng.gen_range(0.5..1.0))
                .straight(60.0);
            (10.0 + sign * rng.gen_range(2.0..4.0), SpeedProfile::Cruise(10.0))
        }
        Maneuver::StopForObstacle => {
            path.straight(110.0);
            let v0: f64 = rng.gen_range(6.0..10.0);
            let radius = rng.gen_range(0.8..1.5);
            let ahead = rng.gen_range(20.0..35.0);
            let stop = ahead - radius - EGO_RADIUS - rng.gen_range(2.0..4.0);
            let decel = v0 * v0 / (2.0 * (stop - 3.0).max(1.0));
            if decel > 2.5 {
                return Err(Error::InvalidArgument("stop too short".into()));
            }
            main_obstacle = Some(Obstacle {
                center: [ahead, 0.0],
                radius,
                velocity: [0.0, 0.0],
            });
            (
                v0,
                SpeedProfile::StopAt {
                    station: ego_station + stop,
                    decel: decel.max(0.8),
                },
            )
        }
        Maneuver::OvertakeStatic => {
            path.straight(110.0);
            let radius = rng.gen_range(0.8..1.4);
            let ahead = rng.gen_range(20.0..32.0);
            let clearance = radius + EGO_RADIUS + rng.gen_range(1.0..1.5);
            half_width = clearance + rng.gen_range(1.0..1.5);
            main_obstacle = Some(Obstacle {
                center: [ahead, 0.0],
                radius,
                velocity: [0.0, 0.0],
            });
            (rng.gen_range(6.0..11.0), SpeedProfile::Cruise(8.0))
        }
    };
    let centerline = path.points;
    let reference = match (maneuver, main_obstacle) {
        (Maneuver::OvertakeStatic, Some(o)) => {
            let s_o = ego_station + o.center[0];
            let d = sign * (o.radius + EGO_RADIUS + (half_width - o.radius - EGO_RADIUS) * 0.55);
            offset_path(&centerline, |s| {
                let up = smoothstep((s - (s_o - 18.0)) / 12.0);
                let down = 1.0 - smoothstep((s - (s_o + 6.0)) / 12.0);
                d * up.min(down)
            })
        }
        _ => centerline.clone(),
    };
    let corridor = LaneCorridor {
        centerline,
        half_width,
    };
    let mut obstacles: Vec<Obstacle> = main_obstacle.into_iter().collect();
    let max_clutter = config.max_obstacles.saturating_sub(obstacles.len()).min(3);
    let n_clutter = rng.gen_range(0..=max_clutter);
    let cum = cumulative_lengths(&corridor.centerline);
    for _ in 0..n_clutter {
        let s = ego_station + rng.gen_range(0.0..60.0);
        let (p, h) = point_at(&corridor.centerline, &cum, s);
        let radius = rng.gen_range(0.5..1.5);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let lat = side * (half_width + radius + rng.gen_range(0.3..3.0));
        let speed = if config.moving_obstacles { rng.gen_range(-3.0..3.0) } else { 0.0 };
        obstacles.push(Obstacle {
            center: [p[0] - lat * h.sin(), p[1] + lat * h.cos()],
            radius,
            velocity: [speed * h.cos(), speed * h.sin()],
        });
    }
    Ok(Plan {
        maneuver,
        corridor,
        reference,
        obstacles,
        ego: EgoState::new(0.0, 0.0, 0.0, v0),
        speed,
    })
}

/// Pure-pursuit steering plus a jerk-limited speed loop, rolled through the
/// bicycle model.
fn drive_expert(plan: &Plan, config: &ScenarioConfig) -> Result<Trajectory> {
    let cum = cumulative_lengths(&plan.reference);
    let mut state = plan.ego;
    let mut prev = ControlInput::ZERO;
    let mut states = Vec::with_capacity(config.horizon);
    let yaw_cap = config.limits.max_yaw_rate * 0.95;
    for _ in 0..config.horizon {
        let pos = state.position();
        let proj = project(&plan.reference, pos);
        let lookahead = (1.2 * state.speed).max(5.0);
        let (target, _) = point_at(&plan.reference, &cum, proj.station + lookahead);
        let alpha = wrap_angle((target[1] - pos[1]).atan2(target[0] - pos[0]) - state.heading);
        let curvature = 2.0 * alpha.sin() / lookahead;
        let yaw_cmd = state.speed.max(1.0) * curvature;
        let dw = YAW_ACCEL_LIMIT * config.dt;
        let yaw_rate = yaw_cmd.clamp(prev.yaw_rate - dw, prev.yaw_rate + dw).clamp(-yaw_cap, yaw_cap);

        let center_station = project(&plan.corridor.centerline, pos).station;
        let v_ref = plan.speed.at(center_station);
        let a_cmd = (1.2 * (v_ref - state.speed)).clamp(-ACCEL_LIMIT, ACCEL_LIMIT);
        let da = JERK_LIMIT * config.dt;
        let accel = a_cmd.clamp(prev.accel - da, prev.accel + da);

        let ctrl = ControlInput::new(accel, yaw_rate).clamped(&config.limits);
        state = bicycle_step(&state, &ctrl, config.dt)?;
        states.push(state);
        prev = ctrl;
    }
    Trajectory::new(states, config.dt)
}

fn attempt(seed: u64, rng: &mut ChaCha8Rng, config: &ScenarioConfig) -> Result<Scenario> {
    let plan = sample_plan(rng, config)?;
    let expert = drive_expert(&plan, config)?;
    let mut scenario = Scenario {
        id: format!("scn-{seed:016x}"),
        seed,
        corridor: plan.corridor,
        obstacles: plan.obstacles,
        ego_init: plan.ego,
        expert,
        maneuver: plan.maneuver,
        scene_tokens: Array::zeros(0, 0),
        semantic_ctx: Array::zeros(0, 0),
    };
    scenario.refresh_features(config)?;
    validate_scenario(&scenario, config)?;
    Ok(scenario)
}

/// Samples one scenario. Deterministic in `(seed, config)`.
///
/// Rejected draws are retried on independent RNG streams; after
/// `config.max_retries` failures the seed is reported as unusable.
pub fn generate_scenario(seed: u64, config: &ScenarioConfig) -> Result<Scenario> {
    if config.horizon == 0 || !(config.dt > 0.0) {
        return Err(Error::InvalidArgument("horizon and dt must be positive".into()));
    }
    let mut last = String::new();
    for stream in 0..=config.max_retries as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        match attempt(seed, &mut rng, config) {
            Ok(s) => return Ok(s),
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::Generation { seed, reason: last })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_expert_keeps_heading() {
        let config = ScenarioConfig {
            maneuver_weights: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            max_obstacles: 0,
            ..ScenarioConfig::default()
        };
        for seed in 0..20 {
            let s = generate_scenario(seed, &config).unwrap();
            assert_eq!(s.maneuver, Maneuver::Straight);
            assert!(s.obstacles.is_empty());
            for st in &s.expert.states {
                assert!((st.heading - s.ego_init.heading).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic() {
        let config = ScenarioConfig::default();
        let a = generate_scenario(77, &config).unwrap();
        let b = generate_scenario(77, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_geometry_names_seed() {
        let config = ScenarioConfig {
            limits: crate::kinematics::ControlLimits {
                max_accel: 4.0,
                max_yaw_rate: 0.01,
            },
            maneuver_weights: [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            max_retries: 2,
            ..ScenarioConfig::default()
        };
        let err = generate_scenario(4242, &config).unwrap_err();
        assert!(matches!(err, Error::Generation { seed: 4242, .. }), "{err}");
    }

    #[test]
    fn every_maneuver_validates() {
        for (i, m) in Maneuver::ALL.iter().enumerate() {
            let mut w = [0.0; 6];
            w[i] = 1.0;
            let config = ScenarioConfig {
                maneuver_weights: w,
                moving_obstacles: i % 2 == 0,
                ..ScenarioConfig::default()
            };
            for seed in 0..30 {
                let s = generate_scenario(seed * 7 + 1, &config).unwrap();
                assert_eq!(s.maneuver, *m);
                validate_scenario(&s, &config).unwrap();
            }
        }
    }
}
