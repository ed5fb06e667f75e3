//! Synthetic driving scenarios: corridor geometry, obstacles, an expert
//! trajectory, and the two conditioning featurizations (geometric scene
//! tokens and attribute-level semantic context).

mod dataset;
mod features;
mod generate;
pub mod geometry;

use serde::{Deserialize, Serialize};

pub use dataset::{generate_dataset, scenario_seed, load_dataset, save_dataset, DatasetHeader, DATASET_FORMAT_VERSION};
pub use features::{encode_scene_tokens, normalize_tokens, synth_semantic_ctx, token_mask, TokenLayout};
pub use generate::generate_scenario;

use crate::error::{Error, Result};
use crate::kinematics::{recover_controls, ControlLimits, EgoState, Trajectory};
use crate::tensor::Array;

/// Radius of the disc approximating the ego vehicle.
pub const EGO_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Straight,
    LeftTurn,
    RightTurn,
    LaneFollowCurve,
    StopForObstacle,
    OvertakeStatic,
}

impl Maneuver {
    pub const ALL: [Maneuver; 6] = [
        Maneuver::Straight,
        Maneuver::LeftTurn,
        Maneuver::RightTurn,
        Maneuver::LaneFollowCurve,
        Maneuver::StopForObstacle,
        Maneuver::OvertakeStatic,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).unwrap()
    }

    /// Maneuvers whose expert has to react to an obstacle on its path.
    pub fn is_obstacle_heavy(self) -> bool {
        matches!(self, Maneuver::StopForObstacle | Maneuver::OvertakeStatic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneCorridor {
    pub centerline: Vec<[f64; 2]>,
    pub half_width: f64,
}

impl LaneCorridor {
    pub fn validate(&self) -> Result<()> {
        if self.centerline.len() < 2 {
            return Err(Error::InvalidArgument("corridor needs at least two points".into()));
        }
        if !(self.half_width > 0.0) {
            return Err(Error::InvalidArgument("corridor half_width must be positive".into()));
        }
        if self.centerline.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("repeated centerline point".into()));
        }
        Ok(())
    }

    pub fn project(&self, p: [f64; 2]) -> geometry::Projection {
        geometry::project(&self.centerline, p)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.project(p).distance <= self.half_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
    /// Zero for static obstacles.
    pub velocity: [f64; 2],
}

impl Obstacle {
    pub fn position_at(&self, t: f64) -> [f64; 2] {
        [self.center[0] + self.velocity[0] * t, self.center[1] + self.velocity[1] * t]
    }
}

/// Generator and featurizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Sampling weights in [`Maneuver::ALL`] order.
    pub maneuver_weights: [f64; 6],
    pub max_obstacles: usize,
    /// Lets clutter obstacles drift at constant velocity.
    pub moving_obstacles: bool,
    pub n_tokens: usize,
    pub token_dim: usize,
    pub lane_tokens: usize,
    pub lane_token_spacing: f64,
    pub n_semantic: usize,
    pub semantic_dim: usize,
    pub codebook_seed: u64,
    pub max_retries: usize,
    pub limits: ControlLimits,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            dt: 0.5,
            maneuver_weights: [0.30, 0.15, 0.15, 0.20, 0.10, 0.10],
            max_obstacles: 6,
            moving_obstacles: false,
            n_tokens: 16,
            token_dim: 16,
            lane_tokens: 8,
            lane_token_spacing: 8.0,
            n_semantic: 8,
            semantic_dim: 32,
            codebook_seed: 0x5eed_c0de,
            max_retries: 16,
            limits: ControlLimits::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub seed: u64,
    pub corridor: LaneCorridor,
    pub obstacles: Vec<Obstacle>,
    pub ego_init: EgoState,
    pub expert: Trajectory,
    pub maneuver: Maneuver,
    /// `[n_tokens, token_dim]`, ego-relative geometry.
    pub scene_tokens: Array,
    /// `[n_semantic, semantic_dim]`, attribute codebook rows.
    pub semantic_ctx: Array,
}

impl Scenario {
    /// Recomputes both featurizations from the geometric fields.
    pub fn refresh_features(&mut self, config: &ScenarioConfig) -> Result<()> {
        self.scene_tokens = encode_scene_tokens(self, config)?;
        self.semantic_ctx = synth_semantic_ctx(self, config)?;
        Ok(())
    }

    pub fn token_mask(&self) -> Vec<bool> {
        token_mask(&self.scene_tokens)
    }
}

/// True when the ego disc, swept linearly between waypoints with `substeps`
/// samples per step, overlaps an obstacle at the matching time.
pub fn swept_collision(ego_init: &EgoState, traj: &Trajectory, obstacles: &[Obstacle], substeps: usize) -> bool {
    let mut prev = ego_init.position();
    for (i, s) in traj.states.iter().enumerate() {
        let cur = s.position();
        for j in 0..=substeps {
            let f = j as f64 / substeps as f64;
            let p = [prev[0] + f * (cur[0] - prev[0]), prev[1] + f * (cur[1] - prev[1])];
            let t = (i as f64 + f) * traj.dt;
            if obstacles
                .iter()
                .any(|o| geometry::discs_overlap(p, EGO_RADIUS, o.position_at(t), o.radius))
            {
                return true;
            }
        }
        prev = cur;
    }
    false
}

/// Checks every scenario invariant: corridor and obstacle validity, expert
/// containment, collision freedom and kinematic feasibility.
pub fn validate_scenario(s: &Scenario, config: &ScenarioConfig) -> Result<()> {
    s.corridor.validate()?;
    let fail = |reason: String| Err(Error::InvalidArgument(format!("scenario {}: {reason}", s.id)));
    if s.obstacles.iter().any(|o| !(o.radius > 0.0)) {
        return fail("non-positive obstacle radius".into());
    }
    if s.expert.len() != config.horizon || s.expert.dt != config.dt {
        return fail(format!("expert has {} states at dt {}", s.expert.len(), s.expert.dt));
    }
    if let Some(i) = s.expert.states.iter().position(|st| !s.corridor.contains(st.position())) {
        return fail(format!("expert waypoint {i} leaves the corridor"));
    }
    if swept_collision(&s.ego_init, &s.expert, &s.obstacles, 10) {
        return fail("expert collides".into());
    }
    let Some(controls) = recover_controls(&s.ego_init, &s.expert, 1e-6) else {
        return fail("expert is not a bicycle rollout".into());
    };
    let tol = 1e-6;
    if controls.iter().any(|c| {
        c.accel.abs() > config.limits.max_accel + tol || c.yaw_rate.abs() > config.limits.max_yaw_rate + tol
    }) {
        return fail("expert needs inadmissible controls".into());
    }
    if !s.scene_tokens.is_finite() || !s.semantic_ctx.is_finite() {
        return fail("non-finite features".into());
    }
    Ok(())
}
