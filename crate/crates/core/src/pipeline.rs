//! Model assembly and single-scenario planning.

use serde::{Deserialize, Serialize};

use crate::chain::{register_chain, rollout_modes, ChainConfig, ProposalSet, RolloutSpec};
use crate::error::{Error, Result};
use crate::eval::metrics::no_collision;
use crate::flow::{refine_proposals, register_flow, FlowConfig, NoiseSchedule};
use crate::kinematics::{constant_velocity, rollout_controls_with, wrap_angle, ControlInput, Trajectory};
use crate::scenario::Scenario;
use crate::scorer::{register_scorer, score_candidates, select_best, ScoreVector, ScorerConfig};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub chain: ChainConfig,
    pub flow: FlowConfig,
    pub scorer: ScorerConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.chain.validate()?;
        self.flow.validate()
    }
}

/// Registers chain, refiner and scorer parameters in one store.
pub fn register_model(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    register_chain(&mut store, &config.chain, seed)?;
    register_flow(&mut store, &config.flow, seed)?;
    register_scorer(&mut store, &config.scorer, seed)?;
    Ok(store)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub proposals: ProposalSet,
    /// Refined candidates; empty when refinement is skipped.
    pub refined: Vec<Trajectory>,
    pub scores: Vec<ScoreVector>,
    pub selected: usize,
    pub trajectory: Trajectory,
}

/// Chain rollout, optional refinement of every proposal, then scoring and
/// selection among the final candidates.
#[allow(clippy::too_many_arguments)]
pub fn plan_scenario(
    scenario: &Scenario,
    store: &ParamStore,
    config: &ModelConfig,
    spec: &RolloutSpec,
    schedule: &NoiseSchedule,
    n_steps: usize,
    refine: bool,
    seed: u64,
) -> Result<Plan> {
    let proposals = rollout_modes(scenario, store, &config.chain, spec)?;
    let refined = if refine {
        refine_proposals(&proposals, scenario, store, schedule, n_steps, &config.flow, seed)?
    } else {
        Vec::new()
    };
    let candidates = if refine { &refined } else { &proposals.trajectories };
    let scores = score_candidates(candidates, scenario, store, &config.scorer)?;
    let selected = select_best(&scores);
    let trajectory = candidates[selected].clone();
    Ok(Plan {
        proposals,
        refined,
        scores,
        selected,
        trajectory,
    })
}

/// A kinematically feasible trajectory that steers straight for the nearest
/// obstacle ahead, when that trajectory actually collides.
pub fn obstacle_seeking(scenario: &Scenario, spec: &RolloutSpec) -> Result<Option<Trajectory>> {
    let ego = &scenario.ego_init;
    let mut ahead: Vec<_> = scenario
        .obstacles
        .iter()
        .filter(|o| ego.to_local(o.center)[0] > 2.0)
        .collect();
    ahead.sort_by(|a, b| {
        let da = ego.to_local(a.center);
        let db = ego.to_local(b.center);
        da[0].hypot(da[1]).total_cmp(&db[0].hypot(db[1]))
    });
    for target in ahead {
        let mut state = *ego;
        let mut controls = Vec::with_capacity(spec.horizon);
        for i in 0..spec.horizon {
            let goal = target.position_at(i as f64 * spec.dt);
            let bearing = wrap_angle((goal[1] - state.y).atan2(goal[0] - state.x) - state.heading);
            let ctrl = ControlInput::new(0.0, bearing / spec.dt).clamped(&spec.limits);
            state = crate::kinematics::bicycle_step(&state, &ctrl, spec.dt)?;
            controls.push(ctrl);
        }
        let traj = rollout_controls_with(ego, &controls, spec.dt, &spec.limits)?;
        if no_collision(&traj, scenario) == 0.0 {
            return Ok(Some(traj));
        }
    }
    Ok(None)
}

/// Reference candidates mixed into scorer training: the expert, the
/// constant-velocity rollout and, when one exists, an obstacle-seeking
/// trajectory.
pub fn reference_candidates(scenario: &Scenario, spec: &RolloutSpec) -> Result<Vec<Trajectory>> {
    if scenario.expert.len() != spec.horizon {
        return Err(Error::LengthMismatch(scenario.expert.len(), spec.horizon));
    }
    let mut out = vec![
        scenario.expert.clone(),
        constant_velocity(&scenario.ego_init, spec.horizon, spec.dt)?,
    ];
    if let Some(t) = obstacle_seeking(scenario, spec)? {
        out.push(t);
    }
    Ok(out)
}
