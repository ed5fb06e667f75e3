//! Autoregressive proposal generator.
//!
//! `K` learnable mode queries share one recurrent control predictor. At every
//! step each mode reads the scene tokens through cross-attention, updates a
//! gated recurrent state, emits a squashed `(accel, yaw_rate)` command and
//! advances through the bicycle model. All modes are processed as rows of
//! one matrix, so the tape cost grows with `T` rather than `K * T`.
//!
//! The rollout runs in the ego frame (start pose at the origin, heading 0)
//! and is mapped back to the world frame afterwards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{ControlInput, ControlLimits, EgoState, Trajectory};
use crate::scenario::{normalize_tokens, token_mask, Scenario, ScenarioConfig};
use crate::tensor::{apply_linear, layers, register_linear, Array, ParamStore, Tape, Var};

pub const PREFIX: &str = "chain";

/// Standard deviation of the mode query initialization.
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    /// Number of modes `K`.
    pub modes: usize,
    pub hidden_dim: usize,
    pub n_tok_layers: usize,
    pub query_dim: usize,
    pub heads: usize,
    pub token_dim: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            modes: 6,
            hidden_dim: 128,
            n_tok_layers: 2,
            query_dim: 64,
            heads: 1,
            token_dim: 16,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 || self.hidden_dim == 0 || self.query_dim == 0 || self.n_tok_layers == 0 {
            return Err(Error::Config("chain sizes must be positive".into()));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "chain.heads {} must divide hidden_dim {}",
                self.heads, self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Horizon, step and control box shared by every rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSpec {
    pub horizon: usize,
    pub dt: f64,
    pub limits: ControlLimits,
}

impl From<&ScenarioConfig> for RolloutSpec {
    fn from(c: &ScenarioConfig) -> Self {
        Self {
            horizon: c.horizon,
            dt: c.dt,
            limits: c.limits,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub trajectories: Vec<Trajectory>,
    /// Commands that reproduce each trajectory through the bicycle model.
    pub controls: Vec<Vec<ControlInput>>,
    /// Final recurrent state per mode, `[K, hidden_dim]`.
    pub mode_embeddings: Array,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

fn query_name(k: usize) -> String {
    format!("{PREFIX}.mode_query.{k}")
}

/// Registers the `K` mode queries, each a `[1, query_dim]` row drawn from
/// `N(0, QUERY_INIT_STD^2)`.
pub fn init_mode_queries(store: &mut ParamStore, config: &ChainConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    for k in 0..config.modes {
        store.register(query_name(k), Array::randn(1, config.query_dim, QUERY_INIT_STD, rng))?;
    }
    Ok(())
}

/// Registers every chain parameter under the `chain.` prefix.
pub fn register_chain(store: &mut ParamStore, config: &ChainConfig, seed: u64) -> Result<()> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let h = config.hidden_dim;
    init_mode_queries(store, config, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.init_query"), config.query_dim, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.init_ego"), EGO_FEATURES, h, 1.0, &mut rng)?;
    for l in 0..config.n_tok_layers {
        let fan_in = if l == 0 { config.token_dim } else { h };
        register_linear(store, &format!("{PREFIX}.tok.{l}"), fan_in, h, 1.0, &mut rng)?;
    }
    register_linear(store, &format!("{PREFIX}.key"), h, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.value"), h, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.state"), STATE_FEATURES, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.query"), h, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.gru.x"), 2 * h, 3 * h, 1.0, &mut rng)?;
    store.register(format!("{PREFIX}.gru.h"), Array::randn(h, 3 * h, (1.0 / h as f64).sqrt(), &mut rng))?;
    register_linear(store, &format!("{PREFIX}.head.0"), h, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.head.1"), h, 2, 0.1, &mut rng)?;
    Ok(())
}

const EGO_FEATURES: usize = 2;
const STATE_FEATURES: usize = 5;

fn ego_features(ego: &EgoState) -> Array {
    let v = ego.speed * 0.1;
    Array::row(&[v, v * v])
}

/// Scene tokens consumed by a rollout.
#[derive(Debug, Clone, Copy)]
pub enum TokenFeed<'a> {
    Fixed(&'a Array),
    /// Tokens visible at each step; step `t` only sees entry `t`.
    PerStep(&'a [Array]),
}

impl TokenFeed<'_> {
    fn at(&self, step: usize) -> &Array {
        match self {
            TokenFeed::Fixed(a) => a,
            TokenFeed::PerStep(v) => &v[step],
        }
    }
}

/// Encoded tokens ready for attention.
pub struct TokenMemory {
    pub keys: Var,
    pub values: Var,
    pub mask: Vec<bool>,
}

pub fn encode_tokens(tape: &mut Tape, tokens: &Array, config: &ChainConfig) -> Result<TokenMemory> {
    if tokens.cols() != config.token_dim {
        return Err(Error::shape("chain tokens", &tokens.shape(), &[config.token_dim]));
    }
    let mut e = tape.constant(normalize_tokens(tokens));
    for l in 0..config.n_tok_layers {
        let y = apply_linear(tape, &format!("{PREFIX}.tok.{l}"), e)?;
        let y = tape.gelu(y);
        e = if l == 0 { y } else { tape.add(e, y)? };
    }
    Ok(TokenMemory {
        keys: apply_linear(tape, &format!("{PREFIX}.key"), e)?,
        values: apply_linear(tape, &format!("{PREFIX}.value"), e)?,
        mask: token_mask(tokens),
    })
}

/// Per-mode kinematic state as `[K, 1]` columns in the ego frame.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub x: Var,
    pub y: Var,
    pub heading: Var,
    pub speed: Var,
}

/// Initial recurrent state `tanh(q W + ego W' + b)` for all modes.
pub fn initial_hidden(tape: &mut Tape, ego: &EgoState, config: &ChainConfig) -> Result<Var> {
    let queries = (0..config.modes)
        .map(|k| tape.param(&query_name(k)))
        .collect::<Result<Vec<_>>>()?;
    let q = tape.concat_rows(&queries)?;
    let w = tape.param(&format!("{PREFIX}.init_query.w"))?;
    let from_query = tape.matmul(q, w)?;
    let ego_in = tape.constant(ego_features(ego));
    let from_ego = apply_linear(tape, &format!("{PREFIX}.init_ego"), ego_in)?;
    let pre = tape.add_row(from_query, from_ego)?;
    let b = tape.param(&format!("{PREFIX}.init_query.b"))?;
    let pre = tape.add_row(pre, b)?;
    Ok(tape.tanh(pre))
}

/// One control prediction: attention read, gated recurrent update and the
/// squashed two-way head. Returns `(accel, yaw_rate, next_hidden)`, the
/// first two as `[K, 1]` columns within the control limits.
pub fn predict_controls(
    tape: &mut Tape,
    hidden: Var,
    memory: &TokenMemory,
    state: &StateVars,
    limits: &ControlLimits,
    config: &ChainConfig,
) -> Result<(Var, Var, Var)> {
    let h = config.hidden_dim;
    let (cos, sin) = (tape.cos(state.heading), tape.sin(state.heading));
    let xs = tape.scale(state.x, 0.05);
    let ys = tape.scale(state.y, 0.05);
    let vs = tape.scale(state.speed, 0.1);
    let feats = tape.concat_cols(&[xs, ys, cos, sin, vs])?;
    let se = apply_linear(tape, &format!("{PREFIX}.state"), feats)?;

    let q_in = tape.add(hidden, se)?;
    let q = apply_linear(tape, &format!("{PREFIX}.query"), q_in)?;
    let ctx = layers::multi_head_attention(tape, q, memory.keys, memory.values, config.heads, Some(&memory.mask))?;

    let x_in = tape.concat_cols(&[ctx, se])?;
    let gx = apply_linear(tape, &format!("{PREFIX}.gru.x"), x_in)?;
    let wh = tape.param(&format!("{PREFIX}.gru.h"))?;
    let gh = tape.matmul(hidden, wh)?;
    let gate = |tape: &mut Tape, i: usize| -> Result<(Var, Var)> {
        Ok((tape.slice_cols(gx, i * h, h)?, tape.slice_cols(gh, i * h, h)?))
    };
    let (zx, zh) = gate(tape, 0)?;
    let (rx, rh) = gate(tape, 1)?;
    let (nx, nh) = gate(tape, 2)?;
    let z = tape.add(zx, zh)?;
    let z = tape.sigmoid(z);
    let r = tape.add(rx, rh)?;
    let r = tape.sigmoid(r);
    let rn = tape.mul(r, nh)?;
    let n = tape.add(nx, rn)?;
    let n = tape.tanh(n);
    let delta = tape.sub(hidden, n)?;
    let keep = tape.mul(z, delta)?;
    let next = tape.add(n, keep)?;
    tape.check_finite(next, "chain hidden state")?;

    let u = apply_linear(tape, &format!("{PREFIX}.head.0"), next)?;
    let u = tape.gelu(u);
    let out = apply_linear(tape, &format!("{PREFIX}.head.1"), u)?;
    let out = tape.tanh(out);
    let bounds = tape.constant(Array::row(&[limits.max_accel, limits.max_yaw_rate]));
    let out = tape.mul_row(out, bounds)?;
    let accel = tape.slice_cols(out, 0, 1)?;
    let yaw_rate = tape.slice_cols(out, 1, 1)?;
    Ok((accel, yaw_rate, next))
}

/// Bicycle transition on the tape, mirroring [`crate::kinematics::bicycle_step`]
/// operation for operation.
pub fn bicycle_step_tape(tape: &mut Tape, s: &StateVars, accel: Var, yaw_rate: Var, dt: f64) -> Result<StateVars> {
    let cos = tape.cos(s.heading);
    let sin = tape.sin(s.heading);
    let vx = tape.mul(s.speed, cos)?;
    let vx = tape.scale(vx, dt);
    let vy = tape.mul(s.speed, sin)?;
    let vy = tape.scale(vy, dt);
    let dh = tape.scale(yaw_rate, dt);
    let heading = tape.add(s.heading, dh)?;
    let dv = tape.scale(accel, dt);
    let speed = tape.add(s.speed, dv)?;
    Ok(StateVars {
        x: tape.add(s.x, vx)?,
        y: tape.add(s.y, vy)?,
        heading: tape.wrap_angle(heading),
        speed: tape.relu(speed),
    })
}

/// Tape handles of one rollout.
pub struct ChainTape {
    /// `[K, 2T]` ego-frame waypoints laid out `x1, y1, x2, y2, ...`.
    pub positions: Var,
    pub hidden: Var,
    pub accel: Vec<Var>,
    pub yaw_rate: Vec<Var>,
}

/// Records a full `K`-mode rollout in the ego frame of `ego`.
pub fn chain_forward(
    tape: &mut Tape,
    feed: TokenFeed,
    ego: &EgoState,
    config: &ChainConfig,
    spec: &RolloutSpec,
) -> Result<ChainTape> {
    if spec.horizon == 0 {
        return Err(Error::InvalidArgument("rollout horizon must be positive".into()));
    }
    if let TokenFeed::PerStep(v) = feed {
        if v.len() != spec.horizon {
            return Err(Error::LengthMismatch(v.len(), spec.horizon));
        }
    }
    let k = config.modes;
    let mut hidden = initial_hidden(tape, ego, config)?;
    let mut state = StateVars {
        x: tape.constant(Array::zeros(k, 1)),
        y: tape.constant(Array::zeros(k, 1)),
        heading: tape.constant(Array::zeros(k, 1)),
        speed: tape.constant(Array::full(k, 1, ego.speed)),
    };
    let mut memory = encode_tokens(tape, feed.at(0), config)?;
    let mut cols = Vec::with_capacity(2 * spec.horizon);
    let (mut accel, mut yaw_rate) = (Vec::new(), Vec::new());
    for t in 0..spec.horizon {
        if t > 0 && matches!(feed, TokenFeed::PerStep(_)) {
            memory = encode_tokens(tape, feed.at(t), config)?;
        }
        let (a, w, next) = predict_controls(tape, hidden, &memory, &state, &spec.limits, config)?;
        state = bicycle_step_tape(tape, &state, a, w, spec.dt)?;
        hidden = next;
        cols.push(state.x);
        cols.push(state.y);
        accel.push(a);
        yaw_rate.push(w);
    }
    Ok(ChainTape {
        positions: tape.concat_cols(&cols)?,
        hidden,
        accel,
        yaw_rate,
    })
}

/// Maps ego-frame rollout values back to world-frame trajectories.
pub fn collect_proposals(tape: &Tape, out: &ChainTape, ego: &EgoState, spec: &RolloutSpec) -> Result<ProposalSet> {
    let k = tape.shape(out.positions)[0];
    let mut trajectories = Vec::with_capacity(k);
    let mut controls = Vec::with_capacity(k);
    for m in 0..k {
        let ctrl: Vec<ControlInput> = (0..spec.horizon)
            .map(|t| ControlInput::new(tape.value(out.accel[t]).get(m, 0), tape.value(out.yaw_rate[t]).get(m, 0)))
            .collect();
        let traj = crate::kinematics::rollout_controls_with(
            &EgoState::new(0.0, 0.0, 0.0, ego.speed),
            &ctrl,
            spec.dt,
            &spec.limits,
        )?;
        trajectories.push(to_world(&traj, ego)?);
        controls.push(ctrl);
    }
    Ok(ProposalSet {
        trajectories,
        controls,
        mode_embeddings: tape.value(out.hidden).clone(),
    })
}

/// Maps an ego-frame trajectory into the world frame of `ego`.
pub fn to_world(local: &Trajectory, ego: &EgoState) -> Result<Trajectory> {
    let (s, c) = ego.heading.sin_cos();
    let states = local
        .states
        .iter()
        .map(|st| {
            EgoState::new(
                c * st.x - s * st.y + ego.x,
                s * st.x + c * st.y + ego.y,
                st.heading + ego.heading,
                st.speed,
            )
        })
        .collect();
    Trajectory::new(states, local.dt)
}

/// Ego-frame waypoints of `traj` flattened as `[1, 2T]`.
pub fn local_waypoints(traj: &Trajectory, ego: &EgoState) -> Array {
    let data: Vec<f64> = traj.states.iter().flat_map(|s| ego.to_local(s.position())).collect();
    Array::row(&data)
}

/// Rolls out all `K` modes for one scenario.
pub fn rollout_modes(
    scenario: &Scenario,
    store: &ParamStore,
    config: &ChainConfig,
    spec: &RolloutSpec,
) -> Result<ProposalSet> {
    rollout_modes_with(TokenFeed::Fixed(&scenario.scene_tokens), &scenario.ego_init, store, config, spec)
}

pub fn rollout_modes_with(
    feed: TokenFeed,
    ego: &EgoState,
    store: &ParamStore,
    config: &ChainConfig,
    spec: &RolloutSpec,
) -> Result<ProposalSet> {
    let mut tape = Tape::new(store);
    let out = chain_forward(&mut tape, feed, ego, config, spec)?;
    collect_proposals(&tape, &out, ego, spec)
}
