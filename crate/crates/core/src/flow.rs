//! Residual diffusion refiner.
//!
//! A proposal `Y_AR` is refined by sampling a correction `ΔY` so that the
//! output is `Y_AR + ΔY`. Residuals live in the ego frame and are divided by
//! `residual_scale` before diffusion. The noise predictor is a small
//! transformer: one token per waypoint (noisy residual concatenated with the
//! proposal waypoint), adaptive layer norm driven by the timestep and ego
//! speed, and cross-attention into the conditioning array.
//!
//! With `space = trajectory` the same code runs with the proposal replaced by
//! zeros, so the model generates whole trajectories instead of corrections.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chain::ProposalSet;
use crate::error::{Error, Result};
use crate::kinematics::{EgoState, Trajectory};
use crate::scenario::{normalize_tokens, token_mask, Scenario};
use crate::tensor::{apply_linear, register_linear, Array, ParamStore, Tape, Var};

pub const PREFIX: &str = "flow";

/// Lower bound of `alpha_bar`.
pub const ALPHA_BAR_FLOOR: f64 = 1e-5;
/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Residual,
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningSource {
    SemanticCtx,
    SceneTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub conditioning_source: ConditioningSource,
    pub space: Space,
    pub n_train_steps: usize,
    /// Denoising steps used at inference and inside Stage II.
    pub inference_steps: usize,
    /// Meters per unit of the diffused variable in residual space.
    pub residual_scale: f64,
    /// Meters per unit of the diffused variable in trajectory space.
    pub trajectory_scale: f64,
    /// Meters per unit of the proposal waypoints fed to the predictor.
    pub proposal_scale: f64,
    /// Assumed standard deviation of the scaled residual target, used to
    /// precondition the predictor.
    pub residual_sigma: f64,
    /// Same for the scaled trajectory target.
    pub trajectory_sigma: f64,
    pub semantic_dim: usize,
    pub token_dim: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            model_dim: 128,
            n_heads: 4,
            mlp_ratio: 2,
            conditioning_source: ConditioningSource::SemanticCtx,
            space: Space::Residual,
            n_train_steps: 1000,
            inference_steps: 4,
            residual_scale: 2.0,
            trajectory_scale: 10.0,
            proposal_scale: 20.0,
            residual_sigma: 0.25,
            trajectory_sigma: 2.0,
            semantic_dim: 32,
            token_dim: 16,
        }
    }
}

impl FlowConfig {
    /// Twelve-block preset on top of the defaults.
    pub fn full_depth() -> Self {
        Self {
            n_blocks: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.model_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("flow sizes must be positive".into()));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "flow.n_heads {} must divide model_dim {}",
                self.n_heads, self.model_dim
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config("flow.model_dim must be even".into()));
        }
        if self.n_train_steps == 0 || self.inference_steps == 0 || self.inference_steps > self.n_train_steps {
            return Err(Error::Config("need 1 <= inference_steps <= n_train_steps".into()));
        }
        if !(self.residual_scale > 0.0 && self.trajectory_scale > 0.0 && self.proposal_scale > 0.0) {
            return Err(Error::Config("flow scales must be positive".into()));
        }
        if !(self.residual_sigma > 0.0 && self.trajectory_sigma > 0.0) {
            return Err(Error::Config("flow sigmas must be positive".into()));
        }
        Ok(())
    }

    /// Meters per unit of the diffused variable for the configured space.
    pub fn data_scale(&self) -> f64 {
        match self.space {
            Space::Residual => self.residual_scale,
            Space::Trajectory => self.trajectory_scale,
        }
    }

    pub fn data_sigma(&self) -> f64 {
        match self.space {
            Space::Residual => self.residual_sigma,
            Space::Trajectory => self.trajectory_sigma,
        }
    }

    fn ctx_dim(&self) -> usize {
        match self.conditioning_source {
            ConditioningSource::SemanticCtx => self.semantic_dim,
            ConditioningSource::SceneTokens => self.token_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub n_train_steps: usize,
    /// `n_train_steps + 1` entries, `alpha_bar[0] == 1`.
    pub alpha_bar: Vec<f64>,
}

fn cosine_f(t: usize, n: usize) -> f64 {
    let u = (t as f64 / n as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0;
    u.cos().powi(2)
}

fn alpha_bar_at(t: usize, n: usize) -> f64 {
    if t == 0 {
        return 1.0;
    }
    ALPHA_BAR_FLOOR + (1.0 - ALPHA_BAR_FLOOR) * (cosine_f(t, n) / cosine_f(0, n)).min(1.0)
}

/// Cosine `alpha_bar` schedule mapped affinely onto `[ALPHA_BAR_FLOOR, 1]`.
///
/// Plain clipping would flatten the last few steps; the affine map keeps the
/// sequence strictly decreasing while moving interior values by at most the
/// floor.
pub fn build_schedule(n_train_steps: usize) -> Result<NoiseSchedule> {
    if n_train_steps == 0 {
        return Err(Error::InvalidArgument("n_train_steps must be at least 1".into()));
    }
    let alpha_bar: Vec<f64> = (0..=n_train_steps).map(|t| alpha_bar_at(t, n_train_steps)).collect();
    Ok(NoiseSchedule {
        n_train_steps,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("timestep {t} outside [0, {}]", self.n_train_steps))
        })
    }

    /// `n_steps + 1` indices `round(n * (S - i) / S)`, from `n` down to 0.
    pub fn ddim_timesteps(&self, n_steps: usize) -> Result<Vec<usize>> {
        if n_steps == 0 || n_steps > self.n_train_steps {
            return Err(Error::InvalidArgument(format!(
                "denoising steps {n_steps} outside [1, {}]",
                self.n_train_steps
            )));
        }
        let n = self.n_train_steps as f64;
        Ok((0..=n_steps)
            .map(|i| (n * (n_steps - i) as f64 / n_steps as f64).round() as usize)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    /// `[T, 2]` world-frame offsets in meters.
    pub residual: Array,
    pub mode_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub z: Array,
    pub t: usize,
    pub eps: Array,
}

/// `[T, 2]` array of waypoint positions.
pub fn positions_array(traj: &Trajectory) -> Array {
    let data = traj.states.iter().flat_map(|s| [s.x, s.y]).collect();
    Array::new(traj.len(), 2, data).expect("T x 2 positions")
}

/// `expert - proposal` on waypoint positions.
pub fn residual_target(expert: &Trajectory, proposal: &Trajectory, mode_index: usize) -> Result<ResidualSample> {
    if expert.len() != proposal.len() {
        return Err(Error::LengthMismatch(expert.len(), proposal.len()));
    }
    let residual = positions_array(expert).zip_map(&positions_array(proposal), |e, p| e - p);
    Ok(ResidualSample { residual, mode_index })
}

/// `proposal + residual` on positions, with heading and speed re-derived
/// from consecutive refined waypoints.
pub fn apply_residual(start: &EgoState, proposal: &Trajectory, residual: &Array) -> Result<Trajectory> {
    if residual.shape() != [proposal.len(), 2] {
        return Err(Error::shape("apply_residual", &residual.shape(), &[proposal.len(), 2]));
    }
    let pts: Vec<[f64; 2]> = proposal
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| [s.x + residual.get(i, 0), s.y + residual.get(i, 1)])
        .collect();
    Trajectory::from_positions(start, &pts, proposal.dt)
}

fn check_same(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

/// `sqrt(ab) x + sqrt(1 - ab) eps`.
pub fn q_sample_alpha(x: &Array, alpha_bar: f64, eps: &Array) -> Result<Array> {
    check_same("q_sample", x, eps)?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x.zip_map(eps, |x, e| a * x + b * e))
}

pub fn q_sample(residual: &Array, t: usize, eps: &Array, schedule: &NoiseSchedule) -> Result<NoisySample> {
    let z = q_sample_alpha(residual, schedule.alpha_bar(t)?, eps)?;
    Ok(NoisySample { z, t, eps: eps.clone() })
}

/// `(z - sqrt(1 - ab) eps_hat) / sqrt(ab)`.
pub fn x0_from_eps_alpha(z: &Array, alpha_bar: f64, eps_hat: &Array) -> Result<Array> {
    check_same("x0_from_eps", z, eps_hat)?;
    if !(alpha_bar >= ALPHA_BAR_FLOOR) {
        return Err(Error::InvalidArgument(format!(
            "alpha_bar {alpha_bar} below floor {ALPHA_BAR_FLOOR}"
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z.zip_map(eps_hat, |z, e| (z - b * e) / a))
}

pub fn x0_from_eps(z: &Array, t: usize, eps_hat: &Array, schedule: &NoiseSchedule) -> Result<Array> {
    x0_from_eps_alpha(z, schedule.alpha_bar(t)?, eps_hat)
}

/// Deterministic DDIM from `z_start` at `t = n` down to `t = 0`.
///
/// `predictor(z, t)` returns the noise estimate. The result is the final
/// `x0` estimate.
pub fn ddim_sample(
    z_start: &Array,
    schedule: &NoiseSchedule,
    n_steps: usize,
    mut predictor: impl FnMut(&Array, usize) -> Result<Array>,
) -> Result<Array> {
    let ts = schedule.ddim_timesteps(n_steps)?;
    let mut z = z_start.clone();
    let mut x0 = z.clone();
    for pair in ts.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let eps_hat = predictor(&z, t)?;
        x0 = x0_from_eps(&z, t, &eps_hat, schedule)?;
        z = q_sample_alpha(&x0, schedule.alpha_bar(t_next)?, &eps_hat)?;
    }
    Ok(if ts.len() > 1 { x0 } else { z })
}

fn sinusoid(value: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}

/// Registers every refiner parameter under the `flow.` prefix.
pub fn register_flow(store: &mut ParamStore, config: &FlowConfig, seed: u64) -> Result<()> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let d = config.model_dim;
    register_linear(store, &format!("{PREFIX}.in"), 4, d, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.t.0"), d, d, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.t.1"), d, d, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.ego"), 2, d, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.ctx_in"), config.ctx_dim(), d, 1.0, &mut rng)?;
    for b in 0..config.n_blocks {
        let p = format!("{PREFIX}.block.{b}");
        register_linear(store, &format!("{p}.mod"), d, 9 * d, 0.1, &mut rng)?;
        register_linear(store, &format!("{p}.qkv"), d, 3 * d, 1.0, &mut rng)?;
        register_linear(store, &format!("{p}.attn_out"), d, d, 1.0, &mut rng)?;
        register_linear(store, &format!("{p}.cross_q"), d, d, 1.0, &mut rng)?;
        register_linear(store, &format!("{p}.cross_kv"), d, 2 * d, 1.0, &mut rng)?;
        register_linear(store, &format!("{p}.cross_out"), d, d, 1.0, &mut rng)?;
        register_linear(store, &format!("{p}.mlp.0"), d, config.mlp_ratio * d, 1.0, &mut rng)?;
        register_linear(store, &format!("{p}.mlp.1"), config.mlp_ratio * d, d, 1.0, &mut rng)?;
    }
    register_linear(store, &format!("{PREFIX}.final_mod"), d, 2 * d, 0.1, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.out"), d, 2, 0.1, &mut rng)?;
    Ok(())
}

/// Conditioning shared by all candidates of one scenario.
#[derive(Debug, Clone)]
pub struct FlowContext {
    pub ego: EgoState,
    /// Rows the predictor cross-attends to, already scaled.
    pub conditioning: Array,
    pub mask: Vec<bool>,
}

impl FlowContext {
    pub fn new(scenario: &Scenario, source: ConditioningSource) -> Self {
        let (conditioning, mask) = match source {
            ConditioningSource::SemanticCtx => {
                (scenario.semantic_ctx.clone(), vec![true; scenario.semantic_ctx.rows()])
            }
            ConditioningSource::SceneTokens => {
                (normalize_tokens(&scenario.scene_tokens), token_mask(&scenario.scene_tokens))
            }
        };
        Self {
            ego: scenario.ego_init,
            conditioning,
            mask,
        }
    }
}

/// Predictor inputs for `M` candidates stacked along rows.
pub struct CandidateBatch {
    /// `M` timesteps, one per candidate.
    pub timesteps: Vec<usize>,
    /// `[M*T, 2]` ego-frame proposal waypoints in meters (zeros in
    /// trajectory space).
    pub proposals: Array,
    pub horizon: usize,
}

fn modulate(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x);
    let one_plus = tape.add_scalar(scale, 1.0);
    let y = tape.mul(n, one_plus)?;
    tape.add(y, shift)
}

/// Attention where `bias` (0 or a large negative value) restricts each
/// query to keys of its own candidate.
fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<Var>,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    let hd = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * hd, hd)?,
                tape.slice_cols(k, h * hd, hd)?,
                tape.slice_cols(v, h * hd, hd)?,
            )
        };
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt)?;
        let mut logits = tape.scale(logits, 1.0 / (hd as f64).sqrt());
        if let Some(b) = bias {
            logits = tape.add(logits, b)?;
        }
        let w = tape.softmax_rows(logits, mask)?;
        outs.push(tape.matmul(w, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Noise prediction for a stacked batch of candidates: `z` is `[M*T, 2]`
/// and so is the result.
pub fn eps_predict_tape(
    tape: &mut Tape,
    z: Var,
    batch: &CandidateBatch,
    ctx: &FlowContext,
    config: &FlowConfig,
) -> Result<Var> {
    let d = config.model_dim;
    let t_len = batch.horizon;
    let m = batch.timesteps.len();
    if m == 0 || tape.shape(z) != [m * t_len, 2] || batch.proposals.shape() != [m * t_len, 2] {
        return Err(Error::shape("eps_predict z", &tape.shape(z), &[m * t_len, 2]));
    }
    if ctx.conditioning.cols() != config.ctx_dim() {
        return Err(Error::shape(
            "eps_predict conditioning",
            &ctx.conditioning.shape(),
            &[ctx.conditioning.rows(), config.ctx_dim()],
        ));
    }

    // Per-row preconditioning: the network sees a unit-variance input and
    // predicts the part of the noise a Gaussian prior on the target cannot.
    let sigma = config.data_sigma();
    let (mut c_in, mut c_skip, mut c_out) = (Vec::new(), Vec::new(), Vec::new());
    for &t in &batch.timesteps {
        let ab = alpha_bar_at(t.min(config.n_train_steps), config.n_train_steps);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let denom = a * a * sigma * sigma + b * b;
        for _ in 0..t_len * 2 {
            c_in.push(1.0 / denom.sqrt());
            c_skip.push(b / denom);
            c_out.push(a * sigma / denom.sqrt());
        }
    }
    let coef = |tape: &mut Tape, v: Vec<f64>| -> Result<Var> { Ok(tape.constant(Array::new(m * t_len, 2, v)?)) };
    let (c_in, c_skip, c_out) = (coef(tape, c_in)?, coef(tape, c_skip)?, coef(tape, c_out)?);
    let z_in = tape.mul(z, c_in)?;

    // Token input: noisy variable, proposal waypoint, position code.
    let prop = tape.constant(batch.proposals.scale(1.0 / config.proposal_scale));
    let tok_in = tape.concat_cols(&[z_in, prop])?;
    let x = apply_linear(tape, &format!("{PREFIX}.in"), tok_in)?;
    let mut pos = Vec::with_capacity(m * t_len * d);
    for _ in 0..m {
        for i in 0..t_len {
            pos.extend(sinusoid(i as f64, d));
        }
    }
    let pos = tape.constant(Array::new(m * t_len, d, pos)?);
    let mut x = tape.add(x, pos)?;

    // Conditioning vector per candidate: timestep and ego speed.
    let temb: Vec<f64> = batch.timesteps.iter().flat_map(|&t| sinusoid(t as f64, d)).collect();
    let temb = tape.constant(Array::new(m, d, temb)?);
    let c = apply_linear(tape, &format!("{PREFIX}.t.0"), temb)?;
    let c = tape.silu(c);
    let c = apply_linear(tape, &format!("{PREFIX}.t.1"), c)?;
    let v = ctx.ego.speed * 0.1;
    let ego_in = tape.constant(Array::row(&[v, v * v]));
    let e = apply_linear(tape, &format!("{PREFIX}.ego"), ego_in)?;
    let c = tape.add_row(c, e)?;
    let c = tape.silu(c);

    // Expands per-candidate rows to per-token rows.
    let expand = if m == 1 {
        None
    } else {
        let mut sel = Array::zeros(m * t_len, m);
        for r in 0..m * t_len {
            sel.set(r, r / t_len, 1.0);
        }
        Some(tape.constant(sel))
    };
    let per_token = |tape: &mut Tape, a: Var| -> Result<Var> {
        match expand {
            Some(s) => tape.matmul(s, a),
            None => tape.broadcast_rows(a, t_len),
        }
    };
    let bias = if m == 1 {
        None
    } else {
        let mut b = Array::full(m * t_len, m * t_len, -1e9);
        for r in 0..m * t_len {
            for c in 0..m * t_len {
                if r / t_len == c / t_len {
                    b.set(r, c, 0.0);
                }
            }
        }
        Some(tape.constant(b))
    };

    let cond_in = tape.constant(ctx.conditioning.clone());
    let cond = apply_linear(tape, &format!("{PREFIX}.ctx_in"), cond_in)?;

    for b in 0..config.n_blocks {
        let p = format!("{PREFIX}.block.{b}");
        let mods = apply_linear(tape, &format!("{p}.mod"), c)?;
        let mods = per_token(tape, mods)?;
        let chunk = |tape: &mut Tape, i: usize| tape.slice_cols(mods, i * d, d);

        let (shift, scale, gate) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
        let h = modulate(tape, x, scale, shift)?;
        let qkv = apply_linear(tape, &format!("{p}.qkv"), h)?;
        let (q, k, vv) = (tape.slice_cols(qkv, 0, d)?, tape.slice_cols(qkv, d, d)?, tape.slice_cols(qkv, 2 * d, d)?);
        let a = attend(tape, q, k, vv, config.n_heads, bias, None)?;
        let a = apply_linear(tape, &format!("{p}.attn_out"), a)?;
        let a = tape.mul(gate, a)?;
        x = tape.add(x, a)?;

        let (shift, scale, gate) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);
        let h = modulate(tape, x, scale, shift)?;
        let q = apply_linear(tape, &format!("{p}.cross_q"), h)?;
        let kv = apply_linear(tape, &format!("{p}.cross_kv"), cond)?;
        let (k, vv) = (tape.slice_cols(kv, 0, d)?, tape.slice_cols(kv, d, d)?);
        let a = attend(tape, q, k, vv, config.n_heads, None, Some(&ctx.mask))?;
        let a = apply_linear(tape, &format!("{p}.cross_out"), a)?;
        let a = tape.mul(gate, a)?;
        x = tape.add(x, a)?;

        let (shift, scale, gate) = (chunk(tape, 6)?, chunk(tape, 7)?, chunk(tape, 8)?);
        let h = modulate(tape, x, scale, shift)?;
        let h = apply_linear(tape, &format!("{p}.mlp.0"), h)?;
        let h = tape.gelu(h);
        let h = apply_linear(tape, &format!("{p}.mlp.1"), h)?;
        let h = tape.mul(gate, h)?;
        x = tape.add(x, h)?;
    }
    let fm = apply_linear(tape, &format!("{PREFIX}.final_mod"), c)?;
    let fm = per_token(tape, fm)?;
    let (shift, scale) = (tape.slice_cols(fm, 0, d)?, tape.slice_cols(fm, d, d)?);
    let h = modulate(tape, x, scale, shift)?;
    let out = apply_linear(tape, &format!("{PREFIX}.out"), h)?;
    let out = tape.mul(out, c_out)?;
    let skip = tape.mul(z, c_skip)?;
    let out = tape.add(skip, out)?;
    tape.check_finite(out, "flow noise prediction")?;
    Ok(out)
}

/// Ego-frame version of a world-frame `[T, 2]` displacement array.
pub fn rotate_to_local(ego: &EgoState, world: &Array) -> Array {
    let mut out = world.clone();
    for r in 0..world.rows() {
        let v = ego.rotate_to_local([world.get(r, 0), world.get(r, 1)]);
        out.set(r, 0, v[0]);
        out.set(r, 1, v[1]);
    }
    out
}

/// World-frame version of an ego-frame `[T, 2]` displacement array.
pub fn rotate_to_world(ego: &EgoState, local: &Array) -> Array {
    let (s, c) = ego.heading.sin_cos();
    let mut out = local.clone();
    for r in 0..local.rows() {
        let (x, y) = (local.get(r, 0), local.get(r, 1));
        out.set(r, 0, c * x - s * y);
        out.set(r, 1, s * x + c * y);
    }
    out
}

/// Ego-frame `[T, 2]` waypoints of a proposal as seen by the predictor:
/// zeros in trajectory space.
pub fn predictor_proposal(traj: &Trajectory, ego: &EgoState, config: &FlowConfig) -> Array {
    match config.space {
        Space::Residual => {
            let pts = positions_array(traj);
            let mut out = Array::zeros(traj.len(), 2);
            for r in 0..traj.len() {
                let p = ego.to_local([pts.get(r, 0), pts.get(r, 1)]);
                out.set(r, 0, p[0]);
                out.set(r, 1, p[1]);
            }
            out
        }
        Space::Trajectory => Array::zeros(traj.len(), 2),
    }
}

/// Diffusion target in normalized units for one proposal.
pub fn diffusion_target(expert: &Trajectory, proposal: &Trajectory, ego: &EgoState, config: &FlowConfig) -> Result<Array> {
    let world = match config.space {
        Space::Residual => residual_target(expert, proposal, 0)?.residual,
        Space::Trajectory => {
            let origin = EgoState::new(ego.x, ego.y, 0.0, 0.0);
            let zero = Trajectory::new(vec![origin; expert.len()], expert.dt)?;
            residual_target(expert, &zero, 0)?.residual
        }
    };
    Ok(rotate_to_local(ego, &world).scale(1.0 / config.data_scale()))
}

/// Maps a normalized ego-frame sample back onto a world-frame trajectory.
pub fn decode_sample(sample: &Array, proposal: &Trajectory, ego: &EgoState, config: &FlowConfig) -> Result<Trajectory> {
    let world = rotate_to_world(ego, &sample.scale(config.data_scale()));
    match config.space {
        Space::Residual => apply_residual(ego, proposal, &world),
        Space::Trajectory => {
            let pts: Vec<[f64; 2]> = (0..world.rows())
                .map(|r| [ego.x + world.get(r, 0), ego.y + world.get(r, 1)])
                .collect();
            Trajectory::from_positions(ego, &pts, proposal.dt)
        }
    }
}

/// Single-candidate noise prediction, `[T, 2]` in and out.
pub fn eps_predict(
    z: &Array,
    t: usize,
    proposal: &Trajectory,
    ctx: &FlowContext,
    store: &ParamStore,
    config: &FlowConfig,
) -> Result<Array> {
    let batch = CandidateBatch {
        timesteps: vec![t],
        proposals: predictor_proposal(proposal, &ctx.ego, config),
        horizon: proposal.len(),
    };
    let mut tape = Tape::new(store);
    let zv = tape.constant(z.clone());
    let out = eps_predict_tape(&mut tape, zv, &batch, ctx, config)?;
    Ok(tape.value(out).clone())
}

/// Standard-normal `[rows, cols]` draw.
pub fn normal_array(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Array::new(rows, cols, data).expect("sized")
}

/// Initial noise for candidate `k` of a scenario, from its own stream.
pub fn initial_noise(seed: u64, scenario_seed: u64, k: usize, horizon: usize) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scenario_seed.rotate_left(17));
    rng.set_stream(k as u64 + 1);
    normal_array(horizon, 2, &mut rng)
}

/// DDIM refinement of several proposals in one batched predictor pass per
/// step. `noise[k]` is the starting `z` of candidate `k`.
pub fn ddim_refine_batch(
    proposals: &[Trajectory],
    noise: &[Array],
    ctx: &FlowContext,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    n_steps: usize,
    config: &FlowConfig,
) -> Result<Vec<Trajectory>> {
    let m = proposals.len();
    if m == 0 || noise.len() != m {
        return Err(Error::LengthMismatch(noise.len(), m));
    }
    let horizon = proposals[0].len();
    let stacked = |parts: Vec<Array>| -> Result<Array> {
        let data = parts.iter().flat_map(|a| a.data().to_vec()).collect();
        Array::new(m * horizon, 2, data)
    };
    let batch_props = stacked(proposals.iter().map(|p| predictor_proposal(p, &ctx.ego, config)).collect())?;
    let z0 = stacked(noise.to_vec())?;
    let x0 = ddim_sample(&z0, schedule, n_steps, |z, t| {
        let batch = CandidateBatch {
            timesteps: vec![t; m],
            proposals: batch_props.clone(),
            horizon,
        };
        let mut tape = Tape::new(store);
        let zv = tape.constant(z.clone());
        let out = eps_predict_tape(&mut tape, zv, &batch, ctx, config)?;
        Ok(tape.value(out).clone())
    })?;
    proposals
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let sample = Array::new(horizon, 2, x0.data()[k * horizon * 2..(k + 1) * horizon * 2].to_vec())?;
            decode_sample(&sample, p, &ctx.ego, config)
        })
        .collect()
}

/// Refines a single proposal.
pub fn ddim_refine(
    proposal: &Trajectory,
    noise: &Array,
    ctx: &FlowContext,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    n_steps: usize,
    config: &FlowConfig,
) -> Result<Trajectory> {
    let out = ddim_refine_batch(
        std::slice::from_ref(proposal),
        std::slice::from_ref(noise),
        ctx,
        store,
        schedule,
        n_steps,
        config,
    )?;
    Ok(out.into_iter().next().expect("one candidate"))
}

/// Refines every proposal of a set with per-mode noise streams.
pub fn refine_proposals(
    proposals: &ProposalSet,
    scenario: &Scenario,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    n_steps: usize,
    config: &FlowConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let ctx = FlowContext::new(scenario, config.conditioning_source);
    let horizon = scenario.expert.len();
    let noise: Vec<Array> = (0..proposals.len())
        .map(|k| initial_noise(seed, scenario.seed, k, horizon))
        .collect();
    ddim_refine_batch(&proposals.trajectories, &noise, &ctx, store, schedule, n_steps, config)
}

/// DDIM recorded on the tape for one candidate, so a loss on the output
/// reaches the predictor weights. Returns the final `[T, 2]` sample.
pub fn ddim_on_tape(
    tape: &mut Tape,
    noise: &Array,
    proposal_local: &Array,
    ctx: &FlowContext,
    schedule: &NoiseSchedule,
    n_steps: usize,
    config: &FlowConfig,
) -> Result<Var> {
    let ts = schedule.ddim_timesteps(n_steps)?;
    let mut z = tape.constant(noise.clone());
    for pair in ts.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let batch = CandidateBatch {
            timesteps: vec![t],
            proposals: proposal_local.clone(),
            horizon: noise.rows(),
        };
        let eps_hat = eps_predict_tape(tape, z, &batch, ctx, config)?;
        let (ab, ab_next) = (schedule.alpha_bar(t)?, schedule.alpha_bar(t_next)?);
        let noise_part = tape.scale(eps_hat, (1.0 - ab).sqrt());
        let x0 = tape.sub(z, noise_part)?;
        let x0 = tape.scale(x0, 1.0 / ab.sqrt());
        if t_next == 0 {
            return Ok(x0);
        }
        let keep = tape.scale(x0, ab_next.sqrt());
        let renoise = tape.scale(eps_hat, (1.0 - ab_next).sqrt());
        z = tape.add(keep, renoise)?;
    }
    Ok(z)
}
