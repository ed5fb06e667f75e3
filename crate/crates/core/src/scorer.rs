//! Candidate scoring and selection.
//!
//! Each waypoint of a candidate attends over the scene tokens. Keys and
//! values are built per (waypoint, token) pair from the token features and
//! the token's geometry relative to that waypoint (offset, distance, and the
//! clearance to an obstacle disc or the excess over a lane half width). Waypoint
//! outputs are pooled (mean and max) into three sub-scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{drivable_compliance, ego_progress, no_collision};
use crate::kinematics::Trajectory;
use crate::scenario::{normalize_tokens, token_mask, Scenario, TokenLayout, EGO_RADIUS};
use crate::tensor::{apply_linear, layers, register_linear, Array, ParamStore, Tape, Var};

pub const PREFIX: &str = "scorer";

const WAYPOINT_FEATURES: usize = 6;
const PAIR_GEOMETRY: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub hidden_dim: usize,
    pub token_dim: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            token_dim: 16,
        }
    }
}

/// Sub-scores of one candidate. `collision_logit` and `drivable_logit` are
/// logits of the candidate being collision-free and staying on the
/// drivable area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub collision_logit: f64,
    pub drivable_logit: f64,
    pub progress_estimate: f64,
    pub aggregate: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ScoreVector {
    pub fn new(collision_logit: f64, drivable_logit: f64, progress_estimate: f64) -> Self {
        Self {
            collision_logit,
            drivable_logit,
            progress_estimate,
            aggregate: sigmoid(collision_logit) * sigmoid(drivable_logit) * (0.5 + 0.5 * progress_estimate),
        }
    }
}

/// Ground-truth labels: `(collides, off_drivable, progress)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerTargets {
    pub collides: f64,
    pub off_drivable: f64,
    pub progress: f64,
}

pub fn scorer_targets(candidate: &Trajectory, scenario: &Scenario) -> ScorerTargets {
    ScorerTargets {
        collides: 1.0 - no_collision(candidate, scenario),
        off_drivable: 1.0 - drivable_compliance(candidate, scenario),
        progress: ego_progress(candidate, scenario),
    }
}

pub fn register_scorer(store: &mut ParamStore, config: &ScorerConfig, seed: u64) -> Result<()> {
    if config.hidden_dim == 0 {
        return Err(Error::Config("scorer.hidden_dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let h = config.hidden_dim;
    register_linear(store, &format!("{PREFIX}.wp"), WAYPOINT_FEATURES, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.query"), h, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.pair"), config.token_dim + PAIR_GEOMETRY, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.key"), h, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.value"), h, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.mix"), 2 * h, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.head.0"), 2 * h, h, 1.0, &mut rng)?;
    register_linear(store, &format!("{PREFIX}.head.1"), h, 3, 0.5, &mut rng)?;
    Ok(())
}

/// `[M, 3]` raw outputs (collision-free logit, drivable logit, progress
/// logit) for `M` candidates of one scenario.
pub fn scorer_forward(
    tape: &mut Tape,
    candidates: &[Trajectory],
    scenario: &Scenario,
    config: &ScorerConfig,
) -> Result<Var> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates to score".into()));
    }
    let tokens = &scenario.scene_tokens;
    if tokens.cols() != config.token_dim {
        return Err(Error::shape("scorer tokens", &tokens.shape(), &[config.token_dim]));
    }
    let h = config.hidden_dim;
    let t_len = candidates[0].len();
    if candidates.iter().any(|c| c.len() != t_len) || t_len == 0 {
        return Err(Error::InvalidArgument("candidates differ in length".into()));
    }
    let m = candidates.len();
    let n = tokens.rows();
    let ego = &scenario.ego_init;
    let norm = normalize_tokens(tokens);

    let mut wp = Vec::with_capacity(m * t_len * WAYPOINT_FEATURES);
    let mut pair = Vec::with_capacity(m * t_len * n * (config.token_dim + PAIR_GEOMETRY));
    for c in candidates {
        for (i, s) in c.states.iter().enumerate() {
            let p = ego.to_local(s.position());
            let rel_h = s.heading - ego.heading;
            wp.extend([
                p[0] * 0.05,
                p[1] * 0.05,
                rel_h.cos(),
                rel_h.sin(),
                s.speed * 0.1,
                (i + 1) as f64 / t_len as f64,
            ]);
            let t = (i + 1) as f64 * c.dt;
            for j in 0..n {
                pair.extend_from_slice(norm.row_slice(j));
                pair.extend(pair_geometry(tokens, j, p, t));
            }
        }
    }
    let rows = m * t_len;
    let wp = tape.constant(Array::new(rows, WAYPOINT_FEATURES, wp)?);
    let pair = tape.constant(Array::new(rows * n, config.token_dim + PAIR_GEOMETRY, pair)?);

    let wp_emb = apply_linear(tape, &format!("{PREFIX}.wp"), wp)?;
    let wp_emb = tape.gelu(wp_emb);
    let q = apply_linear(tape, &format!("{PREFIX}.query"), wp_emb)?;
    let pe = apply_linear(tape, &format!("{PREFIX}.pair"), pair)?;
    let pe = tape.gelu(pe);
    let k = apply_linear(tape, &format!("{PREFIX}.key"), pe)?;
    let v = apply_linear(tape, &format!("{PREFIX}.value"), pe)?;

    let mut repeat = Array::zeros(rows * n, rows);
    for r in 0..rows * n {
        repeat.set(r, r / n, 1.0);
    }
    let repeat = tape.constant(repeat);
    let q_rep = tape.matmul(repeat, q)?;
    let qk = tape.mul(q_rep, k)?;
    let ones_h = tape.constant(Array::full(h, 1, 1.0 / (h as f64).sqrt()));
    let logits = tape.matmul(qk, ones_h)?;
    let logits = tape.reshape(logits, rows, n)?;
    let mask = token_mask(tokens);
    let w = tape.softmax_rows(logits, Some(&mask))?;
    let w = tape.reshape(w, rows * n, 1)?;
    let ones_row = tape.constant(Array::full(1, h, 1.0));
    let w = tape.matmul(w, ones_row)?;
    let wv = tape.mul(w, v)?;
    let ctx = tape.mean_groups(wv, n)?;
    let ctx = tape.scale(ctx, n as f64);

    let mixed = tape.concat_cols(&[wp_emb, ctx])?;
    let mixed = apply_linear(tape, &format!("{PREFIX}.mix"), mixed)?;
    let mixed = layers::gelu(tape, mixed);
    let mean = tape.mean_groups(mixed, t_len)?;
    let max = tape.max_groups(mixed, t_len)?;
    let pooled = tape.concat_cols(&[mean, max])?;
    let hdn = apply_linear(tape, &format!("{PREFIX}.head.0"), pooled)?;
    let hdn = tape.gelu(hdn);
    let out = apply_linear(tape, &format!("{PREFIX}.head.1"), hdn)?;
    tape.check_finite(out, "scorer output")?;
    Ok(out)
}

/// Geometry of token `j` relative to an ego-frame waypoint `p` at time `t`.
/// Obstacles are extrapolated to `t` and carry their disc clearance; lane
/// segments are expressed along and across their direction with the lateral
/// excess over the half width.
fn pair_geometry(tokens: &Array, j: usize, p: [f64; 2], t: f64) -> [f64; PAIR_GEOMETRY] {
    let (tx, ty) = (tokens.get(j, 0), tokens.get(j, 1));
    if tokens.get(j, TokenLayout::OBSTACLE_FLAG) > 0.5 {
        let dx = tx + tokens.get(j, 3) * t - p[0];
        let dy = ty + tokens.get(j, 4) * t - p[1];
        let d = dx.hypot(dy);
        let clearance = d - tokens.get(j, 2) - EGO_RADIUS;
        [dx * 0.1, dy * 0.1, d * 0.1, clearance.clamp(-4.0, 4.0) * 0.5]
    } else if tokens.get(j, TokenLayout::LANE_FLAG) > 0.5 {
        let (c, sn) = (tokens.get(j, 2), tokens.get(j, 3));
        let (dx, dy) = (p[0] - tx, p[1] - ty);
        let along = c * dx + sn * dy;
        let across = -sn * dx + c * dy;
        let excess = across.abs() - tokens.get(j, 4);
        [along * 0.1, across * 0.1, dx.hypot(dy) * 0.1, excess.clamp(-4.0, 4.0) * 0.5]
    } else {
        let (dx, dy) = (tx - p[0], ty - p[1]);
        [dx * 0.1, dy * 0.1, dx.hypot(dy) * 0.1, 0.0]
    }
}

fn to_scores(raw: &Array) -> Vec<ScoreVector> {
    (0..raw.rows())
        .map(|r| ScoreVector::new(raw.get(r, 0), raw.get(r, 1), sigmoid(raw.get(r, 2))))
        .collect()
}

pub fn score_candidates(
    candidates: &[Trajectory],
    scenario: &Scenario,
    store: &ParamStore,
    config: &ScorerConfig,
) -> Result<Vec<ScoreVector>> {
    let mut tape = Tape::new(store);
    let out = scorer_forward(&mut tape, candidates, scenario, config)?;
    Ok(to_scores(tape.value(out)))
}

/// Index of the largest aggregate; the lowest index wins ties.
pub fn select_best(scores: &[ScoreVector]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.aggregate > scores[best].aggregate {
            best = i;
        }
    }
    best
}

/// Scorer loss for `M` candidates: BCE on both logits plus squared error on
/// the progress estimate, equally weighted.
pub fn scorer_loss(tape: &mut Tape, raw: Var, targets: &[ScorerTargets]) -> Result<Var> {
    let m = targets.len();
    if tape.shape(raw) != [m, 3] {
        return Err(Error::shape("scorer_loss", &tape.shape(raw), &[m, 3]));
    }
    let col = |f: fn(&ScorerTargets) -> f64| Array::new(m, 1, targets.iter().map(f).collect()).expect("m x 1");
    let safe = tape.constant(col(|t| 1.0 - t.collides));
    let on_road = tape.constant(col(|t| 1.0 - t.off_drivable));
    let progress = tape.constant(col(|t| t.progress));
    let l_col = tape.slice_cols(raw, 0, 1)?;
    let l_dac = tape.slice_cols(raw, 1, 1)?;
    let l_prog = tape.slice_cols(raw, 2, 1)?;
    let a = layers::bce_with_logits(tape, l_col, safe)?;
    let b = layers::bce_with_logits(tape, l_dac, on_road)?;
    let p = tape.sigmoid(l_prog);
    let c = layers::mse(tape, p, progress)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(aggregate: f64) -> ScoreVector {
        ScoreVector {
            collision_logit: 0.0,
            drivable_logit: 0.0,
            progress_estimate: 0.0,
            aggregate,
        }
    }

    #[test]
    fn selection_rule() {
        assert_eq!(select_best(&[sv(0.1)]), 0);
        assert_eq!(select_best(&[sv(0.2), sv(0.9), sv(0.9)]), 1);
    }

    #[test]
    fn aggregate_formula() {
        let s = ScoreVector::new(0.0, 0.0, 1.0);
        assert!((s.aggregate - 0.25).abs() < 1e-15);
        let s = ScoreVector::new(50.0, 50.0, 0.0);
        assert!((s.aggregate - 0.5).abs() < 1e-12);
    }
}
