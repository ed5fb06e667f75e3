//! Scene featurization.
//!
//! Scene tokens carry continuous ego-relative geometry: one ego token, one
//! token per obstacle (nearest first) and one per centerline segment ahead,
//! zero-padded to a fixed count. Semantic context carries discrete scene
//! attributes, each looked up in a fixed seeded codebook.

use std::f64::consts::{FRAC_PI_4, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::geometry::{cumulative_lengths, point_at};
use super::{Scenario, ScenarioConfig};
use crate::error::{Error, Result};
use crate::kinematics::wrap_angle;
use crate::tensor::Array;

/// Column holding the token-type flags.
#[derive(Debug, Clone, Copy)]
pub struct TokenLayout;

impl TokenLayout {
    pub const EGO_FLAG: usize = 13;
    pub const OBSTACLE_FLAG: usize = 14;
    pub const LANE_FLAG: usize = 15;
    pub const MIN_DIM: usize = 16;
}

/// Fixed input scaling applied before any learned layer reads the tokens.
pub const TOKEN_INPUT_SCALE: f64 = 0.1;

/// `tokens * TOKEN_INPUT_SCALE`; padding rows stay zero.
pub fn normalize_tokens(tokens: &Array) -> Array {
    tokens.scale(TOKEN_INPUT_SCALE)
}

/// `true` for every non-padding token row.
pub fn token_mask(tokens: &Array) -> Vec<bool> {
    (0..tokens.rows())
        .map(|r| tokens.row_slice(r).iter().any(|&v| v != 0.0))
        .collect()
}

pub fn encode_scene_tokens(s: &Scenario, config: &ScenarioConfig) -> Result<Array> {
    let need = 1 + config.max_obstacles + config.lane_tokens;
    if config.n_tokens < need || config.token_dim < TokenLayout::MIN_DIM {
        return Err(Error::InvalidArgument(format!(
            "token budget {}x{} too small for {need} tokens of width {}",
            config.n_tokens,
            config.token_dim,
            TokenLayout::MIN_DIM
        )));
    }
    if s.obstacles.len() > config.max_obstacles {
        return Err(Error::InvalidArgument(format!(
            "{} obstacles exceed max_obstacles {}",
            s.obstacles.len(),
            config.max_obstacles
        )));
    }
    let ego = &s.ego_init;
    let mut tokens = Array::zeros(config.n_tokens, config.token_dim);

    tokens.set(0, 2, ego.speed);
    tokens.set(0, TokenLayout::EGO_FLAG, 1.0);

    let mut obstacles: Vec<_> = s
        .obstacles
        .iter()
        .map(|o| {
            let rel = ego.to_local(o.center);
            (rel[0].hypot(rel[1]), rel, o)
        })
        .collect();
    obstacles.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (i, (d, rel, o)) in obstacles.iter().enumerate() {
        let row = 1 + i;
        let vel = ego.rotate_to_local(o.velocity);
        for (c, v) in [rel[0], rel[1], o.radius, vel[0], vel[1], *d].into_iter().enumerate() {
            tokens.set(row, c, v);
        }
        tokens.set(row, TokenLayout::OBSTACLE_FLAG, 1.0);
    }

    let line = &s.corridor.centerline;
    let cum = cumulative_lengths(line);
    let s0 = s.corridor.project(ego.position()).station;
    let spacing = config.lane_token_spacing;
    let mut prev_heading = None;
    for j in 0..config.lane_tokens {
        let (a, _) = point_at(line, &cum, s0 + j as f64 * spacing);
        let (b, _) = point_at(line, &cum, s0 + (j + 1) as f64 * spacing);
        let mid = ego.to_local([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]);
        let chord = ((b[0] - a[0]).hypot(b[1] - a[1])).max(1e-9);
        let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
        let rel_heading = wrap_angle(heading - ego.heading);
        let curvature = prev_heading.map_or(0.0, |p| wrap_angle(heading - p) / spacing);
        prev_heading = Some(heading);
        let row = 1 + config.max_obstacles + j;
        let feats = [
            mid[0],
            mid[1],
            rel_heading.cos(),
            rel_heading.sin(),
            s.corridor.half_width,
            chord,
            curvature * 10.0,
        ];
        for (c, v) in feats.into_iter().enumerate() {
            tokens.set(row, c, v);
        }
        tokens.set(row, TokenLayout::LANE_FLAG, 1.0);
    }
    Ok(tokens)
}

/// Semantic attribute slots, one codebook row each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Slot {
    Maneuver = 0,
    Layout = 1,
    SpeedRegime = 2,
    Goal = 3,
}

const ROUTE_WINDOWS: [(f64, f64); 4] = [(0.0, 10.0), (10.0, 20.0), (20.0, 40.0), (40.0, 60.0)];

fn obstacle_layout_class(s: &Scenario) -> usize {
    let n = s.obstacles.len();
    let count = match n {
        0 => 0,
        1..=2 => 1,
        3..=4 => 2,
        _ => 3,
    };
    let ego_station = s.corridor.project(s.ego_init.position()).station;
    let blocking = s.obstacles.iter().any(|o| {
        let p = s.corridor.project(o.center);
        p.distance < s.corridor.half_width && p.station > ego_station
    });
    count * 2 + usize::from(blocking)
}

fn speed_regime(speed: f64) -> usize {
    match speed {
        v if v < 5.0 => 0,
        v if v < 8.0 => 1,
        v if v < 11.0 => 2,
        _ => 3,
    }
}

fn direction_class(angle: f64, sharp: f64, slight: f64) -> usize {
    match angle {
        a if a > sharp => 0,
        a if a > slight => 1,
        a if a >= -slight => 2,
        a if a >= -sharp => 3,
        _ => 4,
    }
}

fn codebook_row(seed: u64, slot: usize, class: usize, dim: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((slot as u64) << 32) ^ class as u64);
    rng.set_stream(0xc0de);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn synth_semantic_ctx(s: &Scenario, config: &ScenarioConfig) -> Result<Array> {
    let n = config.n_semantic;
    if n < 4 + ROUTE_WINDOWS.len() {
        return Err(Error::InvalidArgument(format!("n_semantic {n} below the 8 attribute slots")));
    }
    let line = &s.corridor.centerline;
    let cum = cumulative_lengths(line);
    let s0 = s.corridor.project(s.ego_init.position()).station;
    let (_, end_heading) = point_at(line, &cum, f64::INFINITY);
    let goal = wrap_angle(end_heading - s.ego_init.heading);

    let mut classes = vec![
        (Slot::Maneuver as usize, s.maneuver.index()),
        (Slot::Layout as usize, obstacle_layout_class(s)),
        (Slot::SpeedRegime as usize, speed_regime(s.ego_init.speed)),
        (Slot::Goal as usize, direction_class(goal, FRAC_PI_4, 0.2)),
    ];
    for (w, (from, to)) in ROUTE_WINDOWS.iter().enumerate() {
        let (_, h0) = point_at(line, &cum, s0 + from);
        let (_, h1) = point_at(line, &cum, s0 + to);
        let turn = wrap_angle(h1 - h0);
        classes.push((4 + w, direction_class(turn, PI / 8.0, 0.05)));
    }
    let mut ctx = Array::zeros(n, config.semantic_dim);
    for (slot, class) in classes {
        let row = codebook_row(config.codebook_seed, slot, class, config.semantic_dim);
        for (c, v) in row.into_iter().enumerate() {
            ctx.set(slot, c, v);
        }
    }
    Ok(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{EgoState, Trajectory};
    use crate::scenario::{LaneCorridor, Maneuver, Obstacle};

    fn base_scenario() -> Scenario {
        let centerline: Vec<[f64; 2]> = (0..120).map(|i| [i as f64 - 10.0, 0.0]).collect();
        Scenario {
            id: "t".into(),
            seed: 0,
            corridor: LaneCorridor {
                centerline,
                half_width: 3.0,
            },
            obstacles: vec![],
            ego_init: EgoState::new(0.0, 0.0, 0.0, 10.0),
            expert: Trajectory::new(vec![EgoState::new(0.0, 0.0, 0.0, 0.0); 8], 0.5).unwrap(),
            maneuver: Maneuver::Straight,
            scene_tokens: Array::zeros(0, 0),
            semantic_ctx: Array::zeros(0, 0),
        }
    }

    #[test]
    fn empty_obstacle_slots_are_padding() {
        let cfg = ScenarioConfig::default();
        let t = encode_scene_tokens(&base_scenario(), &cfg).unwrap();
        for r in 1..=cfg.max_obstacles {
            assert!(t.row_slice(r).iter().all(|&v| v == 0.0));
        }
        let mask = token_mask(&t);
        assert!(mask[0] && !mask[1] && mask[1 + cfg.max_obstacles]);
        assert!(!mask[cfg.n_tokens - 1]);
    }

    #[test]
    fn obstacle_token_leads_with_relative_position() {
        let mut s = base_scenario();
        s.obstacles.push(Obstacle {
            center: [10.0, 2.0],
            radius: 1.0,
            velocity: [0.0, 0.0],
        });
        let t = encode_scene_tokens(&s, &ScenarioConfig::default()).unwrap();
        assert_eq!(&t.row_slice(1)[..3], &[10.0, 2.0, 1.0]);
        assert_eq!(t.get(1, TokenLayout::OBSTACLE_FLAG), 1.0);
    }

    #[test]
    fn rigid_translation_leaves_tokens() {
        let cfg = ScenarioConfig::default();
        let mut s = base_scenario();
        s.obstacles.push(Obstacle {
            center: [12.5, -4.25],
            radius: 0.75,
            velocity: [1.0, 0.5],
        });
        let t0 = encode_scene_tokens(&s, &cfg).unwrap();
        let (dx, dy) = (37.25, -12.5);
        let shift = |p: [f64; 2]| [p[0] + dx, p[1] + dy];
        s.corridor.centerline = s.corridor.centerline.iter().map(|&p| shift(p)).collect();
        s.obstacles[0].center = shift(s.obstacles[0].center);
        s.ego_init.x += dx;
        s.ego_init.y += dy;
        let t1 = encode_scene_tokens(&s, &cfg).unwrap();
        assert!(t0.max_abs_diff(&t1) < 1e-9);
    }

    #[test]
    fn jitter_keeps_semantics() {
        let cfg = ScenarioConfig::default();
        let mut s = base_scenario();
        s.obstacles.push(Obstacle {
            center: [15.0, 6.0],
            radius: 1.0,
            velocity: [0.0, 0.0],
        });
        let a = synth_semantic_ctx(&s, &cfg).unwrap();
        s.obstacles[0].center = [15.01, 5.99];
        let b = synth_semantic_ctx(&s, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn maneuver_changes_only_its_slot() {
        let cfg = ScenarioConfig::default();
        let mut s = base_scenario();
        let a = synth_semantic_ctx(&s, &cfg).unwrap();
        s.maneuver = Maneuver::LeftTurn;
        let b = synth_semantic_ctx(&s, &cfg).unwrap();
        for r in 0..cfg.n_semantic {
            let same = a.row_slice(r) == b.row_slice(r);
            assert_eq!(same, r != Slot::Maneuver as usize, "row {r}");
        }
        assert_eq!(synth_semantic_ctx(&s, &cfg).unwrap(), b);
    }
}
