use chainflow::chain::{
    chain_forward, collect_proposals, local_waypoints, register_chain, rollout_modes, rollout_modes_with, to_world,
    ChainConfig, RolloutSpec, TokenFeed,
};
use chainflow::kinematics::{rollout_controls_with, EgoState};
use chainflow::scenario::{generate_scenario, Scenario, ScenarioConfig};
use chainflow::tensor::{Array, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(modes: usize) -> ChainConfig {
    ChainConfig {
        modes,
        hidden_dim: 16,
        query_dim: 8,
        heads: 2,
        ..ChainConfig::default()
    }
}

fn setup(seed: u64, modes: usize) -> (Scenario, ParamStore, ChainConfig, RolloutSpec) {
    let cfg = ScenarioConfig::default();
    let sc = generate_scenario(seed, &cfg).unwrap();
    let config = small(modes);
    let mut store = ParamStore::new();
    register_chain(&mut store, &config, seed).unwrap();
    (sc, store, config, RolloutSpec::from(&cfg))
}

fn max_pos_diff(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs())).fold(0.0, f64::max)
}

#[test]
fn later_tokens_do_not_affect_earlier_waypoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..6 {
        let (sc, store, config, spec) = setup(seed, 3);
        let base: Vec<Array> = vec![sc.scene_tokens.clone(); spec.horizon];
        let cut = rng.gen_range(1..spec.horizon);
        let mut perturbed = base.clone();
        for tokens in perturbed.iter_mut().skip(cut) {
            *tokens = tokens.map(|v| if v != 0.0 { v + 3.0 } else { v });
        }
        let a = rollout_modes_with(TokenFeed::PerStep(&base), &sc.ego_init, &store, &config, &spec).unwrap();
        let b = rollout_modes_with(TokenFeed::PerStep(&perturbed), &sc.ego_init, &store, &config, &spec).unwrap();
        let mut later_differs = false;
        for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
            // Waypoint `i` is reached with the controls from steps `0..=i`.
            assert_eq!(ta.states[..cut], tb.states[..cut], "seed {seed} cut {cut}");
            later_differs |= ta.states[cut..] != tb.states[cut..];
        }
        assert!(later_differs, "perturbation had no effect at all");
        // A fixed feed equals a per-step feed of identical tokens.
        let fixed = rollout_modes(&sc, &store, &config, &spec).unwrap();
        assert_eq!(fixed, a);
    }
}

#[test]
fn permuting_mode_queries_permutes_proposals() {
    let (sc, store, config, spec) = setup(4, 4);
    let base = rollout_modes(&sc, &store, &config, &spec).unwrap();
    let perm = [2, 0, 3, 1];
    let mut swapped = store.clone();
    for (k, &src) in perm.iter().enumerate() {
        let q = store.value(&format!("chain.mode_query.{src}")).unwrap().clone();
        swapped.set_value(&format!("chain.mode_query.{k}"), q).unwrap();
    }
    let out = rollout_modes(&sc, &swapped, &config, &spec).unwrap();
    for (k, &src) in perm.iter().enumerate() {
        assert_eq!(out.trajectories[k], base.trajectories[src]);
        assert_eq!(out.controls[k], base.controls[src]);
    }
}

#[test]
fn single_mode_matches_each_batched_mode() {
    let (sc, store, config, spec) = setup(5, 3);
    let batched = rollout_modes(&sc, &store, &config, &spec).unwrap();
    for k in 0..config.modes {
        let one = ChainConfig { modes: 1, ..config.clone() };
        let mut single = ParamStore::new();
        register_chain(&mut single, &one, 0).unwrap();
        single.load_values_from(&store).unwrap();
        let q = store.value(&format!("chain.mode_query.{k}")).unwrap().clone();
        single.set_value("chain.mode_query.0", q).unwrap();
        let out = rollout_modes(&sc, &single, &one, &spec).unwrap();
        let d = max_pos_diff(&out.trajectories[0].positions(), &batched.trajectories[k].positions());
        assert!(d < 1e-9, "mode {k} differs by {d:e}");
    }
}

#[test]
fn proposals_replay_through_the_bicycle_model() {
    for seed in 0..5 {
        let (sc, store, config, spec) = setup(10 + seed, 3);
        let mut tape = Tape::new(&store);
        let out = chain_forward(&mut tape, TokenFeed::Fixed(&sc.scene_tokens), &sc.ego_init, &config, &spec).unwrap();
        let set = collect_proposals(&tape, &out, &sc.ego_init, &spec).unwrap();
        let positions = tape.value(out.positions).clone();
        for (k, (traj, ctrl)) in set.trajectories.iter().zip(&set.controls).enumerate() {
            assert!(ctrl.iter().all(|c| c.is_admissible(&spec.limits)));
            let local_start = EgoState::new(0.0, 0.0, 0.0, sc.ego_init.speed);
            let replay = to_world(&rollout_controls_with(&local_start, ctrl, spec.dt, &spec.limits).unwrap(), &sc.ego_init).unwrap();
            assert_eq!(&replay, traj);
            // The differentiable rollout agrees with the exact one.
            let local = local_waypoints(traj, &sc.ego_init);
            for (a, b) in local.data().iter().zip(positions.row_slice(k)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn controls_respect_limits_under_extreme_weights() {
    let (sc, mut store, config, spec) = setup(20, 3);
    for name in ["chain.head.1.w", "chain.head.1.b"] {
        let v = store.value(name).unwrap().scale(1e3);
        store.set_value(name, v).unwrap();
    }
    let set = rollout_modes(&sc, &store, &config, &spec).unwrap();
    for ctrl in set.controls.iter().flatten() {
        assert!(ctrl.accel.abs() <= spec.limits.max_accel && ctrl.yaw_rate.abs() <= spec.limits.max_yaw_rate);
    }
    assert!(set.trajectories.iter().flat_map(|t| &t.states).all(|s| s.speed >= 0.0 && s.is_finite()));
}

#[test]
fn rollout_is_equivariant_to_ego_pose() {
    let (sc, store, config, spec) = setup(21, 3);
    let mut moved = sc.ego_init;
    moved.x += 40.0;
    moved.y -= 13.0;
    moved.heading = chainflow::kinematics::wrap_angle(moved.heading + 1.1);
    let a = rollout_modes_with(TokenFeed::Fixed(&sc.scene_tokens), &sc.ego_init, &store, &config, &spec).unwrap();
    let b = rollout_modes_with(TokenFeed::Fixed(&sc.scene_tokens), &moved, &store, &config, &spec).unwrap();
    assert_eq!(a.controls, b.controls);
    for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
        let la = local_waypoints(ta, &sc.ego_init);
        let lb = local_waypoints(tb, &moved);
        assert!(la.max_abs_diff(&lb) < 1e-9);
    }
}
