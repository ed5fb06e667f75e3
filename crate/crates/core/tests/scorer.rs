use chainflow::chain::RolloutSpec;
use chainflow::kinematics::{constant_velocity, Trajectory};
use chainflow::pipeline::obstacle_seeking;
use chainflow::scenario::geometry::{cumulative_lengths, point_at};
use chainflow::scenario::{generate_dataset, generate_scenario, Scenario, ScenarioConfig};
use chainflow::scorer::{register_scorer, score_candidates, scorer_targets, select_best, ScorerConfig};
use chainflow::tensor::ParamStore;

fn setup(seed: u64) -> (Scenario, ParamStore, ScorerConfig, Vec<Trajectory>) {
    let cfg = ScenarioConfig::default();
    let sc = generate_scenario(seed, &cfg).unwrap();
    let config = ScorerConfig::default();
    let mut store = ParamStore::new();
    register_scorer(&mut store, &config, seed).unwrap();
    let spec = RolloutSpec::from(&cfg);
    let mut cands = vec![sc.expert.clone(), constant_velocity(&sc.ego_init, cfg.horizon, cfg.dt).unwrap()];
    if let Some(t) = obstacle_seeking(&sc, &spec).unwrap() {
        cands.push(t);
    }
    let slow = constant_velocity(&chainflow::kinematics::EgoState { speed: sc.ego_init.speed * 0.5, ..sc.ego_init }, cfg.horizon, cfg.dt).unwrap();
    cands.push(slow);
    (sc, store, config, cands)
}

#[test]
fn duplicates_score_identically() {
    for seed in 0..8 {
        let (sc, store, config, mut cands) = setup(seed);
        cands.push(cands[0].clone());
        cands.insert(1, cands[2].clone());
        let s = score_candidates(&cands, &sc, &store, &config).unwrap();
        assert_eq!(s[0], s[s.len() - 1]);
        assert_eq!(s[1], s[3]);
    }
}

#[test]
fn scores_follow_candidate_permutations() {
    for seed in 0..8 {
        let (sc, store, config, cands) = setup(seed);
        let base = score_candidates(&cands, &sc, &store, &config).unwrap();
        let n = cands.len();
        let order: Vec<usize> = (0..n).map(|i| (2 * n - 2 - i) % n).collect();
        let permuted: Vec<Trajectory> = order.iter().map(|&i| cands[i].clone()).collect();
        let s = score_candidates(&permuted, &sc, &store, &config).unwrap();
        for (j, &i) in order.iter().enumerate() {
            assert_eq!(s[j], base[i]);
        }
    }
}

#[test]
fn dropping_a_loser_keeps_the_winner() {
    for seed in 0..8 {
        let (sc, store, config, cands) = setup(seed);
        let base = score_candidates(&cands, &sc, &store, &config).unwrap();
        let best = select_best(&base);
        for drop in (0..cands.len()).filter(|&d| d != best) {
            let kept: Vec<Trajectory> = cands.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, c)| c.clone()).collect();
            let s = score_candidates(&kept, &sc, &store, &config).unwrap();
            let new_best = if drop < best { best - 1 } else { best };
            assert_eq!(s[new_best], base[best]);
            assert_eq!(select_best(&s), new_best);
        }
    }
}

#[test]
fn expert_targets() {
    let cfg = ScenarioConfig::default();
    for sc in generate_dataset(3, 100, &cfg).unwrap() {
        let t = scorer_targets(&sc.expert, &sc);
        assert_eq!((t.collides, t.off_drivable, t.progress), (0.0, 0.0, 1.0), "{}", sc.id);
    }
}

#[test]
fn path_through_an_obstacle_collides() {
    let cfg = ScenarioConfig::default();
    let mut checked = 0;
    for sc in generate_dataset(4, 60, &cfg).unwrap() {
        let Some(o) = sc.obstacles.first() else { continue };
        let start = sc.ego_init.position();
        let pts: Vec<[f64; 2]> = (1..=cfg.horizon)
            .map(|i| {
                let f = 2.0 * i as f64 / cfg.horizon as f64;
                [start[0] + f * (o.center[0] - start[0]), start[1] + f * (o.center[1] - start[1])]
            })
            .collect();
        let through = Trajectory::from_positions(&sc.ego_init, &pts, cfg.dt).unwrap();
        assert_eq!(scorer_targets(&through, &sc).collides, 1.0, "{}", sc.id);
        checked += 1;
    }
    assert!(checked > 20);
}

#[test]
fn half_length_expert_has_half_progress() {
    let cfg = ScenarioConfig::default();
    let tol = 1.0 / cfg.horizon as f64;
    for sc in generate_dataset(5, 100, &cfg).unwrap() {
        let mut path = vec![sc.ego_init.position()];
        path.extend(sc.expert.positions());
        let cum = cumulative_lengths(&path);
        if cum[cum.len() - 1] < 1.0 {
            continue;
        }
        let pts: Vec<[f64; 2]> = cum[1..].iter().map(|s| point_at(&path, &cum, 0.5 * s).0).collect();
        let half = Trajectory::from_positions(&sc.ego_init, &pts, cfg.dt).unwrap();
        let p = scorer_targets(&half, &sc).progress;
        assert!((p - 0.5).abs() <= tol, "{} progress {p}", sc.id);
    }
}
