use chainflow::chain::RolloutSpec;
use chainflow::eval::metrics::{mini_pdms, sub_scores, SubScores, COLLISION_SUBSTEPS};
use chainflow::eval::{collision_pairs, evaluate_expert, evaluate_with, summary_table};
use chainflow::kinematics::{constant_velocity, EgoState, Trajectory};
use chainflow::pipeline::obstacle_seeking;
use chainflow::scenario::{generate_dataset, swept_collision, Obstacle, Scenario, ScenarioConfig, EGO_RADIUS};
use proptest::prelude::*;

fn data(seed: u64, n: usize) -> (Vec<Scenario>, ScenarioConfig) {
    let cfg = ScenarioConfig::default();
    (generate_dataset(seed, n, &cfg).unwrap(), cfg)
}

#[test]
fn expert_as_planner_is_perfect_on_hard_metrics() {
    let (d, _) = data(21, 200);
    let report = evaluate_expert(&d).unwrap();
    let m = report.means();
    assert_eq!((100.0 * m.nc, 100.0 * m.dac, 100.0 * m.ep), (100.0, 100.0, 100.0));
    let table = summary_table(&[report]);
    assert!(table.lines().nth(2).unwrap().starts_with("expert"));
}

#[test]
fn worked_aggregate() {
    let s = SubScores { nc: 1.0, dac: 1.0, ep: 0.9, ttc: 1.0, comfort: 1.0 };
    assert!((mini_pdms(&s) - 0.9583).abs() < 5e-5);
}

fn unit() -> impl Strategy<Value = f64> {
    0.0..=1.0f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn hard_gates_zero_the_aggregate(ep in unit(), ttc in unit(), comfort in unit(), gate in 0..2usize) {
        let mut s = SubScores { nc: 1.0, dac: 1.0, ep, ttc, comfort };
        if gate == 0 { s.nc = 0.0 } else { s.dac = 0.0 }
        prop_assert_eq!(mini_pdms(&s), 0.0);
    }

    #[test]
    fn aggregate_is_monotone(
        base in (unit(), unit(), unit(), unit(), unit()),
        which in 0..5usize,
        bump in unit(),
    ) {
        let s = SubScores { nc: base.0.round(), dac: base.1.round(), ep: base.2, ttc: base.3, comfort: base.4.round() };
        let mut t = s;
        let field = match which {
            0 => &mut t.nc,
            1 => &mut t.dac,
            2 => &mut t.ep,
            3 => &mut t.ttc,
            _ => &mut t.comfort,
        };
        *field = (*field + bump).min(1.0);
        let (a, b) = (mini_pdms(&s), mini_pdms(&t));
        prop_assert!(b >= a);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

fn move_point(p: [f64; 2], th: f64, shift: [f64; 2]) -> [f64; 2] {
    let (s, c) = th.sin_cos();
    [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1]]
}

fn move_state(st: &EgoState, th: f64, shift: [f64; 2]) -> EgoState {
    let p = move_point(st.position(), th, shift);
    EgoState::new(p[0], p[1], st.heading + th, st.speed)
}

fn move_traj(t: &Trajectory, th: f64, shift: [f64; 2]) -> Trajectory {
    Trajectory::new(t.states.iter().map(|s| move_state(s, th, shift)).collect(), t.dt).unwrap()
}

fn move_scenario(sc: &Scenario, th: f64, shift: [f64; 2]) -> Scenario {
    let mut out = sc.clone();
    out.corridor.centerline = sc.corridor.centerline.iter().map(|&p| move_point(p, th, shift)).collect();
    out.obstacles = sc
        .obstacles
        .iter()
        .map(|o| Obstacle {
            center: move_point(o.center, th, shift),
            radius: o.radius,
            velocity: move_point(o.velocity, th, [0.0, 0.0]),
        })
        .collect();
    out.ego_init = move_state(&sc.ego_init, th, shift);
    out.expert = move_traj(&sc.expert, th, shift);
    out
}

#[test]
fn metrics_ignore_rigid_motion() {
    let (d, cfg) = data(22, 150);
    let spec = RolloutSpec::from(&cfg);
    let motions = [(0.7, [100.0, -40.0]), (-2.9, [-3.0, 12.5]), (std::f64::consts::PI, [0.0, 0.0])];
    for sc in &d {
        let mut cands = vec![sc.expert.clone(), constant_velocity(&sc.ego_init, cfg.horizon, cfg.dt).unwrap()];
        cands.extend(obstacle_seeking(sc, &spec).unwrap());
        for &(th, shift) in &motions {
            let moved = move_scenario(sc, th, shift);
            for c in &cands {
                let a = sub_scores(c, sc);
                let b = sub_scores(&move_traj(c, th, shift), &moved);
                assert_eq!((a.nc, a.dac, a.comfort), (b.nc, b.dac, b.comfort), "{}", sc.id);
                assert!((a.ep - b.ep).abs() < 1e-9 && (a.ttc - b.ttc).abs() < 1e-9, "{}", sc.id);
            }
        }
    }
}

fn endpoint_collision(sc: &Scenario, t: &Trajectory) -> bool {
    t.states.iter().enumerate().any(|(i, s)| {
        sc.obstacles.iter().any(|o| {
            let c = o.position_at((i + 1) as f64 * t.dt);
            (s.x - c[0]).hypot(s.y - c[1]) < EGO_RADIUS + o.radius
        })
    })
}

#[test]
fn swept_check_is_stricter_than_endpoints() {
    let (d, cfg) = data(23, 100);
    let spec = RolloutSpec::from(&cfg);
    for sc in &d {
        let mut cands = vec![sc.expert.clone(), constant_velocity(&sc.ego_init, cfg.horizon, cfg.dt).unwrap()];
        cands.extend(obstacle_seeking(sc, &spec).unwrap());
        for c in &cands {
            if endpoint_collision(sc, c) {
                assert!(swept_collision(&sc.ego_init, c, &sc.obstacles, COLLISION_SUBSTEPS));
            }
        }
    }
    // Fast enough to hop over a small obstacle between two waypoints.
    let mut sc = d[0].clone();
    sc.ego_init = EgoState::new(0.0, 0.0, 0.0, 20.0);
    sc.obstacles = vec![Obstacle { center: [5.0, 0.0], radius: 0.5, velocity: [0.0, 0.0] }];
    let hop = constant_velocity(&sc.ego_init, 4, 0.5).unwrap();
    assert!(!endpoint_collision(&sc, &hop));
    assert!(swept_collision(&sc.ego_init, &hop, &sc.obstacles, COLLISION_SUBSTEPS));
}

#[test]
fn evaluation_keeps_dataset_order_and_is_repeatable() {
    let (d, cfg) = data(24, 40);
    let planner = |s: &Scenario| Ok((constant_velocity(&s.ego_init, cfg.horizon, cfg.dt)?, None));
    let a = evaluate_with(&d, "cv", planner).unwrap();
    let b = evaluate_with(&d, "cv", planner).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    let ids: Vec<&str> = a.rows.iter().map(|r| r.id.as_str()).collect();
    let expect: Vec<&str> = d.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, expect);
    assert_eq!(a.to_csv().lines().count(), d.len() + 2);
}

#[test]
fn collision_pairs_have_exactly_one_collider() {
    let (d, cfg) = data(25, 500);
    let spec = RolloutSpec::from(&cfg);
    let pairs = collision_pairs(&d, &spec, 200, 7).unwrap();
    assert_eq!(pairs.len(), 200);
    let mut first = 0;
    for p in &pairs {
        let sc = &d[p.scenario];
        let nc: Vec<f64> = p.candidates.iter().map(|c| sub_scores(c, sc).nc).collect();
        assert_eq!(nc[p.colliding], 0.0);
        assert_eq!(nc[1 - p.colliding], 1.0);
        first += usize::from(p.colliding == 0);
    }
    assert!((60..=140).contains(&first), "colliding candidate first in {first} pairs");
}
