//! Backward pass against central finite differences, for every layer, the
//! tape primitives, and the complete chain, refiner and scorer losses.

mod common;

use chainflow::chain::{chain_forward, local_waypoints, register_chain, ChainConfig, RolloutSpec, TokenFeed};
use chainflow::flow::{
    build_schedule, ddim_on_tape, eps_predict_tape, predictor_proposal, register_flow, CandidateBatch, FlowConfig,
    FlowContext, Space,
};
use chainflow::kinematics::constant_velocity;
use chainflow::scenario::{generate_scenario, Scenario, ScenarioConfig};
use chainflow::scorer::{register_scorer, scorer_forward, scorer_loss, scorer_targets, ScorerConfig};
use chainflow::tensor::{layers, Array, ParamStore, Tape, Var};
use chainflow::training::{loss_diff, loss_traj_stage1, DiffusionExample};
use common::{gradcheck, rng, weighted_sum, GradReport};
use rand::Rng;

const SHAPES: usize = 24;

fn assert_ok(what: &str, r: &GradReport) {
    assert!(r.checked > 0, "{what}: nothing checked");
    assert!(r.failures.is_empty(), "{what}: {} of {} failed: {:?}", r.failures.len(), r.checked, &r.failures[..r.failures.len().min(5)]);
}

fn randn(store: &mut ParamStore, name: &str, rows: usize, cols: usize, seed: u64) {
    store.register(name, Array::randn(rows, cols, 1.0, &mut rng(seed))).unwrap();
}

fn p(tape: &mut Tape, name: &str) -> Var {
    tape.param(name).unwrap()
}

#[test]
fn linear_layer() {
    let mut r = rng(1);
    for s in 0..SHAPES as u64 {
        let (n, i, o) = (r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..6));
        let mut st = ParamStore::new();
        randn(&mut st, "x", n, i, s);
        randn(&mut st, "w", i, o, s + 100);
        randn(&mut st, "b", 1, o, s + 200);
        let rep = gradcheck(&st, 64, s, &|t| {
            let (x, w, b) = (p(t, "x"), p(t, "w"), p(t, "b"));
            let y = layers::linear(t, x, w, b)?;
            weighted_sum(t, y, s)
        });
        assert_ok(&format!("linear {n}x{i}->{o}"), &rep);
    }
}

#[test]
fn layer_norm_and_modulation() {
    let mut r = rng(2);
    for s in 0..SHAPES as u64 {
        let (n, d) = (r.gen_range(1..5), r.gen_range(2..7));
        let mut st = ParamStore::new();
        randn(&mut st, "x", n, d, s);
        randn(&mut st, "g", 1, d, s + 1);
        randn(&mut st, "h", 1, d, s + 2);
        let rep = gradcheck(&st, 64, s, &|t| {
            let (x, g, h) = (p(t, "x"), p(t, "g"), p(t, "h"));
            let y = layers::layer_norm(t, x, g, h)?;
            weighted_sum(t, y, s)
        });
        assert_ok(&format!("layer_norm {n}x{d}"), &rep);
        let rep = gradcheck(&st, 64, s, &|t| {
            let (x, g, h) = (p(t, "x"), p(t, "g"), p(t, "h"));
            let y = layers::adaptive_modulate(t, x, g, h)?;
            weighted_sum(t, y, s + 9)
        });
        assert_ok(&format!("adaptive_modulate {n}x{d}"), &rep);
    }
}

#[test]
fn attention_layers() {
    let mut r = rng(3);
    for s in 0..SHAPES as u64 {
        let heads = r.gen_range(1..4);
        let (nq, nk, hd) = (r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..4));
        let d = heads * hd;
        let mut mask: Vec<bool> = (0..nk).map(|_| r.gen_bool(0.7)).collect();
        mask[r.gen_range(0..nk)] = true;
        let mut st = ParamStore::new();
        randn(&mut st, "q", nq, d, s);
        randn(&mut st, "k", nk, d, s + 1);
        randn(&mut st, "v", nk, d, s + 2);
        let m = mask.clone();
        let rep = gradcheck(&st, 64, s, &|t| {
            let (q, k, v) = (p(t, "q"), p(t, "k"), p(t, "v"));
            let y = layers::attention(t, q, k, v, Some(&m))?;
            weighted_sum(t, y, s)
        });
        assert_ok(&format!("attention {nq}/{nk}x{d}"), &rep);
        let rep = gradcheck(&st, 64, s, &|t| {
            let (q, k, v) = (p(t, "q"), p(t, "k"), p(t, "v"));
            let y = layers::multi_head_attention(t, q, k, v, heads, Some(&mask))?;
            weighted_sum(t, y, s + 3)
        });
        assert_ok(&format!("multi_head_attention {heads} heads {nq}/{nk}x{d}"), &rep);
    }
}

#[test]
fn pointwise_layers_and_losses() {
    let mut r = rng(4);
    for s in 0..SHAPES as u64 {
        let (n, d) = (r.gen_range(1..5), r.gen_range(1..6));
        let mut st = ParamStore::new();
        randn(&mut st, "x", n, d, s);
        randn(&mut st, "y", n, d, s + 1);
        let targets = Array::new(n, d, (0..n * d).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let rep = gradcheck(&st, 64, s, &|t| {
            let x = p(t, "x");
            let g = layers::gelu(t, x);
            weighted_sum(t, g, s)
        });
        assert_ok("gelu", &rep);
        let rep = gradcheck(&st, 64, s, &|t| {
            let (x, y) = (p(t, "x"), p(t, "y"));
            layers::mse(t, x, y)
        });
        assert_ok("mse", &rep);
        let tg = targets.clone();
        let rep = gradcheck(&st, 64, s, &|t| {
            let x = p(t, "x");
            let y = t.constant(tg.clone());
            layers::bce_with_logits(t, x, y)
        });
        assert_ok("bce_with_logits", &rep);
    }
}

type UnaryOp = fn(&mut Tape, Var) -> Var;

#[test]
fn tape_primitives() {
    let unary: [(&str, UnaryOp); 9] = [
        ("tanh", |t, a| t.tanh(a)),
        ("sigmoid", |t, a| t.sigmoid(a)),
        ("silu", |t, a| t.silu(a)),
        ("cos", |t, a| t.cos(a)),
        ("sin", |t, a| t.sin(a)),
        ("square", |t, a| t.square(a)),
        ("softplus", |t, a| t.softplus(a)),
        ("transpose", |t, a| t.transpose(a)),
        ("scale_shift", |t, a| {
            let b = t.scale(a, -1.7);
            t.add_scalar(b, 0.3)
        }),
    ];
    let mut r = rng(5);
    for s in 0..SHAPES as u64 {
        let (n, d) = (r.gen_range(1..5), r.gen_range(1..6));
        let mut st = ParamStore::new();
        randn(&mut st, "x", n, d, s);
        randn(&mut st, "y", n, d, s + 1);
        randn(&mut st, "row", 1, d, s + 2);
        randn(&mut st, "m", d, r.gen_range(1..4), s + 3);
        for (name, op) in unary {
            let rep = gradcheck(&st, 64, s, &|t| {
                let x = p(t, "x");
                let y = op(t, x);
                weighted_sum(t, y, s)
            });
            assert_ok(name, &rep);
        }
        // Kinked ops, evaluated away from their kinks.
        let mut st2 = ParamStore::new();
        let vals: Vec<f64> = (0..n * d)
            .map(|i| {
                let m = 0.2 + 0.37 * i as f64 + r.gen_range(0.0..0.1);
                if r.gen_bool(0.5) { m } else { -m }
            })
            .collect();
        st2.register("x", Array::new(n, d, vals).unwrap()).unwrap();
        for (name, op) in [("relu", (|t: &mut Tape, a| t.relu(a)) as UnaryOp), ("wrap_angle", |t, a| t.wrap_angle(a))] {
            let rep = gradcheck(&st2, 64, s, &|t| {
                let x = p(t, "x");
                let y = op(t, x);
                weighted_sum(t, y, s)
            });
            assert_ok(name, &rep);
        }
        let rep = gradcheck(&st2, 64, s, &|t| {
            let x = p(t, "x");
            let y = t.max_groups(x, 1)?;
            let z = t.mean_groups(x, n)?;
            let a = weighted_sum(t, y, s)?;
            let b = weighted_sum(t, z, s + 1)?;
            t.add(a, b)
        });
        assert_ok("group pooling", &rep);
        if n > 1 {
            let rep = gradcheck(&st2, 64, s, &|t| {
                let x = p(t, "x");
                let y = t.max_groups(x, n)?;
                weighted_sum(t, y, s)
            });
            assert_ok("max_groups", &rep);
        }

        let mask: Vec<bool> = (0..d).map(|j| j == 0 || r.gen_bool(0.6)).collect();
        let rep = gradcheck(&st, 64, s, &|t| {
            let (x, y, row, m) = (p(t, "x"), p(t, "y"), p(t, "row"), p(t, "m"));
            let a = t.softmax_rows(x, Some(&mask))?;
            let b = t.layer_norm_rows(y);
            let c = t.mul(a, b)?;
            let c = t.sub(c, x)?;
            let c = t.add_row(c, row)?;
            let c = t.mul_row(c, row)?;
            let c = t.matmul(c, m)?;
            let cat = t.concat_cols(&[c, x])?;
            let cat = t.concat_rows(&[cat, cat])?;
            let sl = t.slice_cols(cat, 1, d)?;
            let sl = t.slice_rows(sl, n - 1, n)?;
            let first = t.slice_rows(row, 0, 1)?;
            let br = t.broadcast_rows(first, 3)?;
            let rs = t.reshape(sl, 1, n * d)?;
            let mean = t.mean(rs);
            let l1 = weighted_sum(t, sl, s)?;
            let l2 = weighted_sum(t, br, s + 1)?;
            let l = t.add(l1, l2)?;
            t.add(l, mean)
        });
        assert_ok("composite primitives", &rep);
    }
}

fn small_chain() -> ChainConfig {
    ChainConfig {
        modes: 3,
        hidden_dim: 8,
        n_tok_layers: 2,
        query_dim: 6,
        heads: 2,
        token_dim: 16,
    }
}

fn small_flow(space: Space) -> FlowConfig {
    FlowConfig {
        n_blocks: 2,
        model_dim: 8,
        n_heads: 2,
        space,
        ..FlowConfig::default()
    }
}

fn scenarios(n: usize) -> Vec<Scenario> {
    let cfg = ScenarioConfig::default();
    (0..n as u64).map(|i| generate_scenario(1000 + i, &cfg).unwrap()).collect()
}

#[test]
fn chain_model_loss() {
    let cfg = ScenarioConfig::default();
    let spec = RolloutSpec::from(&cfg);
    for (i, sc) in scenarios(4).iter().enumerate() {
        let mut chain = small_chain();
        chain.heads = 1 + i % 2;
        let mut st = ParamStore::new();
        register_chain(&mut st, &chain, i as u64).unwrap();
        let expert = local_waypoints(&sc.expert, &sc.ego_init);
        let rep = gradcheck(&st, 6, i as u64, &|t| {
            let out = chain_forward(t, TokenFeed::Fixed(&sc.scene_tokens), &sc.ego_init, &chain, &spec)?;
            let (l, _) = loss_traj_stage1(t, out.positions, &expert)?;
            let h = weighted_sum(t, out.hidden, 5)?;
            let h = t.scale(h, 0.01);
            t.add(l, h)
        });
        assert_ok(&format!("chain on {}", sc.id), &rep);
    }
}

#[test]
fn scorer_model_loss() {
    let cfg = ScenarioConfig::default();
    for (i, sc) in scenarios(3).iter().enumerate() {
        let config = ScorerConfig {
            hidden_dim: 6,
            token_dim: 16,
        };
        let mut st = ParamStore::new();
        register_scorer(&mut st, &config, i as u64).unwrap();
        let cands = vec![
            sc.expert.clone(),
            constant_velocity(&sc.ego_init, cfg.horizon, cfg.dt).unwrap(),
        ];
        let targets: Vec<_> = cands.iter().map(|c| scorer_targets(c, sc)).collect();
        let rep = gradcheck(&st, 8, i as u64, &|t| {
            let raw = scorer_forward(t, &cands, sc, &config)?;
            scorer_loss(t, raw, &targets)
        });
        assert_ok(&format!("scorer on {}", sc.id), &rep);
    }
}

#[test]
fn flow_model_losses() {
    let schedule = build_schedule(1000).unwrap();
    for (i, sc) in scenarios(3).iter().enumerate() {
        for space in [Space::Residual, Space::Trajectory] {
            let config = small_flow(space);
            let mut st = ParamStore::new();
            register_flow(&mut st, &config, i as u64).unwrap();
            let ctx = FlowContext::new(sc, config.conditioning_source);
            let proposal = constant_velocity(&sc.ego_init, 8, 0.5).unwrap();
            let prop = predictor_proposal(&proposal, &sc.ego_init, &config);
            let mut r = rng(i as u64);
            let batch: Vec<DiffusionExample> = (0..2)
                .map(|_| DiffusionExample {
                    z: Array::randn(8, 2, 1.0, &mut r),
                    t: r.gen_range(1..=1000),
                    eps: Array::randn(8, 2, 1.0, &mut r),
                    proposal: prop.clone(),
                    ctx: ctx.clone(),
                })
                .collect();
            let rep = gradcheck(&st, 4, i as u64, &|t| loss_diff(t, &batch, &config));
            assert_ok(&format!("loss_diff {space:?}"), &rep);

            let noise = Array::randn(8, 2, 1.0, &mut r);
            let target = Array::randn(8, 2, 0.3, &mut r);
            let rep = gradcheck(&st, 3, i as u64, &|t| {
                let out = ddim_on_tape(t, &noise, &prop, &ctx, &schedule, 2, &config)?;
                let y = t.constant(target.clone());
                layers::mse(t, out, y)
            });
            assert_ok(&format!("ddim on tape {space:?}"), &rep);

            // Two candidates in one batched pass.
            let props = Array::new(16, 2, [prop.data(), prop.data()].concat()).unwrap();
            let z2 = Array::randn(16, 2, 1.0, &mut r);
            let rep = gradcheck(&st, 3, i as u64, &|t| {
                let cb = CandidateBatch {
                    timesteps: vec![40, 900],
                    proposals: props.clone(),
                    horizon: 8,
                };
                let z = t.constant(z2.clone());
                let e = eps_predict_tape(t, z, &cb, &ctx, &config)?;
                weighted_sum(t, e, 3)
            });
            assert_ok(&format!("batched eps_predict {space:?}"), &rep);
        }
    }
}

#[test]
fn backward_worked_examples() {
    // loss = sum(w) gives all-ones.
    let mut st = ParamStore::new();
    randn(&mut st, "w", 2, 3, 0);
    let mut t = Tape::new(&st);
    let w = p(&mut t, "w");
    let l = t.sum(w);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(st.id("w").unwrap()).unwrap().data(), &[1.0; 6]);

    // mse(x w + b, y) on 2x2: dL/dw = 2/n · xᵀ (ŷ - y).
    let mut st = ParamStore::new();
    st.register("w", Array::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap()).unwrap();
    st.register("b", Array::row(&[0.1, -0.2])).unwrap();
    let x = Array::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
    let y = Array::from_rows(&[[0.0, 1.0], [2.0, 0.5]]).unwrap();
    let mut t = Tape::new(&st);
    let (w, b) = (p(&mut t, "w"), p(&mut t, "b"));
    let xv = t.constant(x.clone());
    let yv = t.constant(y.clone());
    let pred = layers::linear(&mut t, xv, w, b).unwrap();
    let l = layers::mse(&mut t, pred, yv).unwrap();
    let g = t.backward(l).unwrap();
    let yhat = t.value(pred).clone();
    let resid = yhat.zip_map(&y, |a, b| 2.0 * (a - b) / 4.0);
    let expect_w = x.transpose().matmul(&resid).unwrap();
    let gw = g.get(st.id("w").unwrap()).unwrap();
    assert!(gw.max_abs_diff(&expect_w) < 1e-12);
    let gb = g.get(st.id("b").unwrap()).unwrap();
    for c in 0..2 {
        assert!((gb.get(0, c) - (resid.get(0, c) + resid.get(1, c))).abs() < 1e-12);
    }

    // Backward of a non-scalar is refused.
    let mut t = Tape::new(&st);
    let w = p(&mut t, "w");
    assert!(t.backward(w).is_err());
}
