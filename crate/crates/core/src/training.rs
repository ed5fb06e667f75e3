//! Two-stage optimization.
//!
//! Stage I trains the chain and the scorer: the trajectory loss reaches only
//! the winning mode. Stage II freezes the chain, assigns each scenario to
//! the raw proposal closest to the expert, trains the refiner's noise
//! prediction on that proposal's residual, supervises a short on-tape DDIM
//! reconstruction of it, and keeps training the scorer on refined
//! candidates.
//!
//! Batch shards run on the rayon pool; per-sample gradients are summed in
//! sample order so results do not depend on the thread count.

use std::f64::consts::PI;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{chain_forward, collect_proposals, local_waypoints, ProposalSet, RolloutSpec, TokenFeed};
use crate::error::{Error, Result};
use crate::flow::{
    ddim_on_tape, ddim_refine_batch, diffusion_target, eps_predict_tape, initial_noise, normal_array,
    predictor_proposal, q_sample, CandidateBatch, FlowContext, NoiseSchedule, Space,
};
use crate::kinematics::{ade, Trajectory};
use crate::pipeline::{reference_candidates, ModelConfig};
use crate::scenario::{scenario_seed, Scenario};
use crate::scorer::{scorer_forward, scorer_loss, scorer_targets, ScorerTargets};
use crate::tensor::{layers, AdamW, Array, Gradients, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 20.0,
            lambda4: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            base_lr: 2e-4,
            warmup_frac: 0.10,
            epochs_stage1: 25,
            epochs_stage2: 40,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("train.warmup_frac {} outside [0, 1)", self.warmup_frac)));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("train.base_lr must be positive".into()));
        }
        let w = &self.weights;
        if [w.lambda1, w.lambda2, w.lambda3, w.lambda4].iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    fn optimizer(&self, lr: f64) -> AdamW {
        AdamW {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Learning rate at `step` of `total_steps`: peak `base_lr * sqrt(B / 64)`,
/// linear warmup over the first `warmup_frac`, cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond {total_steps}")));
    }
    let peak = config.base_lr * (config.batch_size as f64 / 64.0).sqrt();
    let warm = config.warmup_frac * total_steps as f64;
    let s = step as f64;
    if s < warm {
        return Ok(peak * s / warm);
    }
    let span = total_steps as f64 - warm;
    if span <= 0.0 {
        return Ok(0.0);
    }
    Ok(peak * 0.5 * (1.0 + (PI * (s - warm) / span).cos()))
}

/// Euclidean norm of the flattened waypoint difference.
fn trajectory_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Index of the row of `candidates` (`[K, 2T]`) closest to `expert` (`[1, 2T]`)
/// under the flattened L2 norm; the lowest index wins ties.
pub fn wta_assign_rows(candidates: &Array, expert: &Array) -> usize {
    let mut best = (0, f64::INFINITY);
    for k in 0..candidates.rows() {
        let d = trajectory_distance(candidates.row_slice(k), expert.data());
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Proposal closest to the expert under the flattened L2 waypoint norm.
pub fn wta_assign(proposals: &[Trajectory], expert: &Trajectory) -> usize {
    let flat = |t: &Trajectory| -> Vec<f64> { t.states.iter().flat_map(|s| [s.x, s.y]).collect() };
    let e = flat(expert);
    let mut best = (0, f64::INFINITY);
    for (k, p) in proposals.iter().enumerate() {
        let d = trajectory_distance(&flat(p), &e);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Mean squared waypoint error of the winning mode only.
pub fn loss_traj_stage1(tape: &mut Tape, positions: Var, expert: &Array) -> Result<(Var, usize)> {
    let k = wta_assign_rows(tape.value(positions), expert);
    let row = tape.slice_rows(positions, k, 1)?;
    let target = tape.constant(expert.clone());
    Ok((layers::mse(tape, row, target)?, k))
}

/// One denoising training example.
#[derive(Debug, Clone)]
pub struct DiffusionExample {
    pub z: Array,
    pub t: usize,
    pub eps: Array,
    /// Ego-frame proposal waypoints `[T, 2]` as seen by the predictor.
    pub proposal: Array,
    pub ctx: FlowContext,
}

/// Mean over examples of the mean squared noise-prediction error.
pub fn loss_diff(tape: &mut Tape, batch: &[DiffusionExample], config: &crate::flow::FlowConfig) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty diffusion batch".into()));
    }
    let mut total: Option<Var> = None;
    for ex in batch {
        let cb = CandidateBatch {
            timesteps: vec![ex.t],
            proposals: ex.proposal.clone(),
            horizon: ex.z.rows(),
        };
        let z = tape.constant(ex.z.clone());
        let eps_hat = eps_predict_tape(tape, z, &cb, &ex.ctx, config)?;
        let eps = tape.constant(ex.eps.clone());
        let l = layers::mse(tape, eps_hat, eps)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / batch.len() as f64))
}

/// Uniform draw from `[1, n]`.
pub fn sample_timestep(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.gen_range(1..=n)
}

/// RNG for one sample of one step, independent of how the batch is sharded.
pub fn sample_rng(seed: u64, stage: u64, epoch: usize, step: usize, index: usize) -> ChaCha8Rng {
    let key = scenario_seed(scenario_seed(seed ^ stage, epoch as u64), step as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepMetrics {
    pub lr: f64,
    pub loss_total: f64,
    pub loss_traj: f64,
    pub loss_diff: f64,
    pub loss_scorer: f64,
    pub min_ade: f64,
}

struct SampleResult {
    grads: Option<Gradients>,
    metrics: StepMetrics,
}

fn targets_for(candidates: &[Trajectory], scenario: &Scenario) -> Vec<ScorerTargets> {
    candidates.iter().map(|c| scorer_targets(c, scenario)).collect()
}

fn min_ade(candidates: &[Trajectory], expert: &Trajectory) -> Result<f64> {
    candidates
        .iter()
        .map(|c| ade(c, expert))
        .try_fold(f64::INFINITY, |m, d| Ok(m.min(d?)))
}

/// Stage I loss for one scenario, scaled by `1 / batch`.
fn stage1_sample(
    scenario: &Scenario,
    store: &ParamStore,
    model: &ModelConfig,
    spec: &RolloutSpec,
    weights: &LossWeights,
    batch: usize,
    with_grads: bool,
) -> Result<SampleResult> {
    let mut tape = Tape::new(store);
    let out = chain_forward(
        &mut tape,
        TokenFeed::Fixed(&scenario.scene_tokens),
        &scenario.ego_init,
        &model.chain,
        spec,
    )?;
    let expert = local_waypoints(&scenario.expert, &scenario.ego_init);
    let (l_traj, _) = loss_traj_stage1(&mut tape, out.positions, &expert)?;
    let proposals = collect_proposals(&tape, &out, &scenario.ego_init, spec)?;
    let min_ade = min_ade(&proposals.trajectories, &scenario.expert)?;

    let mut loss = l_traj;
    let mut l_scorer_value = 0.0;
    if weights.lambda1 > 0.0 {
        let mut candidates = proposals.trajectories.clone();
        candidates.extend(reference_candidates(scenario, spec)?);
        let raw = scorer_forward(&mut tape, &candidates, scenario, &model.scorer)?;
        let ls = scorer_loss(&mut tape, raw, &targets_for(&candidates, scenario))?;
        l_scorer_value = tape.value(ls).item();
        let ls = tape.scale(ls, weights.lambda1);
        loss = tape.add(loss, ls)?;
    }
    let total = tape.value(loss).item();
    let scaled = tape.scale(loss, 1.0 / batch as f64);
    let grads = if with_grads { Some(tape.backward(scaled)?) } else { None };
    Ok(SampleResult {
        grads,
        metrics: StepMetrics {
            loss_total: total,
            loss_traj: tape.value(l_traj).item(),
            loss_scorer: l_scorer_value,
            min_ade,
            ..StepMetrics::default()
        },
    })
}

/// A Stage II training sample: the scenario with its frozen proposals.
#[derive(Debug, Clone)]
pub struct Stage2Sample<'a> {
    pub scenario: &'a Scenario,
    pub proposals: ProposalSet,
}

/// Shared Stage II settings.
pub struct Stage2Context<'a> {
    pub model: &'a ModelConfig,
    pub spec: RolloutSpec,
    pub schedule: &'a NoiseSchedule,
    pub weights: LossWeights,
    pub seed: u64,
}

fn stage2_sample(
    sample: &Stage2Sample,
    store: &ParamStore,
    cx: &Stage2Context,
    rng: &mut ChaCha8Rng,
    batch: usize,
    with_grads: bool,
) -> Result<SampleResult> {
    let scenario = sample.scenario;
    let flow_cfg = &cx.model.flow;
    let w = &cx.weights;
    let ego = &scenario.ego_init;
    let horizon = scenario.expert.len();
    let k_star = wta_assign(&sample.proposals.trajectories, &scenario.expert);
    let proposal = &sample.proposals.trajectories[k_star];
    let ctx = FlowContext::new(scenario, flow_cfg.conditioning_source);
    let prop_local = predictor_proposal(proposal, ego, flow_cfg);

    let t = sample_timestep(rng, cx.schedule.n_train_steps);
    let eps = normal_array(horizon, 2, rng);
    let z_start = normal_array(horizon, 2, rng);
    let cand_seed: u64 = rng.gen();

    let mut tape = Tape::new(store);
    let mut metrics = StepMetrics::default();
    let mut loss: Option<Var> = None;
    let mut add = |tape: &mut Tape, l: Var, lambda: f64| -> Result<()> {
        let l = tape.scale(l, lambda);
        loss = Some(match loss {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
        Ok(())
    };

    if w.lambda2 > 0.0 {
        let x0 = diffusion_target(&scenario.expert, proposal, ego, flow_cfg)?;
        let noisy = q_sample(&x0, t, &eps, cx.schedule)?;
        let ex = DiffusionExample {
            z: noisy.z,
            t,
            eps,
            proposal: prop_local.clone(),
            ctx: ctx.clone(),
        };
        let l = loss_diff(&mut tape, std::slice::from_ref(&ex), flow_cfg)?;
        metrics.loss_diff = tape.value(l).item();
        add(&mut tape, l, w.lambda2)?;
    }
    if w.lambda3 > 0.0 {
        let x0 = ddim_on_tape(
            &mut tape,
            &z_start,
            &prop_local,
            &ctx,
            cx.schedule,
            flow_cfg.inference_steps,
            flow_cfg,
        )?;
        let meters = tape.scale(x0, flow_cfg.data_scale());
        // Ego-frame refined waypoints versus the ego-frame expert.
        let base = match flow_cfg.space {
            Space::Residual => prop_local.clone(),
            Space::Trajectory => Array::zeros(horizon, 2),
        };
        let base = tape.constant(base);
        let refined = tape.add(base, meters)?;
        let expert = local_waypoints(&scenario.expert, ego);
        let expert = tape.constant(Array::new(horizon, 2, expert.into_data())?);
        let l = layers::mse(&mut tape, refined, expert)?;
        metrics.loss_traj = tape.value(l).item();
        add(&mut tape, l, w.lambda3)?;
    }
    let k = sample.proposals.len();
    let noise: Vec<Array> = (0..k).map(|i| initial_noise(cand_seed, scenario.seed, i, horizon)).collect();
    let refined = ddim_refine_batch(
        &sample.proposals.trajectories,
        &noise,
        &ctx,
        store,
        cx.schedule,
        flow_cfg.inference_steps,
        flow_cfg,
    )?;
    metrics.min_ade = min_ade(&refined, &scenario.expert)?;
    if w.lambda4 > 0.0 {
        let mut candidates = refined;
        candidates.extend(reference_candidates(scenario, &cx.spec)?);
        let raw = scorer_forward(&mut tape, &candidates, scenario, &cx.model.scorer)?;
        let l = scorer_loss(&mut tape, raw, &targets_for(&candidates, scenario))?;
        metrics.loss_scorer = tape.value(l).item();
        add(&mut tape, l, w.lambda4)?;
    }
    let Some(loss) = loss else {
        return Ok(SampleResult {
            grads: with_grads.then(Gradients::default),
            metrics,
        });
    };
    metrics.loss_total = tape.value(loss).item();
    let scaled = tape.scale(loss, 1.0 / batch as f64);
    let grads = if with_grads { Some(tape.backward(scaled)?) } else { None };
    Ok(SampleResult { grads, metrics })
}

fn reduce(results: Vec<Result<SampleResult>>, step: usize) -> Result<(Option<Gradients>, StepMetrics)> {
    let n = results.len() as f64;
    let mut grads: Option<Gradients> = None;
    let mut m = StepMetrics::default();
    for r in results {
        let r = r?;
        if !r.metrics.loss_total.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("loss {}", r.metrics.loss_total),
            });
        }
        m.loss_total += r.metrics.loss_total / n;
        m.loss_traj += r.metrics.loss_traj / n;
        m.loss_diff += r.metrics.loss_diff / n;
        m.loss_scorer += r.metrics.loss_scorer / n;
        m.min_ade += r.metrics.min_ade / n;
        if let Some(g) = r.grads {
            grads = Some(match grads {
                Some(acc) => acc.merge(&g),
                None => g,
            });
        }
    }
    Ok((grads, m))
}

fn apply_update(
    store: &mut ParamStore,
    grads: Option<Gradients>,
    lr: f64,
    config: &TrainConfig,
    step: usize,
) -> Result<()> {
    store.zero_grads();
    if let Some(g) = grads {
        store.accumulate(&g)?;
    }
    let norm = store.clip_grad_norm(config.grad_clip);
    if !norm.is_finite() {
        return Err(Error::Diverged {
            step,
            what: format!("gradient norm {norm}"),
        });
    }
    if lr > 0.0 {
        store.adamw_step(&config.optimizer(lr))?;
    }
    store.zero_grads();
    Ok(())
}

/// Stage I loss without an update, for diagnostics and tests.
pub fn stage1_loss(batch: &[&Scenario], store: &ParamStore, model: &ModelConfig, spec: &RolloutSpec, weights: &LossWeights) -> Result<StepMetrics> {
    let results = batch
        .iter()
        .map(|s| stage1_sample(s, store, model, spec, weights, batch.len(), false))
        .collect();
    Ok(reduce(results, 0)?.1)
}

/// Forward, composite loss, backward and one AdamW update at `lr`.
pub fn stage1_step(
    batch: &[&Scenario],
    store: &mut ParamStore,
    model: &ModelConfig,
    spec: &RolloutSpec,
    config: &TrainConfig,
    lr: f64,
    step: usize,
) -> Result<StepMetrics> {
    let b = batch.len();
    let results: Vec<_> = {
        let s: &ParamStore = store;
        batch
            .par_iter()
            .map(|sc| stage1_sample(sc, s, model, spec, &config.weights, b, true))
            .collect()
    };
    let (grads, mut m) = reduce(results, step)?;
    apply_update(store, grads, lr, config, step)?;
    m.lr = lr;
    Ok(m)
}

/// Stage II loss without an update. RNG draws follow `(epoch, step)` exactly
/// as in [`stage2_step`].
pub fn stage2_loss(
    batch: &[Stage2Sample],
    store: &ParamStore,
    cx: &Stage2Context,
    epoch: usize,
    step: usize,
) -> Result<StepMetrics> {
    let results = batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = sample_rng(cx.seed, 2, epoch, step, i);
            stage2_sample(s, store, cx, &mut rng, batch.len(), false)
        })
        .collect();
    Ok(reduce(results, step)?.1)
}

pub fn stage2_step(
    batch: &[Stage2Sample],
    store: &mut ParamStore,
    cx: &Stage2Context,
    config: &TrainConfig,
    lr: f64,
    epoch: usize,
    step: usize,
) -> Result<StepMetrics> {
    let b = batch.len();
    let results: Vec<_> = {
        let s: &ParamStore = store;
        batch
            .par_iter()
            .enumerate()
            .map(|(i, sample)| {
                let mut rng = sample_rng(cx.seed, 2, epoch, step, i);
                stage2_sample(sample, s, cx, &mut rng, b, true)
            })
            .collect()
    };
    let (grads, mut m) = reduce(results, step)?;
    apply_update(store, grads, lr, config, step)?;
    m.lr = lr;
    Ok(m)
}

pub const LOG_HEADER: &str = "stage,epoch,step,lr,loss_total,loss_traj,loss_diff,loss_scorer,min_ade_train";

/// Appends one row to the training log, writing the header on first use.
pub fn append_log(path: &Path, stage: u8, epoch: usize, step: usize, m: &StepMetrics) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    if fresh {
        line.push_str(LOG_HEADER);
        line.push('\n');
    }
    line.push_str(&format!(
        "{stage},{epoch},{step},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        m.lr, m.loss_total, m.loss_traj, m.loss_diff, m.loss_scorer, m.min_ade
    ));
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Per-epoch callback: `(epoch, store)`; used to write checkpoints.
pub type EpochHook<'a> = dyn FnMut(usize, &ParamStore) -> Result<()> + 'a;

fn batches(n: usize, batch_size: usize, seed: u64, stage: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = sample_rng(seed, stage, epoch, usize::MAX, 0);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn total_steps(n: usize, batch_size: usize, epochs: usize) -> usize {
    n.div_ceil(batch_size) * epochs
}

/// Runs Stage I over `data`. The chain and scorer train; the refiner is frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_stage1(
    data: &[Scenario],
    store: &mut ParamStore,
    model: &ModelConfig,
    spec: &RolloutSpec,
    config: &TrainConfig,
    seed: u64,
    log: Option<&Path>,
    on_epoch: &mut EpochHook,
) -> Result<StepMetrics> {
    config.validate()?;
    store.set_trainable("", true);
    store.set_trainable(crate::flow::PREFIX, false);
    let total = total_steps(data.len(), config.batch_size, config.epochs_stage1);
    let mut step = 0;
    let mut last = StepMetrics::default();
    for epoch in 0..config.epochs_stage1 {
        for idx in batches(data.len(), config.batch_size, seed, 1, epoch) {
            let batch: Vec<&Scenario> = idx.iter().map(|&i| &data[i]).collect();
            let lr = lr_at(step + 1, total, config)?;
            last = stage1_step(&batch, store, model, spec, config, lr, step)?;
            if let Some(p) = log {
                append_log(p, 1, epoch, step, &last)?;
            }
            step += 1;
        }
        on_epoch(epoch, store)?;
    }
    Ok(last)
}

/// Rolls the frozen chain once over every training scenario.
pub fn precompute_proposals(
    data: &[Scenario],
    store: &ParamStore,
    model: &ModelConfig,
    spec: &RolloutSpec,
) -> Result<Vec<ProposalSet>> {
    data.par_iter()
        .map(|s| crate::chain::rollout_modes(s, store, &model.chain, spec))
        .collect()
}

/// Runs Stage II: chain frozen, refiner and scorer trainable.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    data: &[Scenario],
    store: &mut ParamStore,
    cx: &Stage2Context,
    config: &TrainConfig,
    log: Option<&Path>,
    on_epoch: &mut EpochHook,
) -> Result<StepMetrics> {
    config.validate()?;
    store.set_trainable("", true);
    store.set_trainable(crate::chain::PREFIX, false);
    let proposals = precompute_proposals(data, store, cx.model, &cx.spec)?;
    let samples: Vec<Stage2Sample> = data
        .iter()
        .zip(proposals)
        .map(|(scenario, proposals)| Stage2Sample { scenario, proposals })
        .collect();
    let total = total_steps(data.len(), config.batch_size, config.epochs_stage2);
    let mut step = 0;
    let mut last = StepMetrics::default();
    for epoch in 0..config.epochs_stage2 {
        for idx in batches(data.len(), config.batch_size, cx.seed, 2, epoch) {
            let batch: Vec<Stage2Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
            let lr = lr_at(step + 1, total, config)?;
            last = stage2_step(&batch, store, cx, config, lr, epoch, step)?;
            if let Some(p) = log {
                append_log(p, 2, epoch, step, &last)?;
            }
            step += 1;
        }
        on_epoch(epoch, store)?;
    }
    Ok(last)
}
