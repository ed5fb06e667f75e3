//! Driving metrics and dataset-level evaluation.

pub mod metrics;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::chain::RolloutSpec;
use crate::error::Result;
use crate::flow::NoiseSchedule;
use crate::kinematics::Trajectory;
use crate::pipeline::{plan_scenario, ModelConfig};
use crate::scenario::{Maneuver, Scenario};
use crate::tensor::ParamStore;
use metrics::{sub_scores, SubScores};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRow {
    pub id: String,
    pub maneuver: Maneuver,
    /// Index of the selected candidate, if a selector was involved.
    pub selected: Option<usize>,
    pub scores: SubScores,
    pub pdms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub arm: String,
    pub rows: Vec<ScenarioRow>,
}

/// Dataset means of every sub-score and of the aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Means {
    pub pdms: f64,
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub comfort: f64,
}

impl MetricReport {
    pub fn means(&self) -> Means {
        Self::means_of(self.rows.iter())
    }

    /// Means over the rows whose maneuver satisfies `keep`.
    pub fn means_where(&self, keep: impl Fn(Maneuver) -> bool) -> Means {
        Self::means_of(self.rows.iter().filter(|r| keep(r.maneuver)))
    }

    fn means_of<'a>(rows: impl Iterator<Item = &'a ScenarioRow>) -> Means {
        let mut m = Means {
            pdms: 0.0,
            nc: 0.0,
            dac: 0.0,
            ep: 0.0,
            ttc: 0.0,
            comfort: 0.0,
        };
        let mut n = 0usize;
        for r in rows {
            m.pdms += r.pdms;
            m.nc += r.scores.nc;
            m.dac += r.scores.dac;
            m.ep += r.scores.ep;
            m.ttc += r.scores.ttc;
            m.comfort += r.scores.comfort;
            n += 1;
        }
        if n > 0 {
            let k = n as f64;
            for v in [&mut m.pdms, &mut m.nc, &mut m.dac, &mut m.ep, &mut m.ttc, &mut m.comfort] {
                *v /= k;
            }
        }
        m
    }

    /// One row per scenario followed by a `mean` footer row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario_id,maneuver,selected,nc,dac,ep,ttc,comfort,pdms\n");
        for r in &self.rows {
            let sel = r.selected.map_or(String::new(), |s| s.to_string());
            let s = &r.scores;
            let _ = writeln!(
                out,
                "{},{},{sel},{:.0},{:.0},{:.6},{:.6},{:.0},{:.6}",
                r.id,
                serde_json::to_value(r.maneuver).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                s.nc,
                s.dac,
                s.ep,
                s.ttc,
                s.comfort,
                r.pdms
            );
        }
        let m = self.means();
        let _ = writeln!(
            out,
            "mean,,,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.nc, m.dac, m.ep, m.ttc, m.comfort, m.pdms
        );
        out
    }
}

/// Table with columns PDMS, NC, DAC, EP, TTC, Comf. (all x100).
pub fn summary_table(reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.arm.len()).max().unwrap_or(3).max(3);
    let mut out = format!(
        "{:<width$} | {:>6} | {:>6} | {:>6} | {:>6} | {:>6} | {:>6}\n",
        "arm", "PDMS", "NC", "DAC", "EP", "TTC", "Comf."
    );
    out.push_str(&format!("{}\n", "-".repeat(width + 6 * 9)));
    for r in reports {
        let m = r.means();
        let _ = writeln!(
            out,
            "{:<width$} | {:>6.2} | {:>6.2} | {:>6.2} | {:>6.2} | {:>6.2} | {:>6.2}",
            r.arm,
            100.0 * m.pdms,
            100.0 * m.nc,
            100.0 * m.dac,
            100.0 * m.ep,
            100.0 * m.ttc,
            100.0 * m.comfort
        );
    }
    out
}

/// Scores the trajectory produced by `planner` on every scenario. Scenarios
/// run in parallel; rows keep dataset order.
pub fn evaluate_with<F>(data: &[Scenario], arm: &str, planner: F) -> Result<MetricReport>
where
    F: Fn(&Scenario) -> Result<(Trajectory, Option<usize>)> + Sync,
{
    let rows = data
        .par_iter()
        .map(|s| {
            let (traj, selected) = planner(s)?;
            let scores = sub_scores(&traj, s);
            Ok(ScenarioRow {
                id: s.id.clone(),
                maneuver: s.maneuver,
                selected,
                pdms: scores.pdms(),
                scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        arm: arm.to_string(),
        rows,
    })
}

/// The expert itself as the planner.
pub fn evaluate_expert(data: &[Scenario]) -> Result<MetricReport> {
    evaluate_with(data, "expert", |s| Ok((s.expert.clone(), None)))
}

/// Settings of one evaluated pipeline arm.
pub struct PipelineArm<'a> {
    pub name: &'a str,
    pub store: &'a ParamStore,
    pub model: &'a ModelConfig,
    /// `false` scores the raw proposals.
    pub refine: bool,
}

/// Chain rollout, optional refinement, scorer selection and metrics on the
/// selected trajectory, for every scenario.
pub fn evaluate_pipeline(
    data: &[Scenario],
    arm: &PipelineArm,
    spec: &RolloutSpec,
    schedule: &NoiseSchedule,
    n_steps: usize,
    seed: u64,
) -> Result<MetricReport> {
    evaluate_with(data, arm.name, |s| {
        let plan = plan_scenario(s, arm.store, arm.model, spec, schedule, n_steps, arm.refine, seed)?;
        Ok((plan.trajectory, Some(plan.selected)))
    })
}

/// Two candidates for one scenario, exactly one of which collides.
#[derive(Debug, Clone)]
pub struct CollisionPair {
    pub scenario: usize,
    pub candidates: [Trajectory; 2],
    pub colliding: usize,
}

/// Builds up to `n` pairs from `data`: the expert against an
/// obstacle-seeking trajectory, in seeded random order.
pub fn collision_pairs(data: &[Scenario], spec: &RolloutSpec, n: usize, seed: u64) -> Result<Vec<CollisionPair>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (i, s) in data.iter().enumerate() {
        if out.len() == n {
            break;
        }
        let Some(bad) = crate::pipeline::obstacle_seeking(s, spec)? else {
            continue;
        };
        if metrics::no_collision(&s.expert, s) != 1.0 {
            continue;
        }
        let colliding = usize::from(rng.gen::<bool>());
        let candidates = if colliding == 0 {
            [bad, s.expert.clone()]
        } else {
            [s.expert.clone(), bad]
        };
        out.push(CollisionPair {
            scenario: i,
            candidates,
            colliding,
        });
    }
    Ok(out)
}

/// Fraction of pairs where the scorer selects the collision-free candidate.
pub fn pair_accuracy(
    pairs: &[CollisionPair],
    data: &[Scenario],
    store: &ParamStore,
    config: &crate::scorer::ScorerConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let hits = pairs
        .par_iter()
        .map(|p| {
            let scores = crate::scorer::score_candidates(&p.candidates, &data[p.scenario], store, config)?;
            Ok(usize::from(crate::scorer::select_best(&scores) != p.colliding))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / pairs.len() as f64)
}
