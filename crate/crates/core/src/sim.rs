//! Scenario generation, neighbour selection, simultaneous world stepping,
//! collision detection and batch metrics.
//!
//! Trajectory logs hold one row per agent per control step (state at the
//! start of the step, the control held during it) plus one terminal row per
//! agent at `step = n_steps` with zero control and empty decision columns.
//! `min_pair_dist` is the smallest distance from that agent to any other
//! agent over the RK4 substep boundaries of the step, start included.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{agent_derivative, order_free_sum, rk4_step, AgentState, ControlInput, GoalSpec, Limits, NeighbourSlot, WorldState};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic};
use crate::policy::{receding_step, Models, PolicyConfig, PolicyDecision};
use crate::safety::pair_risk;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighbourStrategy {
    /// Lowest pair-risk safety value first.
    Value,
    /// Smallest Euclidean distance first.
    Nearest,
    /// Uniformly random among candidates in range.
    Random,
}

impl NeighbourStrategy {
    pub fn name(self) -> &'static str {
        match self {
            NeighbourStrategy::Value => "value",
            NeighbourStrategy::Nearest => "nearest",
            NeighbourStrategy::Random => "random",
        }
    }
}

impl std::str::FromStr for NeighbourStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value" => Ok(Self::Value),
            "nearest" => Ok(Self::Nearest),
            "random" => Ok(Self::Random),
            other => Err(Error::Validation(format!(
                "unknown neighbour strategy '{other}' (expected value, nearest or random)"
            ))),
        }
    }
}

/// Everything neighbour selection needs besides the world and the models.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionContext {
    pub strategy: NeighbourStrategy,
    pub r_obs: f64,
    /// Scenario seed; only the random strategy uses it.
    pub seed: u64,
    pub step: usize,
}

/// splitmix64 finaliser folded over `parts`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Sort `(agent, key)` pairs by key, ties by agent index, and take the first
/// `n`, padding with [`NeighbourSlot::Pad`].
pub fn rank_neighbours(mut scored: Vec<(usize, f64)>, n: usize) -> Vec<NeighbourSlot> {
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<NeighbourSlot> = scored.iter().take(n).map(|&(j, _)| NeighbourSlot::Agent(j)).collect();
    out.resize(n, NeighbourSlot::Pad);
    out
}

/// Neighbour slots of agent `ego`: candidates within `r_obs`, ranked by the
/// configured strategy.
pub fn select_neighbours(
    world: &WorldState,
    ego: usize,
    models: &Models,
    t: f64,
    ctx: &SelectionContext,
) -> Result<Vec<NeighbourSlot>> {
    if ego >= world.len() {
        return Err(Error::Validation(format!("ego index {ego} out of range for {} agents", world.len())));
    }
    let n = models.system.n_neighbours;
    let me = world.agents[ego];
    let candidates: Vec<usize> = (0..world.len())
        .filter(|&j| j != ego && me.distance_to(&world.agents[j]) <= ctx.r_obs)
        .collect();
    let scored = match ctx.strategy {
        NeighbourStrategy::Value => candidates
            .iter()
            .map(|&j| Ok((j, pair_risk(&models.safety, &models.safety_problem, &me, &world.agents[j], t)?)))
            .collect::<Result<Vec<_>>>()?,
        NeighbourStrategy::Nearest => candidates.iter().map(|&j| (j, me.distance_to(&world.agents[j]))).collect(),
        NeighbourStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[ctx.seed, ctx.step as u64, ego as u64]));
            let mut shuffled = candidates.clone();
            shuffled.shuffle(&mut rng);
            shuffled.into_iter().enumerate().map(|(rank, j)| (j, rank as f64)).collect()
        }
    };
    Ok(rank_neighbours(scored, n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_agents: usize,
    pub limits: Limits,
    pub n_neighbours: usize,
    pub r: f64,
    pub r_obs: f64,
    pub sim_time: f64,
    pub dt: f64,
    pub replan_interval: f64,
    /// RK4 substeps per control step; collisions are checked at each boundary.
    pub substeps: usize,
    pub min_separation: f64,
    /// Rejection-sampling draws per agent before giving up.
    pub packing_budget: usize,
    pub strategy: NeighbourStrategy,
    pub seed: u64,
    pub policy: PolicyConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_agents: 3,
            limits: Limits::default(),
            n_neighbours: 2,
            r: 0.1,
            r_obs: 0.5,
            sim_time: 1.5,
            dt: 0.02,
            replan_interval: 0.02,
            substeps: 4,
            min_separation: 0.25,
            packing_budget: 10_000,
            strategy: NeighbourStrategy::Value,
            seed: 0,
            policy: PolicyConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_agents == 0 {
            return bad("n_agents must be at least 1".into());
        }
        for (name, v) in [
            ("r", self.r),
            ("r_obs", self.r_obs),
            ("sim_time", self.sim_time),
            ("dt", self.dt),
            ("replan_interval", self.replan_interval),
            ("limits.half_width", self.limits.half_width),
            ("limits.v_max", self.limits.v_max),
            ("limits.a_max", self.limits.a_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.r < self.min_separation) {
            return bad(format!(
                "min_separation ({}) must exceed the collision radius ({})",
                self.min_separation, self.r
            ));
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1".into());
        }
        let ratio = self.replan_interval / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return bad(format!(
                "replan_interval ({}) must be a positive multiple of dt ({})",
                self.replan_interval, self.dt
            ));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.sim_time / self.dt).round() as usize
    }

    pub fn replan_every(&self) -> usize {
        (self.replan_interval / self.dt).round() as usize
    }
}

/// Uniform positions with pairwise separation, zero velocities, separated
/// uniform goals.
pub fn generate_scenario(cfg: &ScenarioConfig, rng: &mut impl Rng) -> Result<WorldState> {
    let w = cfg.limits.half_width;
    let place = |rng: &mut dyn rand::RngCore| -> Result<Vec<(f64, f64)>> {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(cfg.n_agents);
        for _ in 0..cfg.n_agents {
            let mut found = None;
            for _ in 0..cfg.packing_budget {
                let p = (rng.gen_range(-w..=w), rng.gen_range(-w..=w));
                if pts.iter().all(|q| (p.0 - q.0).hypot(p.1 - q.1) >= cfg.min_separation) {
                    found = Some(p);
                    break;
                }
            }
            match found {
                Some(p) => pts.push(p),
                None => {
                    return Err(Error::Packing {
                        placed: pts.len(),
                        requested: cfg.n_agents,
                    })
                }
            }
        }
        Ok(pts)
    };
    let starts = place(rng)?;
    let goals = place(rng)?;
    WorldState::new(
        starts.iter().map(|&(x, y)| AgentState::new(x, y, 0.0, 0.0)).collect(),
        goals.iter().map(|&(x, y)| GoalSpec::new(x, y)).collect(),
    )
}

/// Per-agent distance to the nearest other agent; infinite for a lone agent.
pub fn min_distances(agents: &[AgentState]) -> Vec<f64> {
    let mut out = vec![f64::INFINITY; agents.len()];
    for i in 0..agents.len() {
        for j in (i + 1)..agents.len() {
            let d = agents[i].distance_to(&agents[j]);
            out[i] = out[i].min(d);
            out[j] = out[j].min(d);
        }
    }
    out
}

/// Agents that come within `r` (inclusive) of another agent in any snapshot.
pub fn detect_collisions(snapshots: &[Vec<AgentState>], r: f64) -> Vec<bool> {
    let n = snapshots.first().map_or(0, |s| s.len());
    let mut flags = vec![false; n];
    for snap in snapshots {
        for (f, d) in flags.iter_mut().zip(min_distances(snap)) {
            *f |= d <= r;
        }
    }
    flags
}

/// Decisions of every agent from the same frozen world, computed in `order`
/// and returned indexed by agent.
pub fn decide_agents(
    world: &WorldState,
    models: &Models,
    cfg: &ScenarioConfig,
    seed: u64,
    step: usize,
    order: &[usize],
) -> Result<Vec<PolicyDecision>> {
    let ctx = SelectionContext {
        strategy: cfg.strategy,
        r_obs: cfg.r_obs,
        seed,
        step,
    };
    let mut slots: Vec<Option<PolicyDecision>> = vec![None; world.len()];
    for &i in order {
        slots[i] = Some(receding_step(world, i, models, &cfg.policy, &ctx)?);
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.ok_or_else(|| Error::Validation(format!("agent {i} missing from processing order"))))
        .collect()
}

/// Result of integrating the world over one control step.
#[derive(Clone, Debug, PartialEq)]
pub struct Integration {
    pub next: WorldState,
    /// Per-agent minimum distance to another agent over substep boundaries.
    pub min_dist: Vec<f64>,
    /// Per-agent flag: velocity clamped after integration.
    pub clamped: Vec<bool>,
}

/// Hold `controls` for one `dt` with `substeps` RK4 substeps, then clamp
/// velocities to the box.
pub fn integrate(world: &WorldState, controls: &[ControlInput], cfg: &ScenarioConfig) -> Result<Integration> {
    if controls.len() != world.len() {
        return Err(Error::Validation(format!("{} controls for {} agents", controls.len(), world.len())));
    }
    let h = cfg.dt / cfg.substeps as f64;
    let mut agents = world.agents.clone();
    let mut min_dist = min_distances(&agents);
    for _ in 0..cfg.substeps {
        for (a, u) in agents.iter_mut().zip(controls) {
            let x = rk4_step(|y| agent_derivative(&AgentState::from_array([y[0], y[1], y[2], y[3]]), u).to_vec(), &a.to_array(), h)?;
            *a = AgentState::from_array([x[0], x[1], x[2], x[3]]);
        }
        for (m, d) in min_dist.iter_mut().zip(min_distances(&agents)) {
            *m = m.min(d);
        }
    }
    let mut clamped = Vec::with_capacity(agents.len());
    for a in agents.iter_mut() {
        let (c, was) = cfg.limits.clamp_velocity(*a);
        *a = c;
        clamped.push(was);
    }
    Ok(Integration {
        next: WorldState {
            agents,
            goals: world.goals.clone(),
            time: world.time + cfg.dt,
        },
        min_dist,
        clamped,
    })
}

/// One simultaneous decentralized step: decide from the frozen snapshot,
/// then integrate.
pub fn world_step(
    world: &WorldState,
    models: &Models,
    cfg: &ScenarioConfig,
    seed: u64,
    step: usize,
) -> Result<(Integration, Vec<PolicyDecision>)> {
    let order: Vec<usize> = (0..world.len()).collect();
    let decisions = decide_agents(world, models, cfg, seed, step, &order)?;
    let controls: Vec<ControlInput> = decisions.iter().map(|d| d.control).collect();
    Ok((integrate(world, &controls, cfg)?, decisions))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub time: f64,
    pub states: Vec<AgentState>,
    pub decisions: Vec<PolicyDecision>,
    pub min_dist: Vec<f64>,
    pub clamped: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioResult {
    pub scenario_id: usize,
    pub seed: u64,
    pub dt: f64,
    pub goals: Vec<GoalSpec>,
    pub steps: Vec<StepLog>,
    pub final_world: WorldState,
    pub collided: Vec<bool>,
    /// Per-agent `sum(l dt) + phi(final)` with `l`, `phi` the goal distance.
    pub costs: Vec<f64>,
}

impl ScenarioResult {
    pub fn n_agents(&self) -> usize {
        self.goals.len()
    }

    pub fn safe(&self) -> bool {
        !self.collided.iter().any(|&c| c)
    }

    pub fn clamp_events(&self) -> usize {
        self.steps.iter().map(|s| s.clamped.iter().filter(|&&c| c).count()).sum()
    }
}

/// Left Riemann sum of the goal distance plus the terminal distance.
pub fn trajectory_cost(distances: &[f64], terminal: f64, dt: f64) -> f64 {
    let mut c = 0.0;
    for d in distances {
        c += d * dt;
    }
    c + terminal
}

/// Simulate one scenario drawn from `(cfg, seed)`.
pub fn run_scenario(cfg: &ScenarioConfig, models: &Models, scenario_id: usize, seed: u64) -> Result<ScenarioResult> {
    cfg.validate()?;
    if cfg.n_neighbours != models.system.n_neighbours {
        return Err(Error::Validation(format!(
            "scenario uses {} neighbours, value model was trained with {}",
            cfg.n_neighbours, models.system.n_neighbours
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = generate_scenario(cfg, &mut rng)?;
    let goals = world.goals.clone();
    let n_steps = cfg.n_steps();
    let every = cfg.replan_every();
    let mut steps = Vec::with_capacity(n_steps);
    let mut held: Vec<PolicyDecision> = Vec::new();
    for k in 0..n_steps {
        let (integ, decisions) = if k % every == 0 {
            world_step(&world, models, cfg, seed, k)?
        } else {
            let controls: Vec<ControlInput> = held.iter().map(|d| d.control).collect();
            (integrate(&world, &controls, cfg)?, held.clone())
        };
        held = decisions.clone();
        steps.push(StepLog {
            step: k,
            time: k as f64 * cfg.dt,
            states: world.agents.clone(),
            decisions,
            min_dist: integ.min_dist,
            clamped: integ.clamped,
        });
        world = integ.next;
        world.time = (k + 1) as f64 * cfg.dt;
    }
    let final_dist = min_distances(&world.agents);
    let collided: Vec<bool> = (0..world.len())
        .map(|i| steps.iter().any(|s| s.min_dist[i] <= cfg.r) || final_dist[i] <= cfg.r)
        .collect();
    let costs = (0..world.len())
        .map(|i| {
            let d: Vec<f64> = steps.iter().map(|s| s.states[i].goal_distance(&goals[i])).collect();
            trajectory_cost(&d, world.agents[i].goal_distance(&goals[i]), cfg.dt)
        })
        .collect();
    Ok(ScenarioResult {
        scenario_id,
        seed,
        dt: cfg.dt,
        goals,
        steps,
        final_world: world,
        collided,
        costs,
    })
}

/// Aggregate metrics of a set of scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_scenarios: usize,
    pub n_trajectories: usize,
    pub n_collided: usize,
    pub n_safe_scenarios: usize,
    pub safety_rate: f64,
    pub safe_scenario_rate: f64,
    /// Mean cost over collision-free trajectories; absent when there are none.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cumulative_cost: Option<f64>,
}

/// Per-trajectory view used by [`compute_metrics`]: collision flags and costs.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub collided: Vec<bool>,
    pub costs: Vec<f64>,
}

impl From<&ScenarioResult> for Outcome {
    fn from(r: &ScenarioResult) -> Self {
        Self {
            collided: r.collided.clone(),
            costs: r.costs.clone(),
        }
    }
}

pub fn compute_metrics(outcomes: &[Outcome]) -> Result<Metrics> {
    if outcomes.is_empty() {
        return Err(Error::Validation("cannot compute metrics of an empty batch".into()));
    }
    let mut safe_costs = Vec::new();
    let (mut n_traj, mut n_coll, mut n_safe_sc) = (0, 0, 0);
    for o in outcomes {
        n_traj += o.collided.len();
        let c = o.collided.iter().filter(|&&c| c).count();
        n_coll += c;
        if c == 0 {
            n_safe_sc += 1;
        }
        safe_costs.extend(o.collided.iter().zip(&o.costs).filter(|(c, _)| !**c).map(|(_, &v)| v));
    }
    let n_safe_traj = safe_costs.len();
    Ok(Metrics {
        n_scenarios: outcomes.len(),
        n_trajectories: n_traj,
        n_collided: n_coll,
        n_safe_scenarios: n_safe_sc,
        safety_rate: (n_traj - n_coll) as f64 / n_traj as f64,
        safe_scenario_rate: n_safe_sc as f64 / outcomes.len() as f64,
        cumulative_cost: (n_safe_traj > 0).then(|| order_free_sum(safe_costs) / n_safe_traj as f64),
    })
}

/// Scenarios to run: `scenarios_per_seed` scenarios for each seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub config: ScenarioConfig,
    pub seeds: Vec<u64>,
    pub scenarios_per_seed: usize,
}

impl BatchSpec {
    /// `(scenario_id, seed group, scenario seed)` triples in id order.
    pub fn scenarios(&self) -> Vec<(usize, u64, u64)> {
        let mut out = Vec::new();
        for &s in &self.seeds {
            for k in 0..self.scenarios_per_seed {
                out.push((out.len(), s, derive_seed(&[s, k as u64])));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation; `None` for an empty set.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = order_free_sum(values.to_vec()) / n;
        let var = order_free_sum(values.iter().map(|v| (v - mean) * (v - mean)).collect()) / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFailure {
    pub scenario_id: usize,
    pub category: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub strategy: NeighbourStrategy,
    pub n_agents: usize,
    pub scenarios_per_seed: usize,
    pub overall: Option<Metrics>,
    pub safety_rate: Option<MeanStd>,
    pub safe_scenario_rate: Option<MeanStd>,
    pub cumulative_cost: Option<MeanStd>,
    pub clamp_events: usize,
    pub per_seed: Vec<SeedReport>,
    pub failures: Vec<ScenarioFailure>,
}

impl BatchReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(format!("report serialisation failed: {e}")))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(format!("bad report: {e}")))
    }
}

/// Build the aggregate report from finished scenarios, grouped by seed.
pub fn build_report(spec: &BatchSpec, results: &[ScenarioResult], failures: Vec<ScenarioFailure>) -> Result<BatchReport> {
    let mut per_seed = Vec::new();
    for &s in &spec.seeds {
        let group: Vec<Outcome> = results.iter().filter(|r| r.seed_group(spec) == Some(s)).map(Outcome::from).collect();
        if !group.is_empty() {
            per_seed.push(SeedReport {
                seed: s,
                metrics: compute_metrics(&group)?,
            });
        }
    }
    let all: Vec<Outcome> = results.iter().map(Outcome::from).collect();
    let pick = |f: fn(&Metrics) -> Option<f64>| -> Option<MeanStd> {
        let v: Vec<f64> = per_seed.iter().filter_map(|s| f(&s.metrics)).collect();
        MeanStd::of(&v)
    };
    Ok(BatchReport {
        strategy: spec.config.strategy,
        n_agents: spec.config.n_agents,
        scenarios_per_seed: spec.scenarios_per_seed,
        overall: if all.is_empty() { None } else { Some(compute_metrics(&all)?) },
        safety_rate: pick(|m| Some(m.safety_rate)),
        safe_scenario_rate: pick(|m| Some(m.safe_scenario_rate)),
        cumulative_cost: pick(|m| m.cumulative_cost),
        clamp_events: results.iter().map(|r| r.clamp_events()).sum(),
        per_seed,
        failures,
    })
}

impl ScenarioResult {
    fn seed_group(&self, spec: &BatchSpec) -> Option<u64> {
        spec.scenarios().get(self.scenario_id).map(|s| s.1)
    }
}

pub struct BatchOutcome {
    pub results: Vec<ScenarioResult>,
    pub report: BatchReport,
}

/// Run every scenario of `spec` in parallel; failures are recorded in the
/// report and the batch continues.
pub fn run_batch(spec: &BatchSpec, models: &Models) -> Result<BatchOutcome> {
    spec.config.validate()?;
    let runs: Vec<(usize, Result<ScenarioResult>)> = spec
        .scenarios()
        .into_par_iter()
        .map(|(id, _, seed)| (id, run_scenario(&spec.config, models, id, seed)))
        .collect();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in runs {
        match r {
            Ok(r) => results.push(r),
            Err(e) => {
                log::warn!("scenario {id} failed: {e}");
                failures.push(ScenarioFailure {
                    scenario_id: id,
                    category: e.category().into(),
                    message: e.to_string(),
                });
            }
        }
    }
    let report = build_report(spec, &results, failures)?;
    Ok(BatchOutcome { results, report })
}

fn neighbours_field(n: &[NeighbourSlot]) -> String {
    n.iter()
        .map(|s| match s {
            NeighbourSlot::Agent(j) => j.to_string(),
            NeighbourSlot::Pad => "PAD".into(),
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub const TRAJECTORY_HEADER: [&str; 14] = [
    "scenario_id",
    "step",
    "time",
    "agent_id",
    "px",
    "py",
    "vx",
    "vy",
    "ax",
    "ay",
    "z_star",
    "feasible",
    "selected_neighbours",
    "min_pair_dist",
];

pub fn trajectories_csv(results: &[ScenarioResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRAJECTORY_HEADER)?;
    for r in results {
        for s in &r.steps {
            for (i, (a, d)) in s.states.iter().zip(&s.decisions).enumerate() {
                w.write_record([
                    r.scenario_id.to_string(),
                    s.step.to_string(),
                    fmt_f64(s.time),
                    i.to_string(),
                    fmt_f64(a.px),
                    fmt_f64(a.py),
                    fmt_f64(a.vx),
                    fmt_f64(a.vy),
                    fmt_f64(d.control.ax),
                    fmt_f64(d.control.ay),
                    d.z_star.map(fmt_f64).unwrap_or_default(),
                    (!d.fallback).to_string(),
                    neighbours_field(&d.neighbours),
                    fmt_f64(s.min_dist[i]),
                ])?;
            }
        }
        let end = r.final_world.agents.len();
        let final_dist = min_distances(&r.final_world.agents);
        for i in 0..end {
            let a = r.final_world.agents[i];
            w.write_record([
                r.scenario_id.to_string(),
                r.steps.len().to_string(),
                fmt_f64(r.final_world.time),
                i.to_string(),
                fmt_f64(a.px),
                fmt_f64(a.py),
                fmt_f64(a.vx),
                fmt_f64(a.vy),
                fmt_f64(0.0),
                fmt_f64(0.0),
                String::new(),
                String::new(),
                String::new(),
                fmt_f64(final_dist[i]),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn goals_csv(results: &[ScenarioResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario_id", "agent_id", "gx", "gy"])?;
    for r in results {
        for (i, g) in r.goals.iter().enumerate() {
            w.write_record([r.scenario_id.to_string(), i.to_string(), fmt_f64(g.gx), fmt_f64(g.gy)])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Write `trajectories.csv`, `goals.csv` and `report.toml` into `dir`.
pub fn write_batch(dir: &Path, outcome: &BatchOutcome) -> Result<Vec<std::path::PathBuf>> {
    let paths = [dir.join("trajectories.csv"), dir.join("goals.csv"), dir.join("report.toml")];
    write_atomic(&paths[0], &trajectories_csv(&outcome.results)?)?;
    write_atomic(&paths[1], &goals_csv(&outcome.results)?)?;
    write_atomic(&paths[2], outcome.report.to_toml()?.as_bytes())?;
    Ok(paths.to_vec())
}

/// Recompute per-scenario outcomes from emitted trajectory and goal logs.
pub fn outcomes_from_logs(trajectories: &[u8], goals: &[u8], r: f64, dt: f64) -> Result<Vec<(usize, Outcome)>> {
    use std::collections::BTreeMap;
    let mut goal_map: BTreeMap<(usize, usize), GoalSpec> = BTreeMap::new();
    for rec in csv::Reader::from_reader(goals).records() {
        let rec = rec?;
        let p = |k: usize| -> Result<f64> { rec[k].parse().map_err(|_| Error::Validation(format!("bad number '{}'", &rec[k]))) };
        goal_map.insert((parse_idx(&rec[0])?, parse_idx(&rec[1])?), GoalSpec::new(p(2)?, p(3)?));
    }
    // (scenario, agent) -> (running distances, terminal distance, collided)
    let mut acc: BTreeMap<(usize, usize), (Vec<f64>, f64, bool)> = BTreeMap::new();
    let mut last_step: BTreeMap<usize, usize> = BTreeMap::new();
    let rows: Vec<csv::StringRecord> = csv::Reader::from_reader(trajectories).records().collect::<std::result::Result<_, _>>()?;
    for rec in &rows {
        let sid = parse_idx(&rec[0])?;
        let step = parse_idx(&rec[1])?;
        let e = last_step.entry(sid).or_insert(0);
        *e = (*e).max(step);
    }
    for rec in &rows {
        let p = |k: usize| -> Result<f64> { rec[k].parse().map_err(|_| Error::Validation(format!("bad number '{}'", &rec[k]))) };
        let (sid, step, aid) = (parse_idx(&rec[0])?, parse_idx(&rec[1])?, parse_idx(&rec[3])?);
        let goal = goal_map
            .get(&(sid, aid))
            .ok_or_else(|| Error::Validation(format!("no goal for scenario {sid} agent {aid}")))?;
        let d = AgentState::new(p(4)?, p(5)?, 0.0, 0.0).goal_distance(goal);
        let entry = acc.entry((sid, aid)).or_insert((Vec::new(), 0.0, false));
        if step == last_step[&sid] {
            entry.1 = d;
        } else {
            entry.0.push(d);
        }
        entry.2 |= p(13)? <= r;
    }
    let mut out: BTreeMap<usize, Outcome> = BTreeMap::new();
    for ((sid, _), (running, terminal, collided)) in acc {
        let o = out.entry(sid).or_insert(Outcome {
            collided: Vec::new(),
            costs: Vec::new(),
        });
        o.collided.push(collided);
        o.costs.push(trajectory_cost(&running, terminal, dt));
    }
    Ok(out.into_iter().collect())
}

fn parse_idx(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Validation(format!("bad index '{s}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        use NeighbourSlot::*;
        assert_eq!(rank_neighbours(vec![(1, 0.3), (2, 0.1), (3, 0.5)], 2), vec![Agent(2), Agent(1)]);
        assert_eq!(rank_neighbours(vec![(4, 0.3)], 2), vec![Agent(4), Pad]);
        assert_eq!(rank_neighbours(vec![(5, 0.2), (3, 0.2)], 2), vec![Agent(3), Agent(5)]);
        assert_eq!(rank_neighbours(vec![], 0), vec![]);
    }

    #[test]
    fn scenario_generation_contract() {
        let cfg = ScenarioConfig::default();
        let w = generate_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(w.len(), 3);
        for i in 0..3 {
            assert_eq!((w.agents[i].vx, w.agents[i].vy), (0.0, 0.0));
            assert!(cfg.limits.contains_position(w.agents[i].px, w.agents[i].py));
            for j in (i + 1)..3 {
                assert!(w.agents[i].distance_to(&w.agents[j]) >= 0.25);
            }
        }
        let again = generate_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(w, again);
        let crowded = ScenarioConfig {
            n_agents: 200,
            packing_budget: 500,
            ..cfg
        };
        match generate_scenario(&crowded, &mut ChaCha8Rng::seed_from_u64(5)) {
            Err(Error::Packing { placed, requested }) => assert!(placed < requested && requested == 200),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn collision_examples() {
        let a = |x: f64| AgentState::new(x, 0.0, 0.0, 0.0);
        let far = vec![vec![a(0.0), a(0.5), a(1.0)]];
        assert_eq!(detect_collisions(&far, 0.1), vec![false; 3]);
        let dip = vec![vec![a(0.0), a(0.5), a(1.0)], vec![a(0.0), a(0.09), a(1.0)]];
        assert_eq!(detect_collisions(&dip, 0.1), vec![true, true, false]);
        let touch = vec![vec![a(0.0), a(0.25), a(0.5)]];
        assert_eq!(detect_collisions(&touch, 0.25), vec![true, true, true]);
        assert_eq!(detect_collisions(&[vec![a(0.0)]], 0.1), vec![false]);
    }

    #[test]
    fn metric_examples() {
        let o = |coll: Vec<bool>, c: f64| Outcome {
            costs: vec![c; coll.len()],
            collided: coll,
        };
        let mut v = vec![false; 10];
        v[3] = true;
        let m = compute_metrics(&[o(v, 1.0)]).unwrap();
        assert_eq!(m.safety_rate, 0.9);
        let batch: Vec<Outcome> = (0..5).map(|k| o(vec![k < 2, false], 2.0)).collect();
        let m = compute_metrics(&batch).unwrap();
        assert_eq!(m.safe_scenario_rate, 0.6);
        assert_eq!(m.cumulative_cost, Some(2.0));
        let m = compute_metrics(&[o(vec![true, true], 1.0)]).unwrap();
        assert_eq!(m.cumulative_cost, None);
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn constant_cost_trajectory() {
        // l = 0.5 for 75 steps of 0.02 s, phi = 0.5: 0.5 * 1.5 + 0.5.
        let d = vec![0.5; 75];
        assert!((trajectory_cost(&d, 0.5, 0.02) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn integration_is_exact_for_constant_control() {
        let cfg = ScenarioConfig::default();
        let w = WorldState::new(vec![AgentState::new(0.0, 0.0, 1.0, -0.5)], vec![GoalSpec::new(0.0, 0.0)]).unwrap();
        let out = integrate(&w, &[ControlInput::new(2.0, 1.0)], &cfg).unwrap();
        let a = out.next.agents[0];
        let t = cfg.dt;
        assert!((a.px - (t + t * t)).abs() < 1e-15);
        assert!((a.py - (-0.5 * t + 0.5 * t * t)).abs() < 1e-15);
        assert!((a.vx - (1.0 + 2.0 * t)).abs() < 1e-15);
        assert!(!out.clamped[0]);
        let fast = WorldState::new(vec![AgentState::new(0.0, 0.0, 3.99, 0.0)], vec![GoalSpec::new(0.0, 0.0)]).unwrap();
        let out = integrate(&fast, &[ControlInput::new(4.0, 0.0)], &cfg).unwrap();
        assert_eq!(out.next.agents[0].vx, 4.0);
        assert!(out.clamped[0]);
    }

    #[test]
    fn config_validation() {
        assert!(ScenarioConfig::default().validate().is_ok());
        let c = ScenarioConfig {
            min_separation: 0.05,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ScenarioConfig {
            replan_interval: 0.03,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ScenarioConfig {
            n_agents: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(ScenarioConfig::default().n_steps(), 75);
        assert!("closest".parse::<NeighbourStrategy>().is_err());
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[0.7]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn seeds_are_distinct() {
        let spec = BatchSpec {
            config: ScenarioConfig::default(),
            seeds: vec![0, 1],
            scenarios_per_seed: 3,
        };
        let s = spec.scenarios();
        assert_eq!(s.len(), 6);
        let mut seeds: Vec<u64> = s.iter().map(|x| x.2).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 6);
    }
}
