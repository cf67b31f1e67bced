//! Run configuration: one TOML document drives training, the grid oracle,
//! simulation and heatmaps.
//!
//! Every section has documented defaults, so a file holding only
//! `seeds = [...]` is valid. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{default_z_max, Limits, LineSystem, SwarmSystem};
use crate::error::{Error, Result};
use crate::grid::{SolveOptions, DEFAULT_MEMORY_CAP};
use crate::io::write_atomic;
use crate::nn::AdamConfig;
use crate::policy::PolicyConfig;
use crate::safety::SafetyProblem;
use crate::sim::{NeighbourStrategy, ScenarioConfig};
use crate::train::{CurriculumConfig, TrainOptions};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    pub limits: Limits,
    pub r: f64,
    pub r_obs: f64,
    pub n_neighbours: usize,
    /// Value-function horizon `T`.
    pub horizon: f64,
    /// Budget range; `None` uses `(n + 1) * diagonal * (1 + T)`.
    pub z_max: Option<f64>,
    /// Probability of drawing a padding slot during collocation sampling.
    pub virtual_slot_prob: f64,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            limits: Limits::default(),
            r: 0.1,
            r_obs: 0.5,
            n_neighbours: 2,
            horizon: 0.2,
            z_max: None,
            virtual_slot_prob: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub hidden: Vec<usize>,
    pub omega0: f64,
    pub init_seed: u64,
    pub adam: AdamConfig,
    pub curriculum: CurriculumConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            omega0: 30.0,
            init_seed: 0,
            adam: AdamConfig::default(),
            curriculum: CurriculumConfig::default(),
        }
    }
}

impl TrainingSection {
    pub fn options(&self, checkpoint_path: Option<PathBuf>) -> TrainOptions {
        TrainOptions {
            curriculum: self.curriculum.clone(),
            adam: self.adam,
            checkpoint_path,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Nodes per axis of the 4D relative safety grid.
    pub vi_points: usize,
    /// Nodes per axis of the 1D-instance epigraph grid.
    pub epigraph_points: usize,
    pub cfl_fraction: f64,
    pub stored_slices: usize,
    pub memory_cap: u64,
    /// Sign agreement and error are restricted to `|V_grid| > margin`.
    pub margin: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            vi_points: 41,
            epigraph_points: 81,
            cfl_fraction: 0.9,
            stored_slices: 4,
            memory_cap: DEFAULT_MEMORY_CAP,
            margin: 0.05,
        }
    }
}

impl GridSection {
    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            cfl_fraction: self.cfl_fraction,
            stored_slices: self.stored_slices,
            memory_cap: self.memory_cap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub n_agents: usize,
    pub sim_time: f64,
    pub dt: f64,
    pub replan_interval: f64,
    pub substeps: usize,
    /// `None` uses `2 r + 0.05`.
    pub min_separation: Option<f64>,
    pub packing_budget: usize,
    pub strategy: NeighbourStrategy,
    pub scenarios_per_seed: usize,
    pub policy: PolicyConfig,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let s = ScenarioConfig::default();
        Self {
            n_agents: s.n_agents,
            sim_time: s.sim_time,
            dt: s.dt,
            replan_interval: s.replan_interval,
            substeps: s.substeps,
            min_separation: None,
            packing_budget: s.packing_budget,
            strategy: s.strategy,
            scenarios_per_seed: 20,
            policy: PolicyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub problem: ProblemSection,
    pub epigraph: TrainingSection,
    pub safety: TrainingSection,
    pub line: LineSystem,
    pub line_horizon: f64,
    pub line_training: TrainingSection,
    pub grid: GridSection,
    pub simulation: SimulationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            problem: ProblemSection::default(),
            epigraph: TrainingSection::default(),
            safety: TrainingSection::default(),
            line: LineSystem::default(),
            line_horizon: 0.5,
            line_training: TrainingSection::default(),
            grid: GridSection::default(),
            simulation: SimulationSection::default(),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{key} must be positive, got {v}")))
    }
}

impl TrainingSection {
    fn validate(&self, name: &str) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Validation(format!("{name}.hidden must list non-zero layer widths")));
        }
        positive(&format!("{name}.omega0"), self.omega0)?;
        positive(&format!("{name}.adam.lr"), self.adam.lr)?;
        self.curriculum
            .validate()
            .map_err(|e| Error::Validation(format!("{name}.curriculum: {e}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Validation("seeds must not be empty".into()));
        }
        let p = &self.problem;
        positive("problem.limits.half_width", p.limits.half_width)?;
        positive("problem.limits.v_max", p.limits.v_max)?;
        positive("problem.limits.a_max", p.limits.a_max)?;
        positive("problem.r", p.r)?;
        positive("problem.r_obs", p.r_obs)?;
        positive("problem.horizon", p.horizon)?;
        if let Some(z) = p.z_max {
            positive("problem.z_max", z)?;
        }
        if !(0.0..1.0).contains(&p.virtual_slot_prob) {
            return Err(Error::Validation(format!(
                "problem.virtual_slot_prob must lie in [0, 1), got {}",
                p.virtual_slot_prob
            )));
        }
        self.epigraph.validate("epigraph")?;
        self.safety.validate("safety")?;
        self.line_training.validate("line_training")?;
        positive("line_horizon", self.line_horizon)?;
        for (k, v) in [
            ("line.x_half", self.line.x_half),
            ("line.v_max", self.line.v_max),
            ("line.a_max", self.line.a_max),
            ("line.z_max", self.line.z_max),
        ] {
            positive(k, v)?;
        }
        if self.grid.vi_points < 3 || self.grid.epigraph_points < 3 {
            return Err(Error::Validation("grid point counts must be at least 3".into()));
        }
        if !(self.grid.cfl_fraction > 0.0 && self.grid.cfl_fraction <= 1.0) {
            return Err(Error::Validation(format!(
                "grid.cfl_fraction must lie in (0, 1], got {}",
                self.grid.cfl_fraction
            )));
        }
        positive("grid.margin", self.grid.margin)?;
        if self.simulation.scenarios_per_seed == 0 {
            return Err(Error::Validation("simulation.scenarios_per_seed must be at least 1".into()));
        }
        self.scenario_config(self.simulation.n_agents, self.simulation.strategy)
            .validate()
            .map_err(|e| Error::Validation(format!("simulation: {e}")))?;
        self.safety_problem().validate()
    }

    pub fn z_max(&self) -> f64 {
        self.problem
            .z_max
            .unwrap_or_else(|| default_z_max(&self.problem.limits, self.problem.n_neighbours, self.problem.horizon))
    }

    pub fn swarm_system(&self) -> SwarmSystem {
        let p = &self.problem;
        let mut s = SwarmSystem::new(p.limits, p.r, p.n_neighbours, p.horizon);
        s.z_max = self.z_max();
        s.virtual_slot_prob = p.virtual_slot_prob;
        s
    }

    pub fn safety_problem(&self) -> SafetyProblem {
        let p = &self.problem;
        SafetyProblem::new(p.r, p.limits.a_max, p.horizon, p.r_obs, p.limits.v_max)
    }

    pub fn scenario_config(&self, n_agents: usize, strategy: NeighbourStrategy) -> ScenarioConfig {
        let s = &self.simulation;
        ScenarioConfig {
            n_agents,
            limits: self.problem.limits,
            n_neighbours: self.problem.n_neighbours,
            r: self.problem.r,
            r_obs: self.problem.r_obs,
            sim_time: s.sim_time,
            dt: s.dt,
            replan_interval: s.replan_interval,
            substeps: s.substeps,
            min_separation: s.min_separation.unwrap_or(2.0 * self.problem.r + 0.05),
            packing_budget: s.packing_budget,
            strategy,
            seed: self.seeds[0],
            policy: s.policy.clone(),
        }
    }

    /// Parse and validate a TOML document. Parse errors carry the line.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            match line {
                Some(l) => Error::Config(format!("line {l}: {}", e.message())),
                None => Error::Config(e.message().to_string()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(format!("config file {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml()?.as_bytes())
    }
}
