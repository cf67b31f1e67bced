//! Pipeline stages shared by the command-line driver and the tests.
//!
//! Every stage writes its artifacts atomically into an output directory
//! and records them in `manifest.toml` there.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dynamics::{EpigraphSystem, LineSystem, SwarmSystem};
use crate::epigraph::{train_epigraph, EpigraphProblem};
use crate::error::{Error, Result};
use crate::grid::{compare, compare_points, interior_nodes_where, interpolate, solve, CompareReport, GridField, LineEpigraphProblem, Mode, RelativeViProblem, SampleSpec};
use crate::heatmap::{emit_heatmap, SceneSpec};
use crate::io::write_atomic;
use crate::nn::{aux_value, checkpoint, safety_value_eval, ModelKind, ValueModel};
use crate::policy::{z_search, Models, PolicyConfig, ZSearch};
use crate::safety::{train_safety, RelativeState, SafetyProblem};
use crate::sim::{run_batch, write_batch, BatchReport, BatchSpec, NeighbourStrategy};
use crate::train::{init_model, TrainingLog};

pub const MANIFEST: &str = "manifest.toml";
pub const EPIGRAPH_CKPT: &str = "epigraph.ckpt";
pub const SAFETY_CKPT: &str = "safety.ckpt";
pub const LINE_CKPT: &str = "line.ckpt";
pub const VI_GRID: &str = "vi_grid.madg";
pub const EPIGRAPH_GRID: &str = "epigraph_grid.madg";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// File name relative to the manifest's directory -> entry.
    pub artifacts: BTreeMap<String, ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub bytes: u64,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Ok(Self::default());
        }
        toml::from_str(&std::fs::read_to_string(&p)?).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))
    }

    /// Record `paths` (which must live in `dir`) under `stage` and rewrite
    /// the manifest.
    pub fn record(dir: &Path, stage: &str, paths: &[PathBuf]) -> Result<()> {
        let mut m = Self::load(dir)?;
        for p in paths {
            let name = p
                .strip_prefix(dir)
                .map_err(|_| Error::Validation(format!("{} is outside {}", p.display(), dir.display())))?
                .to_string_lossy()
                .into_owned();
            m.artifacts.insert(
                name,
                ManifestEntry {
                    stage: stage.into(),
                    bytes: std::fs::metadata(p)?.len(),
                },
            );
        }
        let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }
}

/// Size the global worker pool; `None` keeps rayon's default. Only the
/// first call in a process takes effect.
pub fn configure_workers(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Validation("worker count must be at least 1".into()));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("worker pool already initialised; keeping it");
        }
    }
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.display().to_string()))
    }
}

pub fn load_model(path: &Path) -> Result<ValueModel> {
    require(path)?;
    checkpoint::load(path)
}

fn finish_training(out: &Path, stage: &str, name: &str, model: &ValueModel, log: &TrainingLog) -> Result<Vec<PathBuf>> {
    let ckpt = out.join(name);
    checkpoint::save(model, &ckpt)?;
    let log_path = out.join(format!("{stage}_log.csv"));
    log.write_csv(&log_path)?;
    let paths = vec![ckpt, log_path];
    Manifest::record(out, stage, &paths)?;
    Ok(paths)
}

pub fn train_epigraph_stage(cfg: &RunConfig, out: &Path) -> Result<(ValueModel, TrainingLog)> {
    let problem = EpigraphProblem::new(cfg.swarm_system(), cfg.problem.horizon)?;
    let s = &cfg.epigraph;
    let model = init_model(&problem, &s.hidden, s.omega0, s.init_seed)?;
    let (model, log) = train_epigraph(&problem, &s.options(Some(out.join(EPIGRAPH_CKPT))), model)?;
    finish_training(out, "epigraph", EPIGRAPH_CKPT, &model, &log)?;
    Ok((model, log))
}

pub fn train_safety_stage(cfg: &RunConfig, out: &Path) -> Result<(ValueModel, TrainingLog)> {
    let problem = cfg.safety_problem();
    let s = &cfg.safety;
    let model = init_model(&problem, &s.hidden, s.omega0, s.init_seed)?;
    let (model, log) = train_safety(&problem, &s.options(Some(out.join(SAFETY_CKPT))), model)?;
    finish_training(out, "safety", SAFETY_CKPT, &model, &log)?;
    Ok((model, log))
}

/// Train the low-dimensional epigraph instance used for oracle comparison.
pub fn train_line_stage(cfg: &RunConfig, out: &Path) -> Result<(ValueModel, TrainingLog)> {
    let problem = EpigraphProblem::new(cfg.line.clone(), cfg.line_horizon)?;
    let s = &cfg.line_training;
    let model = init_model(&problem, &s.hidden, s.omega0, s.init_seed)?;
    let (model, log) = train_epigraph(&problem, &s.options(Some(out.join(LINE_CKPT))), model)?;
    finish_training(out, "line", LINE_CKPT, &model, &log)?;
    Ok((model, log))
}

/// Solve the grid oracle for `mode` and save its `t = 0` slice.
pub fn solve_grid_stage(cfg: &RunConfig, mode: Mode, out: &Path) -> Result<GridField> {
    let opts = cfg.grid.solve_options();
    let (sol, name) = match mode {
        Mode::Vi => {
            let sp = cfg.safety_problem();
            let problem = RelativeViProblem { r: sp.r, a_max: sp.a_max };
            let axes = RelativeViProblem::axes(cfg.grid.vi_points, sp.pos_box, sp.vel_box);
            (solve(&problem, &axes, sp.horizon, &opts)?, VI_GRID)
        }
        Mode::Epigraph => {
            let problem = LineEpigraphProblem { system: cfg.line.clone() };
            let axes = problem.axes(cfg.grid.epigraph_points, cfg.line_horizon);
            (solve(&problem, &axes, cfg.line_horizon, &opts)?, EPIGRAPH_GRID)
        }
    };
    let field = sol.initial().clone();
    let path = out.join(name);
    field.save(&path)?;
    Manifest::record(out, "solve-grid", &[path])?;
    Ok(field)
}

/// Budget recovered from a value evaluator; infeasible maps to `None`.
pub fn recover_z<F: FnMut(f64) -> Result<f64>>(value: F, z_max: f64, policy: &PolicyConfig) -> Result<Option<f64>> {
    Ok(match z_search(value, z_max, policy.tol_fraction * z_max, policy.max_iter)? {
        ZSearch::Feasible { z, .. } => Some(z),
        ZSearch::Infeasible => None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetAgreement {
    pub n_probes: usize,
    /// Probes where both agree on feasibility and `|z_net - z_grid| <= tol`.
    pub n_agree: usize,
    pub tolerance: f64,
    pub max_abs_diff: f64,
    pub feasibility_mismatches: usize,
}

/// Compare budgets recovered from the net and from the grid at random
/// `(x, v)` probes at `t = 0`.
pub fn line_budget_agreement(model: &ValueModel, sys: &LineSystem, field: &GridField, n: usize, seed: u64, policy: &PolicyConfig) -> Result<BudgetAgreement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 0.1 * sys.z_max;
    let (mut agree, mut mism, mut max_diff) = (0, 0, 0.0f64);
    for _ in 0..n {
        let s = [rng.gen_range(-sys.x_half..=sys.x_half), rng.gen_range(-sys.v_max..=sys.v_max)];
        let zn = recover_z(|z| aux_value(model, sys, 0.0, &s, z), sys.z_max, policy)?;
        let zg = recover_z(|z| Ok(interpolate(field, &[s[0], s[1], z])), sys.z_max, policy)?;
        match (zn, zg) {
            (Some(a), Some(b)) => {
                max_diff = max_diff.max((a - b).abs());
                if (a - b).abs() <= tol {
                    agree += 1;
                }
            }
            (None, None) => agree += 1,
            _ => {
                mism += 1;
                max_diff = max_diff.max(sys.z_max);
            }
        }
    }
    Ok(BudgetAgreement {
        n_probes: n,
        n_agree: agree,
        tolerance: tol,
        max_abs_diff: max_diff,
        feasibility_mismatches: mism,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub kind: String,
    pub comparison: CompareReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetAgreement>,
}

/// Safety net against the VI grid on every node, at `t = 0`.
pub fn compare_safety(model: &ValueModel, problem: &SafetyProblem, field: &GridField, margin: f64) -> Result<CompareReport> {
    compare(
        field,
        |x| Ok(safety_value_eval(model, problem.r, 0.0, &RelativeState::new(x[0], x[1], x[2], x[3]))?.value),
        SampleSpec::AllNodes,
        margin,
    )
}

/// 1D-instance epigraph net against the epigraph grid on interior nodes
/// with a budget in `[0, z_max]`. The padding below `z = 0` lies outside
/// the network's training range.
pub fn compare_line(model: &ValueModel, sys: &LineSystem, field: &GridField, margin: f64) -> Result<CompareReport> {
    let points = interior_nodes_where(field, |x| x[2] >= 0.0);
    compare_points(field, &points, |x| aux_value(model, sys, 0.0, &x[..2], x[2]), margin)
}

pub fn validate_stage(cfg: &RunConfig, net: &Path, grid: &Path, out: &Path) -> Result<ValidationReport> {
    let model = load_model(net)?;
    require(grid)?;
    let field = GridField::load(grid)?;
    let report = match (model.kind, field.dim()) {
        (ModelKind::Safety, 4) => ValidationReport {
            kind: "safety".into(),
            comparison: compare_safety(&model, &cfg.safety_problem(), &field, cfg.grid.margin)?,
            budget: None,
        },
        (ModelKind::Epigraph, 3) if model.input_dim() == 4 => ValidationReport {
            kind: "epigraph".into(),
            comparison: compare_line(&model, &cfg.line, &field, cfg.grid.margin)?,
            budget: Some(line_budget_agreement(&model, &cfg.line, &field, 100, cfg.seeds[0], &cfg.simulation.policy)?),
        },
        (kind, d) => {
            return Err(Error::Validation(format!(
                "cannot compare a {kind:?} model with {} inputs against a {d}D grid",
                model.input_dim()
            )))
        }
    };
    let path = out.join("validate.toml");
    write_atomic(&path, toml::to_string(&report).map_err(|e| Error::Config(e.to_string()))?.as_bytes())?;
    Manifest::record(out, "validate", &[path])?;
    Ok(report)
}

pub fn load_models(cfg: &RunConfig, models_dir: &Path) -> Result<Models> {
    let value = load_model(&models_dir.join(EPIGRAPH_CKPT))?;
    let safety = load_model(&models_dir.join(SAFETY_CKPT))?;
    Models::new(value, safety, cfg.swarm_system(), cfg.safety_problem())
}

/// Run a scenario batch and write its logs and report into `out`.
pub fn simulate_stage(
    cfg: &RunConfig,
    models: &Models,
    n_agents: usize,
    strategy: NeighbourStrategy,
    seeds: &[u64],
    out: &Path,
) -> Result<BatchReport> {
    let spec = BatchSpec {
        config: cfg.scenario_config(n_agents, strategy),
        seeds: seeds.to_vec(),
        scenarios_per_seed: cfg.simulation.scenarios_per_seed,
    };
    let outcome = run_batch(&spec, models)?;
    let paths = write_batch(out, &outcome)?;
    Manifest::record(out, "simulate", &paths)?;
    Ok(outcome.report)
}

pub fn heatmap_stage(cfg: &RunConfig, model: &ValueModel, scene: &SceneSpec, res: usize, out: &Path) -> Result<PathBuf> {
    let sys: SwarmSystem = cfg.swarm_system();
    if model.input_dim() != sys.state_dim() + 2 {
        return Err(Error::Validation("heatmap needs the swarm epigraph model".into()));
    }
    let h = emit_heatmap(model, &sys, scene, res, &cfg.simulation.policy)?;
    let path = out.join("heatmap.csv");
    write_atomic(&path, &h.to_csv()?)?;
    Manifest::record(out, "heatmap", &[path.clone()])?;
    Ok(path)
}

/// Collect every `report.toml` under `dir` (one level of subdirectories
/// included) into `summary.toml`, keyed by relative directory.
pub fn report_stage(dir: &Path) -> Result<BTreeMap<String, BatchReport>> {
    require(dir)?;
    let mut found = BTreeMap::new();
    let mut candidates = vec![(String::from("."), dir.join("report.toml"))];
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for s in subdirs {
        let name = s.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        candidates.push((name, s.join("report.toml")));
    }
    for (name, p) in candidates {
        if p.exists() {
            found.insert(name, BatchReport::from_toml(&std::fs::read_to_string(&p)?)?);
        }
    }
    if found.is_empty() {
        return Err(Error::MissingArtifact(format!("no report.toml under {}", dir.display())));
    }
    let path = dir.join("summary.toml");
    write_atomic(&path, toml::to_string(&found).map_err(|e| Error::Config(e.to_string()))?.as_bytes())?;
    Manifest::record(dir, "report", &[path])?;
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_records_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        write_atomic(&a, b"abc").unwrap();
        Manifest::record(dir.path(), "one", &[a.clone()]).unwrap();
        write_atomic(&a, b"abcdef").unwrap();
        Manifest::record(dir.path(), "two", &[a.clone()]).unwrap();
        let m = Manifest::load(dir.path()).unwrap();
        assert_eq!(m.artifacts.len(), 1);
        assert_eq!(m.artifacts["a.csv"], ManifestEntry { stage: "two".into(), bytes: 6 });
        assert!(Manifest::record(dir.path(), "x", &[PathBuf::from("/elsewhere")]).is_err());
    }

    #[test]
    fn missing_models_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_models(&RunConfig::default(), dir.path()).err().unwrap();
        assert!(matches!(err, Error::MissingArtifact(ref m) if m.contains(EPIGRAPH_CKPT)), "{err}");
    }

    #[test]
    fn budget_recovery() {
        let p = PolicyConfig::default();
        let z = recover_z(|z| Ok(1.0 - z), 10.0, &p).unwrap().unwrap();
        assert!((z - 1.0).abs() <= 1e-3);
        assert_eq!(recover_z(|_| Ok(1.0), 10.0, &p).unwrap(), None);
    }
}
