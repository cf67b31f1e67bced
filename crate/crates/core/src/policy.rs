//! Online policy: budget search over `z`, control extraction from the
//! auxiliary value gradient, the safety fallback, and one receding-horizon
//! decision for one agent.

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    build_observation, AgentState, AugmentedObservation, ControlInput, EpigraphSystem, NeighbourSlot, Observation,
    SwarmSystem, WorldState,
};
use crate::error::{Error, Result};
use crate::nn::{aux_value, aux_value_eval, safety_value_eval, ModelKind, ValueModel};
use crate::safety::{pair_risk, RelativeState, SafetyProblem};
use crate::sim::{select_neighbours, SelectionContext};

/// Outcome of the budget search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ZSearch {
    Feasible { z: f64, iterations: usize },
    Infeasible,
}

/// Smallest budget `z` in `[0, z_max]` with `value(z) <= 0`, assuming the
/// value is non-increasing in `z`. Stops when the bracket is narrower than
/// `tol` or after `max_iter` halvings and returns the upper bracket end.
pub fn z_search<F>(mut value: F, z_max: f64, tol: f64, max_iter: usize) -> Result<ZSearch>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(tol > 0.0) {
        return Err(Error::Validation(format!("search tolerance must be positive, got {tol}")));
    }
    let mut checked = |z: f64| -> Result<f64> {
        let v = value(z)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("value at z = {z} is {v}")));
        }
        Ok(v)
    };
    if checked(0.0)? <= 0.0 {
        return Ok(ZSearch::Feasible { z: 0.0, iterations: 0 });
    }
    if checked(z_max)? > 0.0 {
        return Ok(ZSearch::Infeasible);
    }
    let (mut lo, mut hi) = (0.0, z_max);
    let mut iterations = 0;
    while iterations < max_iter && hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if checked(mid)? <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    Ok(ZSearch::Feasible { z: hi, iterations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Search tolerance as a fraction of `z_max`.
    pub tol_fraction: f64,
    pub max_iter: usize,
    /// Time at which the value functions are queried on every replan.
    pub t_eval: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            tol_fraction: 1e-4,
            max_iter: 30,
            t_eval: 0.0,
        }
    }
}

/// Trained value functions plus the problem definitions they belong to.
#[derive(Clone, Debug)]
pub struct Models {
    pub value: ValueModel,
    pub safety: ValueModel,
    pub system: SwarmSystem,
    pub safety_problem: SafetyProblem,
}

impl Models {
    pub fn new(value: ValueModel, safety: ValueModel, system: SwarmSystem, safety_problem: SafetyProblem) -> Result<Self> {
        if value.kind != ModelKind::Epigraph || value.input_dim() != system.state_dim() + 2 {
            return Err(Error::Validation(format!(
                "value model must be an epigraph model with {} inputs",
                system.state_dim() + 2
            )));
        }
        if safety.kind != ModelKind::Safety || safety.input_dim() != 5 {
            return Err(Error::Validation("safety model must be a safety model with 5 inputs".into()));
        }
        Ok(Self {
            value,
            safety,
            system,
            safety_problem,
        })
    }
}

/// Joint minimiser of `<grad V, f>` at `(t, obs, z)`; the ego block is the
/// first two entries.
pub fn optimal_control(model: &ValueModel, sys: &SwarmSystem, t: f64, obs: &Observation, z: f64) -> Result<(Vec<f64>, f64)> {
    let state = obs.flatten();
    let e = aux_value_eval(model, sys, t, &state, z)?;
    let u = sys.optimal_control(&state, &e.input_gradient[2..]);
    Ok((u, e.value))
}

/// Safety-maximising ego control against the most dangerous real neighbour
/// of `obs`. Returns the control and the index of that neighbour slot.
pub fn fallback_control(
    safety: &ValueModel,
    problem: &SafetyProblem,
    obs: &Observation,
    t: f64,
) -> Result<(ControlInput, Option<usize>)> {
    let ego = obs.ego().state;
    let mut worst: Option<(usize, f64)> = None;
    for (k, slot) in obs.neighbours().iter().enumerate() {
        if slot.is_virtual {
            continue;
        }
        let risk = pair_risk(safety, problem, &ego, &slot.state, t)?;
        if worst.map_or(true, |(_, r)| risk < r) {
            worst = Some((k, risk));
        }
    }
    let Some((k, _)) = worst else {
        return Ok((ControlInput::default(), None));
    };
    let other = obs.neighbours()[k].state;
    let rel = RelativeState::between(&other, &ego).clamped(problem.pos_box, problem.vel_box);
    let g = safety_value_eval(safety, problem.r, t, &rel)?.input_gradient;
    Ok((ego_safety_control(&[g[1], g[2], g[3], g[4]], problem.a_max), Some(k)))
}

/// Ego block of the maximiser of `<grad, f_s>` for the relative state
/// `other - ego`, where the ego's acceleration enters with a minus sign.
pub fn ego_safety_control(grad: &[f64; 4], a_max: f64) -> ControlInput {
    ControlInput::new(-a_max * crate::dynamics::sign_or_zero(grad[2]), -a_max * crate::dynamics::sign_or_zero(grad[3]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDecision {
    /// `None` when the budget search found no feasible `z`.
    pub z_star: Option<f64>,
    pub control: ControlInput,
    pub neighbours: Vec<NeighbourSlot>,
    /// Auxiliary value at `z_star`.
    pub value_at_z: Option<f64>,
    /// Whether the cost branch of the terminal function is active at `z_star`.
    pub cost_branch: Option<bool>,
    pub search_iterations: usize,
    pub fallback: bool,
}

/// Decide the ego control for one replanning step from a frozen world.
pub fn receding_step(
    world: &WorldState,
    ego: usize,
    models: &Models,
    cfg: &PolicyConfig,
    ctx: &SelectionContext,
) -> Result<PolicyDecision> {
    let limits = models.system.limits;
    let neighbours = select_neighbours(world, ego, models, cfg.t_eval, ctx)?;
    let obs = build_observation(world, ego, &neighbours, &limits)?;
    let state = obs.flatten();
    let z_max = models.system.z_max;
    let search = z_search(
        |z| aux_value(&models.value, &models.system, cfg.t_eval, &state, z),
        z_max,
        cfg.tol_fraction * z_max,
        cfg.max_iter,
    )?;
    match search {
        ZSearch::Feasible { z, iterations } => {
            let aug = AugmentedObservation::new(obs, z)?;
            let (u, value) = optimal_control(&models.value, &models.system, cfg.t_eval, &aug.obs, z)?;
            let mut gb = vec![0.0; state.len() + 1];
            let (_, _, cost_branch) = crate::nn::epigraph_boundary(&models.system, &state, z, &mut gb);
            Ok(PolicyDecision {
                z_star: Some(z),
                control: ControlInput::new(u[0], u[1]).clamped(limits.a_max),
                neighbours,
                value_at_z: Some(value),
                cost_branch: Some(cost_branch),
                search_iterations: iterations,
                fallback: false,
            })
        }
        ZSearch::Infeasible => {
            let (u, _) = fallback_control(&models.safety, &models.safety_problem, &obs, cfg.t_eval)?;
            Ok(PolicyDecision {
                z_star: None,
                control: u.clamped(limits.a_max),
                neighbours,
                value_at_z: None,
                cost_branch: None,
                search_iterations: 0,
                fallback: true,
            })
        }
    }
}

/// Fraction of consecutive pairs on a uniform `z` grid where the value does
/// not increase; a diagnostic for the monotonicity the search assumes.
pub fn z_monotonicity_rate(model: &ValueModel, sys: &SwarmSystem, t: f64, state: &[f64], points: usize) -> Result<f64> {
    let zs: Vec<f64> = (0..points).map(|k| sys.z_max * k as f64 / (points - 1) as f64).collect();
    let vals: Vec<f64> = zs.iter().map(|&z| aux_value(model, sys, t, state, z)).collect::<Result<_>>()?;
    let ok = vals.windows(2).filter(|w| w[1] <= w[0]).count();
    Ok(ok as f64 / (points - 1) as f64)
}

/// Ego state of `world` as seen by agent `ego`.
pub fn ego_state(world: &WorldState, ego: usize) -> AgentState {
    world.agents[ego]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{GoalSpec, Limits, Slot};
    use crate::epigraph::EpigraphProblem;
    use crate::nn::Arch;
    use crate::train::init_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn search_examples() {
        match z_search(|z| Ok(1.0 - z), 10.0, 1e-3, 30).unwrap() {
            ZSearch::Feasible { z, .. } => assert!((z - 1.0).abs() <= 1e-3 && 1.0 - z <= 0.0),
            other => panic!("{other:?}"),
        }
        assert_eq!(z_search(|_| Ok(-0.5), 10.0, 1e-3, 30).unwrap(), ZSearch::Feasible { z: 0.0, iterations: 0 });
        assert_eq!(z_search(|_| Ok(0.5), 10.0, 1e-3, 30).unwrap(), ZSearch::Infeasible);
        assert!(z_search(|_| Ok(f64::NAN), 10.0, 1e-3, 30).is_err());
        assert!(z_search(|z| Ok(1.0 - z), 10.0, 0.0, 30).is_err());
    }

    #[test]
    fn search_bracket_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let root = rng.gen_range(0.01..9.9);
            let slope = rng.gen_range(0.1..5.0);
            let f = |z: f64| Ok(slope * (root - z));
            let tol = 1e-3;
            let ZSearch::Feasible { z, .. } = z_search(f, 10.0, tol, 30).unwrap() else { panic!() };
            assert!(f(z).unwrap() <= 0.0);
            assert!(f((z - tol).max(0.0)).unwrap() > 0.0);
        }
    }

    fn swarm() -> SwarmSystem {
        SwarmSystem::new(Limits::default(), 0.1, 2, 0.2)
    }

    fn obs_with(neigh: Vec<Slot>) -> Observation {
        let mut slots = vec![Slot::real(AgentState::new(0.0, 0.0, 0.5, -0.5), GoalSpec::new(0.5, 0.5))];
        slots.extend(neigh);
        Observation::new(slots).unwrap()
    }

    #[test]
    fn control_from_hand_set_gradient() {
        // Single hidden unit; the network output is linear in the inputs
        // near the origin, so pick weights that give a known sign pattern.
        let sys = swarm();
        let p = EpigraphProblem::new(sys.clone(), 0.2).unwrap();
        let mut m = init_model(&p, &[8], 30.0, 1).unwrap();
        let far = sys.limits.far_point();
        let pad = Slot::virtual_slot(&sys.limits);
        let obs = obs_with(vec![pad, pad]);
        let (u, _) = optimal_control(&m, &sys, 0.0, &obs, 1.0).unwrap();
        assert!(u.iter().all(|&a| a.abs() == 4.0 || a == 0.0));
        assert_eq!(&u[2..], &[0.0; 4]);
        // Zero network: gradient of the boundary term only; velocity
        // components have zero gradient so the tie rule gives zero control.
        m.params.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        let (u, _) = optimal_control(&m, &sys, 0.0, &obs, 1.0).unwrap();
        assert_eq!(u, vec![0.0; 6]);
        assert!(far > 1.0);
    }

    #[test]
    fn control_attains_the_minimum() {
        let sys = swarm();
        let p = EpigraphProblem::new(sys.clone(), 0.2).unwrap();
        let m = init_model(&p, &[16, 16], 30.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = vec![0.0; 18];
        for _ in 0..20 {
            sys.sample_state(&mut rng, &mut s);
            let obs = Observation::from_flat(&s, &sys.limits).unwrap();
            let z = rng.gen_range(0.0..sys.z_max);
            let (u, _) = optimal_control(&m, &sys, 0.0, &obs, z).unwrap();
            assert!(u.iter().all(|a| a.abs() <= 4.0));
            let g = aux_value_eval(&m, &sys, 0.0, &s, z).unwrap().input_gradient;
            let h = crate::epigraph::hamiltonian_at(&sys, &s, &g[2..], g[1], &u);
            for _ in 0..50 {
                let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
                assert!(h <= crate::epigraph::hamiltonian_at(&sys, &s, &g[2..], g[1], &v) + 1e-12);
            }
        }
    }

    fn safety_model(seed: u64) -> (SafetyProblem, ValueModel) {
        let p = SafetyProblem::default();
        (p.clone(), init_model(&p, &[16, 16], 30.0, seed).unwrap())
    }

    #[test]
    fn fallback_matches_brute_force_ego_block() {
        let (p, m) = safety_model(2);
        let other = AgentState::new(0.2, 0.1, -1.0, 0.0);
        let obs = obs_with(vec![Slot::real(other, GoalSpec::new(0.0, 0.0)), Slot::virtual_slot(&Limits::default())]);
        let (u, k) = fallback_control(&m, &p, &obs, 0.0).unwrap();
        assert_eq!(k, Some(0));
        let ego = obs.ego().state;
        let rel = RelativeState::between(&other, &ego);
        let g = safety_value_eval(&m, p.r, 0.0, &rel).unwrap().input_gradient;
        let grad = [g[1], g[2], g[3], g[4]];
        let grid: Vec<f64> = (0..9).map(|i| -4.0 + i as f64).collect();
        let (mut best, mut arg) = (f64::NEG_INFINITY, (0.0, 0.0));
        for &ax in &grid {
            for &ay in &grid {
                let f = crate::safety::relative_derivative(&rel, &ControlInput::default(), &ControlInput::new(ax, ay));
                let v: f64 = grad.iter().zip(f).map(|(a, b)| a * b).sum();
                if v > best {
                    best = v;
                    arg = (ax, ay);
                }
            }
        }
        assert_eq!((u.ax, u.ay), arg);
    }

    #[test]
    fn fallback_without_neighbours_is_zero() {
        let (p, m) = safety_model(1);
        let pad = Slot::virtual_slot(&Limits::default());
        let (u, k) = fallback_control(&m, &p, &obs_with(vec![pad, pad]), 0.0).unwrap();
        assert_eq!(u, ControlInput::default());
        assert_eq!(k, None);
    }

    #[test]
    fn fallback_targets_most_dangerous_neighbour() {
        // At t = T the risk is the distance margin, so distances fix the ranking.
        let (p, m) = safety_model(1);
        let close = Slot::real(AgentState::new(0.15, 0.0, 0.0, 0.0), GoalSpec::new(0.0, 0.0));
        let far = Slot::real(AgentState::new(0.0, 0.5, 0.0, 0.0), GoalSpec::new(0.0, 0.0));
        let (_, k) = fallback_control(&m, &p, &obs_with(vec![far, close]), p.horizon).unwrap();
        assert_eq!(k, Some(1));
    }

    #[test]
    fn models_check_shapes() {
        let sys = swarm();
        let (sp, sm) = safety_model(1);
        let p = EpigraphProblem::new(sys.clone(), 0.2).unwrap();
        let vm = init_model(&p, &[8], 30.0, 1).unwrap();
        assert!(Models::new(vm.clone(), sm.clone(), sys.clone(), sp.clone()).is_ok());
        assert!(Models::new(sm.clone(), vm, sys, sp).is_err());
        let _ = Arch::new(1, &[1], 30.0);
    }
}
