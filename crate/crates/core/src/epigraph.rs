//! Epigraph value training: collocation sampling over `(t, z, state)`, the
//! analytic Hamiltonian minimum for control-affine systems, and the HJB
//! residual `min{-dV/dt - H, V - g}`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::dynamics::EpigraphSystem;
use crate::error::{Error, Result};
use crate::nn::{epigraph_boundary, ModelKind, Normalization, ValueModel};
use crate::train::{self, PinnProblem, TrainOptions, TrainingLog};

/// Minimum of `<grad_state, f(s, u)> - grad_z * l(s)` over the control box,
/// with its minimiser.
pub fn hamiltonian_min<S: EpigraphSystem + ?Sized>(
    sys: &S,
    state: &[f64],
    grad_state: &[f64],
    grad_z: f64,
) -> (f64, Vec<f64>) {
    let u = sys.optimal_control(state, grad_state);
    let mut f = vec![0.0; sys.state_dim()];
    sys.dynamics(state, &u, &mut f);
    let h = grad_state.iter().zip(&f).map(|(g, v)| g * v).sum::<f64>() - grad_z * sys.running_cost(state);
    (h, u)
}

/// `<grad_state, f(s, u)> - grad_z * l(s)` for an arbitrary control.
pub fn hamiltonian_at<S: EpigraphSystem + ?Sized>(sys: &S, state: &[f64], grad_state: &[f64], grad_z: f64, u: &[f64]) -> f64 {
    let mut f = vec![0.0; sys.state_dim()];
    sys.dynamics(state, u, &mut f);
    grad_state.iter().zip(&f).map(|(g, v)| g * v).sum::<f64>() - grad_z * sys.running_cost(state)
}

/// The epigraph value of `sys` as a residual-training problem. Inputs are
/// `[t, z, state...]`.
pub struct EpigraphProblem<S> {
    pub system: S,
    pub horizon: f64,
}

impl<S: EpigraphSystem> EpigraphProblem<S> {
    pub fn new(system: S, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Validation(format!("horizon must be positive, got {horizon}")));
        }
        if !(system.z_max() > 0.0) {
            return Err(Error::Validation(format!("z_max must be positive, got {}", system.z_max())));
        }
        Ok(Self { system, horizon })
    }
}

impl<S: EpigraphSystem> PinnProblem for EpigraphProblem<S> {
    fn input_dim(&self) -> usize {
        self.system.state_dim() + 2
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn model_kind(&self) -> ModelKind {
        ModelKind::Epigraph
    }

    fn normalization(&self) -> Normalization {
        let zm = self.system.z_max();
        let (so, ss) = self.system.state_normalization();
        let mut offset = vec![0.5 * self.horizon, 0.5 * zm];
        let mut scale = vec![2.0 / self.horizon, 2.0 / zm];
        offset.extend(so);
        scale.extend(ss);
        Normalization { offset, scale }
    }

    fn sample_input(&self, rng: &mut dyn rand::RngCore, window: (f64, f64), out: &mut [f64]) {
        out[0] = if window.0 < window.1 { rng.gen_range(window.0..=window.1) } else { window.1 };
        out[1] = rng.gen_range(0.0..=self.system.z_max());
        self.system.sample_state(rng, &mut out[2..]);
    }

    fn residual(&self, input: &[f64], r: f64, grad_r: &[f64], d_grad: &mut [f64]) -> (f64, f64) {
        let n = self.system.state_dim();
        let t = input[0];
        let z = input[1];
        let state = &input[2..];
        let tau = self.horizon - t;
        let mut gb = vec![0.0; n + 1];
        let (b, g, _) = epigraph_boundary(&self.system, state, z, &mut gb);
        let value = b + tau * r;
        // -dV/dt = R - (T - t) dR/dt
        let neg_dt = r - tau * grad_r[0];
        let gz = gb[0] + tau * grad_r[1];
        let gs: Vec<f64> = (0..n).map(|i| gb[i + 1] + tau * grad_r[i + 2]).collect();
        let (h, u) = hamiltonian_min(&self.system, state, &gs, gz);
        let pde = neg_dt - h;
        let obstacle = value - g;
        if pde <= obstacle {
            let mut f = vec![0.0; n];
            self.system.dynamics(state, &u, &mut f);
            d_grad[0] = -tau;
            d_grad[1] = tau * self.system.running_cost(state);
            for i in 0..n {
                d_grad[i + 2] = -tau * f[i];
            }
            (pde, 1.0)
        } else {
            d_grad.fill(0.0);
            (obstacle, tau)
        }
    }
}

/// Raw collocation inputs `[t, z, state...]`, one row per sample.
pub struct CollocationBatch {
    pub inputs: Array2<f64>,
}

impl CollocationBatch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn t(&self, i: usize) -> f64 {
        self.inputs[[i, 0]]
    }

    pub fn z(&self, i: usize) -> f64 {
        self.inputs[[i, 1]]
    }
}

pub fn sample_collocation<S: EpigraphSystem>(
    problem: &EpigraphProblem<S>,
    rng: &mut dyn rand::RngCore,
    window: (f64, f64),
    batch: usize,
) -> CollocationBatch {
    CollocationBatch {
        inputs: train::sample_collocation(problem, rng, window, batch),
    }
}

/// Mean absolute HJB residual over the batch.
pub fn pde_residual_loss<S: EpigraphSystem>(model: &ValueModel, problem: &EpigraphProblem<S>, batch: ArrayView2<f64>) -> Result<f64> {
    train::residual_loss(model, problem, batch)
}

pub fn train_epigraph<S: EpigraphSystem>(
    problem: &EpigraphProblem<S>,
    opts: &TrainOptions,
    model: ValueModel,
) -> Result<(ValueModel, TrainingLog)> {
    train::train(problem, opts, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LineSystem, Limits, SwarmSystem};
    use crate::nn::{aux_value, aux_value_eval, Arch, NetParams};
    use crate::train::{init_model, residuals, validate_residual, CurriculumConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn swarm() -> EpigraphProblem<SwarmSystem> {
        let mut sys = SwarmSystem::new(Limits::default(), 0.1, 2, 0.2);
        sys.virtual_slot_prob = 0.0;
        EpigraphProblem::new(sys, 0.2).unwrap()
    }

    #[test]
    fn single_agent_control_term_example() {
        let p = swarm();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = vec![0.0; 18];
        p.system.sample_state(&mut rng, &mut s);
        // Pad both neighbours.
        let far = p.system.limits.far_point();
        for k in 1..3 {
            s[6 * k..6 * k + 6].copy_from_slice(&[far, far, 0.0, 0.0, far, far]);
        }
        let mut g = vec![0.0; 18];
        g[2] = 0.3;
        g[3] = -0.2;
        let (h, u) = hamiltonian_min(&p.system, &s, &g, 0.0);
        assert_eq!(&u[..2], &[-4.0, 4.0]);
        assert!((h - (-2.0)).abs() < 1e-12);
        let mut best = f64::INFINITY;
        for i in 0..17 {
            for j in 0..17 {
                let a = -4.0 + 0.5 * i as f64;
                let b = -4.0 + 0.5 * j as f64;
                best = best.min(hamiltonian_at(&p.system, &s, &g, 0.0, &[a, b, 0.0, 0.0, 0.0, 0.0]));
            }
        }
        assert!((best - h).abs() < 1e-12);
        let (h0, u0) = hamiltonian_min(&p.system, &s, &[0.0; 18], 0.0);
        assert_eq!(h0, 0.0);
        assert!(u0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hamiltonian_is_a_lower_bound() {
        let p = swarm();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = vec![0.0; 18];
        for _ in 0..50 {
            p.system.sample_state(&mut rng, &mut s);
            let g: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let gz = rng.gen_range(-1.0..1.0);
            let (h, u) = hamiltonian_min(&p.system, &s, &g, gz);
            assert!((hamiltonian_at(&p.system, &s, &g, gz, &u) - h).abs() < 1e-12);
            for _ in 0..20 {
                let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
                assert!(h <= hamiltonian_at(&p.system, &s, &g, gz, &v) + 1e-12);
            }
        }
    }

    #[test]
    fn sampler_respects_bounds_and_window() {
        let p = swarm();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sample_collocation(&p, &mut rng, (0.2, 0.2), 500);
        for i in 0..b.len() {
            assert_eq!(b.t(i), 0.2);
            assert!((0.0..=p.system.z_max).contains(&b.z(i)));
            let row = b.inputs.row(i);
            for k in 0..3 {
                let o = 2 + 6 * k;
                assert!(row[o].abs() <= 1.0 && row[o + 1].abs() <= 1.0);
                assert!(row[o + 2].abs() <= 4.0 && row[o + 3].abs() <= 4.0);
                assert!(row[o + 4].abs() <= 1.0 && row[o + 5].abs() <= 1.0);
            }
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            sample_collocation(&p, &mut r1, (0.0, 0.2), 64).inputs,
            sample_collocation(&p, &mut r2, (0.0, 0.2), 64).inputs
        );
    }

    #[test]
    fn residual_matches_finite_difference_recomputation() {
        let p = swarm();
        let m = init_model(&p, &[32, 32], 30.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;
        let batch = sample_collocation(&p, &mut rng, (0.0, 0.19), 100);
        let got = residuals(&m, &p, batch.inputs.view()).unwrap();
        for i in 0..batch.len() {
            let row = batch.inputs.row(i).to_vec();
            let (t, z, s) = (row[0], row[1], &row[2..]);
            let v = |t: f64, z: f64, s: &[f64]| aux_value(&m, &p.system, t, s, z).unwrap();
            let dt = (v(t + h, z, s) - v(t - h, z, s)) / (2.0 * h);
            let dz = (v(t, z + h, s) - v(t, z - h, s)) / (2.0 * h);
            let gs: Vec<f64> = (0..18)
                .map(|k| {
                    let mut sp = s.to_vec();
                    let mut sm = s.to_vec();
                    sp[k] += h;
                    sm[k] -= h;
                    (v(t, z, &sp) - v(t, z, &sm)) / (2.0 * h)
                })
                .collect();
            let (ham, _) = hamiltonian_min(&p.system, s, &gs, dz);
            let mut gg = vec![0.0; 18];
            let g = p.system.constraint(s, &mut gg);
            let expected = (-dt - ham).min(v(t, z, s) - g);
            assert!((got[i] - expected).abs() <= 1e-3 * expected.abs().max(1.0), "{i}: {} vs {expected}", got[i]);
        }
    }

    #[test]
    fn wrapper_gradient_matches_finite_differences() {
        let p = EpigraphProblem::new(LineSystem::default(), 0.5).unwrap();
        let m = init_model(&p, &[16, 16], 30.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 50 {
            let t = rng.gen_range(0.0..0.49);
            let z = rng.gen_range(0.05..2.9);
            let s = [rng.gen_range(-0.95..0.95), rng.gen_range(-0.95..0.95)];
            let mut gb = [0.0; 3];
            let (_, gval, _) = epigraph_boundary(&p.system, &s, z, &mut gb);
            let phi = (s[0] - p.system.goal).abs();
            // Stay away from the max kink and the abs kinks.
            if ((phi - z) - gval).abs() < 1e-3 || (s[0] - p.system.goal).abs() < 1e-3 || s[0].abs() < 1e-3 {
                continue;
            }
            let e = aux_value_eval(&m, &p.system, t, &s, z).unwrap();
            let v = |t: f64, z: f64, s: [f64; 2]| aux_value(&m, &p.system, t, &s, z).unwrap();
            let mut fd = vec![(v(t + h, z, s) - v(t - h, z, s)) / (2.0 * h), (v(t, z + h, s) - v(t, z - h, s)) / (2.0 * h)];
            for k in 0..2 {
                let mut sp = s;
                let mut sm = s;
                sp[k] += h;
                sm[k] -= h;
                fd.push((v(t, z, sp) - v(t, z, sm)) / (2.0 * h));
            }
            for k in 0..4 {
                let a = e.input_gradient[k];
                assert!((a - fd[k]).abs() <= 1e-4 * a.abs().max(fd[k].abs()).max(1.0), "{k}: {a} vs {}", fd[k]);
            }
            checked += 1;
        }
    }

    #[test]
    fn terminal_value_and_z_branch_derivative() {
        let p = swarm();
        let m = init_model(&p, &[16], 30.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = vec![0.0; 18];
        for _ in 0..200 {
            p.system.sample_state(&mut rng, &mut s);
            let z = rng.gen_range(0.0..p.system.z_max);
            let mut gb = vec![0.0; 19];
            let (b, _, cost) = epigraph_boundary(&p.system, &s, z, &mut gb);
            let e = aux_value_eval(&m, &p.system, 0.2, &s, z).unwrap();
            assert_eq!(e.value, b);
            assert_eq!(e.input_gradient[1], if cost { -1.0 } else { 0.0 });
        }
    }

    #[test]
    fn tight_obstacle_branch_gives_zero_residual() {
        // Zero network: V = max(phi - z, g). With z large the g branch is
        // active, V - g = 0, and -dV/dt - H = -H >= 0 requires H <= 0.
        let sys = LineSystem::default();
        let p = EpigraphProblem::new(sys, 0.5).unwrap();
        let arch = Arch::new(4, &[4], 30.0);
        let params = NetParams::from_parts(arch.clone(), vec![0.0; arch.param_count()]).unwrap();
        let m = ValueModel::new(ModelKind::Epigraph, params, p.normalization(), 0.5).unwrap();
        // x = 0.5, v = 0: g = -0.3, phi = 0.1, z = 2 -> g branch, grad wrt x = -1,
        // H = -1 * v = 0.
        let batch = Array2::from_shape_vec((1, 4), vec![0.3, 2.0, 0.5, 0.0]).unwrap();
        assert_eq!(pde_residual_loss(&m, &p, batch.view()).unwrap(), 0.0);
    }

    #[test]
    fn zero_network_terminal_residual_closed_form() {
        let sys = LineSystem::default();
        let p = EpigraphProblem::new(sys.clone(), 0.5).unwrap();
        let arch = Arch::new(4, &[8], 30.0);
        let params = NetParams::from_parts(arch.clone(), vec![0.0; arch.param_count()]).unwrap();
        let m = ValueModel::new(ModelKind::Epigraph, params, p.normalization(), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = sample_collocation(&p, &mut rng, (0.5, 0.5), 200);
        let got = residuals(&m, &p, batch.inputs.view()).unwrap();
        for i in 0..batch.len() {
            let (z, x, v) = (batch.inputs[[i, 1]], batch.inputs[[i, 2]], batch.inputs[[i, 3]]);
            let phi = (x - sys.goal).abs();
            let g = sys.obstacle_half_width - (x - sys.obstacle_center).abs();
            let (val, ham) = if phi - z >= g {
                (phi - z, (x - sys.goal).signum() * v + sys.running_cost(&[x, v]))
            } else {
                (g, -(x - sys.obstacle_center).signum() * v)
            };
            let expected = (-ham).min(val - g);
            assert!((got[i] - expected).abs() < 1e-12, "{} vs {expected}", got[i]);
        }
        let st = validate_residual(&m, &p, 300, (0.0, 0.5), 1).unwrap();
        assert!(st.mean <= st.p95 && st.p95 <= st.max);
        assert_eq!(st, validate_residual(&m, &p, 300, (0.0, 0.5), 1).unwrap());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let p = swarm();
        let m = init_model(&p, &[16, 16], 30.0, 3).unwrap();
        let opts = TrainOptions {
            curriculum: CurriculumConfig {
                iterations: 1,
                batch_size: 64,
                ..Default::default()
            },
            adam: crate::nn::AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            checkpoint_path: None,
        };
        let (after, log) = train_epigraph(&p, &opts, m.clone()).unwrap();
        assert_eq!(after.params.as_slice(), m.params.as_slice());
        assert_eq!(log.entries.len(), 1);
    }
}
