//! Pairwise safety value: relative double-integrator dynamics, the
//! distance target `psi`, the reachability variational inequality residual,
//! and the pair-risk query used to rank neighbours.
//!
//! A relative state is `x_i - x_j`, so its velocity part evolves with
//! `u_i - u_j`. [`pair_risk`] uses `other - ego`, which makes the ego the
//! second agent of the pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AgentState, ControlInput};
use crate::dynamics::sign_or_zero;
use crate::error::{Error, Result};
use crate::nn::{safety_value_eval, ModelKind, Normalization, ValueModel};
use crate::train::PinnProblem;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeState {
    pub dx: f64,
    pub dy: f64,
    pub dvx: f64,
    pub dvy: f64,
}

impl RelativeState {
    pub fn new(dx: f64, dy: f64, dvx: f64, dvy: f64) -> Self {
        Self { dx, dy, dvx, dvy }
    }

    /// `a - b`.
    pub fn between(a: &AgentState, b: &AgentState) -> Self {
        Self::new(a.px - b.px, a.py - b.py, a.vx - b.vx, a.vy - b.vy)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dvx, self.dvy]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Clamp onto the box `|dp| <= pos`, `|dv| <= vel` component-wise.
    pub fn clamped(self, pos: f64, vel: f64) -> Self {
        Self::new(
            self.dx.clamp(-pos, pos),
            self.dy.clamp(-pos, pos),
            self.dvx.clamp(-vel, vel),
            self.dvy.clamp(-vel, vel),
        )
    }
}

/// `[dvx, dvy, ax_i - ax_j, ay_i - ay_j]`.
pub fn relative_derivative(rs: &RelativeState, u_i: &ControlInput, u_j: &ControlInput) -> [f64; 4] {
    [rs.dvx, rs.dvy, u_i.ax - u_j.ax, u_i.ay - u_j.ay]
}

/// Distance margin `|dp| - r`.
pub fn psi(rs: &RelativeState, r: f64) -> f64 {
    rs.dx.hypot(rs.dy) - r
}

/// `psi` and its gradient over `[dx, dy, dvx, dvy]`; the gradient is zero
/// at coincident positions.
pub fn psi_with_grad(rs: &RelativeState, r: f64) -> (f64, [f64; 4]) {
    let d = rs.dx.hypot(rs.dy);
    let g = if d > 0.0 { [rs.dx / d, rs.dy / d, 0.0, 0.0] } else { [0.0; 4] };
    (d - r, g)
}

/// Joint maximiser of `<grad, f_s>` over both agents' controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyHamiltonian {
    pub value: f64,
    pub u_i: ControlInput,
    pub u_j: ControlInput,
}

pub fn safety_hamiltonian_max(grad: &[f64; 4], rs: &RelativeState, a_max: f64) -> SafetyHamiltonian {
    let sx = sign_or_zero(grad[2]);
    let sy = sign_or_zero(grad[3]);
    SafetyHamiltonian {
        value: grad[0] * rs.dvx + grad[1] * rs.dvy + 2.0 * a_max * (grad[2].abs() + grad[3].abs()),
        u_i: ControlInput::new(a_max * sx, a_max * sy),
        u_j: ControlInput::new(-a_max * sx, -a_max * sy),
    }
}

/// Training domain of the safety value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyProblem {
    pub r: f64,
    pub a_max: f64,
    pub horizon: f64,
    /// Relative position box half-width (twice the observation radius).
    pub pos_box: f64,
    /// Relative velocity box half-width (twice the per-agent bound).
    pub vel_box: f64,
}

impl Default for SafetyProblem {
    fn default() -> Self {
        Self::new(0.1, 4.0, 0.2, 0.5, 4.0)
    }
}

impl SafetyProblem {
    pub fn new(r: f64, a_max: f64, horizon: f64, r_obs: f64, v_max: f64) -> Self {
        Self {
            r,
            a_max,
            horizon,
            pos_box: 2.0 * r_obs,
            vel_box: 2.0 * v_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("r", self.r),
            ("a_max", self.a_max),
            ("horizon", self.horizon),
            ("pos_box", self.pos_box),
            ("vel_box", self.vel_box),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("safety.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl PinnProblem for SafetyProblem {
    fn input_dim(&self) -> usize {
        5
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn model_kind(&self) -> ModelKind {
        ModelKind::Safety
    }

    fn normalization(&self) -> Normalization {
        let (p, v) = (1.0 / self.pos_box, 1.0 / self.vel_box);
        Normalization {
            offset: vec![0.5 * self.horizon, 0.0, 0.0, 0.0, 0.0],
            scale: vec![2.0 / self.horizon, p, p, v, v],
        }
    }

    fn sample_input(&self, rng: &mut dyn rand::RngCore, window: (f64, f64), out: &mut [f64]) {
        out[0] = if window.0 < window.1 { rng.gen_range(window.0..=window.1) } else { window.1 };
        out[1] = rng.gen_range(-self.pos_box..=self.pos_box);
        out[2] = rng.gen_range(-self.pos_box..=self.pos_box);
        out[3] = rng.gen_range(-self.vel_box..=self.vel_box);
        out[4] = rng.gen_range(-self.vel_box..=self.vel_box);
    }

    fn residual(&self, input: &[f64], r: f64, grad_r: &[f64], d_grad: &mut [f64]) -> (f64, f64) {
        let tau = self.horizon - input[0];
        let rs = RelativeState::new(input[1], input[2], input[3], input[4]);
        let (_, gpsi) = psi_with_grad(&rs, self.r);
        let dt_v = -r + tau * grad_r[0];
        let gv = [
            gpsi[0] + tau * grad_r[1],
            gpsi[1] + tau * grad_r[2],
            gpsi[2] + tau * grad_r[3],
            gpsi[3] + tau * grad_r[4],
        ];
        let h = safety_hamiltonian_max(&gv, &rs, self.a_max).value;
        let pde = dt_v + h;
        // psi - V = -(T - t) R
        let obstacle = -tau * r;
        if pde <= obstacle {
            d_grad[0] = tau;
            d_grad[1] = tau * rs.dvx;
            d_grad[2] = tau * rs.dvy;
            d_grad[3] = tau * 2.0 * self.a_max * sign_or_zero(gv[2]);
            d_grad[4] = tau * 2.0 * self.a_max * sign_or_zero(gv[3]);
            (pde, -1.0)
        } else {
            d_grad.fill(0.0);
            (obstacle, -tau)
        }
    }
}

/// Mean absolute variational-inequality residual over raw `[t, dx, dy, dvx, dvy]` rows.
pub fn vi_residual_loss(model: &ValueModel, problem: &SafetyProblem, batch: ndarray::ArrayView2<f64>) -> Result<f64> {
    crate::train::residual_loss(model, problem, batch)
}

pub fn train_safety(
    problem: &SafetyProblem,
    opts: &crate::train::TrainOptions,
    model: ValueModel,
) -> Result<(ValueModel, crate::train::TrainingLog)> {
    problem.validate()?;
    crate::train::train(problem, opts, model)
}

/// Safety value of the pair at time `t`, on `other - ego` clamped into the
/// training box. Smaller means more dangerous.
pub fn pair_risk(model: &ValueModel, problem: &SafetyProblem, ego: &AgentState, other: &AgentState, t: f64) -> Result<f64> {
    let rel = RelativeState::between(other, ego).clamped(problem.pos_box, problem.vel_box);
    Ok(safety_value_eval(model, problem.r, t, &rel)?.value)
}
