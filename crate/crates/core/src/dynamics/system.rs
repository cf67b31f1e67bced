//! Epigraph-form control problems over flat state vectors.
//!
//! A system supplies the terminal cost, constraint, running cost and
//! control-affine dynamics of the augmented problem; trainers, the policy
//! and the grid oracle work against this trait only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{is_virtual_position, order_free_sum, Limits, NO_CONSTRAINT, SLOT_WIDTH, VIRTUAL_OFFSET};

pub trait EpigraphSystem: Send + Sync {
    /// Length of the (non-augmented) state vector.
    fn state_dim(&self) -> usize;

    fn control_dim(&self) -> usize;

    /// Upper end of the budget range `[0, z_max]`.
    fn z_max(&self) -> f64;

    /// Terminal cost; writes its (sub)gradient into `grad`.
    fn terminal_cost(&self, s: &[f64], grad: &mut [f64]) -> f64;

    /// Constraint function, positive inside the failure set; writes its
    /// (sub)gradient into `grad`.
    fn constraint(&self, s: &[f64], grad: &mut [f64]) -> f64;

    fn running_cost(&self, s: &[f64]) -> f64;

    /// State part of the augmented dynamics.
    fn dynamics(&self, s: &[f64], u: &[f64], out: &mut [f64]);

    /// Per-component control bound (box `[-b, b]`).
    fn control_bound(&self) -> f64;

    /// Minimiser of `<grad, f(s, u)>` over the control box. Zero gradient
    /// components map to zero control.
    fn optimal_control(&self, s: &[f64], grad: &[f64]) -> Vec<f64>;

    /// Uniform collocation draw of a state.
    fn sample_state(&self, rng: &mut dyn rand::RngCore, out: &mut [f64]);

    /// Affine map `(raw - offset) * scale` into `[-1, 1]` per state component.
    fn state_normalization(&self) -> (Vec<f64>, Vec<f64>);
}

pub(crate) fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The decentralized navigation problem seen from one agent: ego plus
/// `n_neighbours` slots, each a double integrator with a fixed goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwarmSystem {
    pub limits: Limits,
    pub r: f64,
    pub n_neighbours: usize,
    pub z_max: f64,
    /// Probability that a neighbour slot is drawn as padding during sampling.
    pub virtual_slot_prob: f64,
}

impl SwarmSystem {
    pub fn new(limits: Limits, r: f64, n_neighbours: usize, horizon: f64) -> Self {
        let z_max = default_z_max(&limits, n_neighbours, horizon);
        Self {
            limits,
            r,
            n_neighbours,
            z_max,
            virtual_slot_prob: 0.0,
        }
    }

    pub fn slots(&self) -> usize {
        self.n_neighbours + 1
    }

    fn slot_is_virtual(&self, s: &[f64], k: usize) -> bool {
        let o = k * SLOT_WIDTH;
        is_virtual_position(s[o], s[o + 1], &self.limits)
    }
}

/// `(n + 1) * diagonal * (1 + T)`: bounds any reachable cost.
pub fn default_z_max(limits: &Limits, n_neighbours: usize, horizon: f64) -> f64 {
    (n_neighbours as f64 + 1.0) * limits.diagonal() * (1.0 + horizon)
}

impl EpigraphSystem for SwarmSystem {
    fn state_dim(&self) -> usize {
        self.slots() * SLOT_WIDTH
    }

    fn control_dim(&self) -> usize {
        self.slots() * 2
    }

    fn z_max(&self) -> f64 {
        self.z_max
    }

    fn terminal_cost(&self, s: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let mut terms = Vec::with_capacity(self.slots());
        for k in 0..self.slots() {
            if self.slot_is_virtual(s, k) {
                continue;
            }
            let o = k * SLOT_WIDTH;
            let dx = s[o] - s[o + 4];
            let dy = s[o + 1] - s[o + 5];
            let d = dx.hypot(dy);
            terms.push(d);
            if d > 0.0 {
                grad[o] = dx / d;
                grad[o + 1] = dy / d;
                grad[o + 4] = -dx / d;
                grad[o + 5] = -dy / d;
            }
        }
        order_free_sum(terms)
    }

    fn constraint(&self, s: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let real: Vec<usize> = (0..self.slots()).filter(|&k| !self.slot_is_virtual(s, k)).collect();
        if real.len() < 2 {
            return NO_CONSTRAINT;
        }
        let mut best = (f64::INFINITY, 0, 0);
        for (a, &i) in real.iter().enumerate() {
            for &j in &real[a + 1..] {
                let (oi, oj) = (i * SLOT_WIDTH, j * SLOT_WIDTH);
                let d = (s[oi] - s[oj]).hypot(s[oi + 1] - s[oj + 1]);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (d, i, j) = best;
        if d > 0.0 {
            let (oi, oj) = (i * SLOT_WIDTH, j * SLOT_WIDTH);
            let ux = (s[oi] - s[oj]) / d;
            let uy = (s[oi + 1] - s[oj + 1]) / d;
            grad[oi] = -ux;
            grad[oi + 1] = -uy;
            grad[oj] = ux;
            grad[oj + 1] = uy;
        }
        self.r - d
    }

    fn running_cost(&self, s: &[f64]) -> f64 {
        order_free_sum(
            (0..self.slots())
                .filter(|&k| !self.slot_is_virtual(s, k))
                .map(|k| {
                    let o = k * SLOT_WIDTH;
                    (s[o] - s[o + 4]).hypot(s[o + 1] - s[o + 5])
                })
                .collect(),
        )
    }

    fn dynamics(&self, s: &[f64], u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for k in 0..self.slots() {
            if self.slot_is_virtual(s, k) {
                continue;
            }
            let o = k * SLOT_WIDTH;
            out[o] = s[o + 2];
            out[o + 1] = s[o + 3];
            out[o + 2] = u[2 * k];
            out[o + 3] = u[2 * k + 1];
        }
    }

    fn control_bound(&self) -> f64 {
        self.limits.a_max
    }

    fn optimal_control(&self, s: &[f64], grad: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.control_dim()];
        for k in 0..self.slots() {
            if self.slot_is_virtual(s, k) {
                continue;
            }
            let o = k * SLOT_WIDTH;
            u[2 * k] = -self.limits.a_max * sign_or_zero(grad[o + 2]);
            u[2 * k + 1] = -self.limits.a_max * sign_or_zero(grad[o + 3]);
        }
        u
    }

    fn sample_state(&self, rng: &mut dyn rand::RngCore, out: &mut [f64]) {
        let hw = self.limits.half_width;
        let vm = self.limits.v_max;
        for k in 0..self.slots() {
            let o = k * SLOT_WIDTH;
            let pad = k > 0 && self.virtual_slot_prob > 0.0 && rng.gen::<f64>() < self.virtual_slot_prob;
            if pad {
                let far = VIRTUAL_OFFSET * hw;
                out[o..o + SLOT_WIDTH].copy_from_slice(&[far, far, 0.0, 0.0, far, far]);
            } else {
                out[o] = rng.gen_range(-hw..=hw);
                out[o + 1] = rng.gen_range(-hw..=hw);
                out[o + 2] = rng.gen_range(-vm..=vm);
                out[o + 3] = rng.gen_range(-vm..=vm);
                out[o + 4] = rng.gen_range(-hw..=hw);
                out[o + 5] = rng.gen_range(-hw..=hw);
            }
        }
    }

    fn state_normalization(&self) -> (Vec<f64>, Vec<f64>) {
        let p = 1.0 / self.limits.half_width;
        let v = 1.0 / self.limits.v_max;
        let scale = (0..self.slots()).flat_map(|_| [p, p, v, v, p, p]).collect();
        (vec![0.0; self.state_dim()], scale)
    }
}

/// Single agent on a line: state `[x, v]`, running and terminal cost
/// `|x - goal|`, and an interval obstacle `[c - w, c + w]`.
///
/// The default `z_max` bounds the cost over a 0.5 s horizon:
/// `(1 + T) * 2 * x_half`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineSystem {
    pub x_half: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub goal: f64,
    pub obstacle_center: f64,
    pub obstacle_half_width: f64,
    pub z_max: f64,
}

impl Default for LineSystem {
    fn default() -> Self {
        Self {
            x_half: 1.0,
            v_max: 1.0,
            a_max: 1.0,
            goal: 0.6,
            obstacle_center: 0.0,
            obstacle_half_width: 0.2,
            z_max: 3.0,
        }
    }
}

impl EpigraphSystem for LineSystem {
    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn z_max(&self) -> f64 {
        self.z_max
    }

    fn terminal_cost(&self, s: &[f64], grad: &mut [f64]) -> f64 {
        let d = s[0] - self.goal;
        grad[0] = sign_or_zero(d);
        grad[1] = 0.0;
        d.abs()
    }

    fn constraint(&self, s: &[f64], grad: &mut [f64]) -> f64 {
        let d = s[0] - self.obstacle_center;
        grad[0] = -sign_or_zero(d);
        grad[1] = 0.0;
        self.obstacle_half_width - d.abs()
    }

    fn running_cost(&self, s: &[f64]) -> f64 {
        (s[0] - self.goal).abs()
    }

    fn dynamics(&self, s: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = s[1];
        out[1] = u[0];
    }

    fn control_bound(&self) -> f64 {
        self.a_max
    }

    fn optimal_control(&self, _s: &[f64], grad: &[f64]) -> Vec<f64> {
        vec![-self.a_max * sign_or_zero(grad[1])]
    }

    fn sample_state(&self, rng: &mut dyn rand::RngCore, out: &mut [f64]) {
        out[0] = rng.gen_range(-self.x_half..=self.x_half);
        out[1] = rng.gen_range(-self.v_max..=self.v_max);
    }

    fn state_normalization(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0, 0.0], vec![1.0 / self.x_half, 1.0 / self.v_max])
    }
}
