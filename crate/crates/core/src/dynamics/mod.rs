//! Planar double-integrator agents, fixed-layout local observations, and the
//! cost / constraint functions shared by training, the grid oracle and the
//! simulator.
//!
//! Flattened observation layout: `n + 1` slots of
//! `[px, py, vx, vy, gx, gy]`, ego first, neighbours in ranked order.

mod system;

pub(crate) use system::sign_or_zero;
pub use system::{default_z_max, EpigraphSystem, LineSystem, SwarmSystem};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalars per observation slot: position, velocity, goal.
pub const SLOT_WIDTH: usize = 6;

/// Constraint value reported when fewer than two real agents are in view.
pub const NO_CONSTRAINT: f64 = -10.0;

/// Virtual-padding agents sit this many domain half-widths from the origin.
pub const VIRTUAL_OFFSET: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
}

impl AgentState {
    pub fn new(px: f64, py: f64, vx: f64, vy: f64) -> Self {
        Self { px, py, vx, vy }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.px, self.py, self.vx, self.vy]
    }

    pub fn distance_to(&self, other: &AgentState) -> f64 {
        (self.px - other.px).hypot(self.py - other.py)
    }

    pub fn goal_distance(&self, goal: &GoalSpec) -> f64 {
        (self.px - goal.gx).hypot(self.py - goal.gy)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub ax: f64,
    pub ay: f64,
}

impl ControlInput {
    pub fn new(ax: f64, ay: f64) -> Self {
        Self { ax, ay }
    }

    /// Component-wise projection onto `[-a_max, a_max]^2`.
    pub fn clamped(self, a_max: f64) -> Self {
        Self::new(self.ax.clamp(-a_max, a_max), self.ay.clamp(-a_max, a_max))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub gx: f64,
    pub gy: f64,
}

impl GoalSpec {
    pub fn new(gx: f64, gy: f64) -> Self {
        Self { gx, gy }
    }
}

/// Box limits of the navigation problem. The arena is the square
/// `[-half_width, half_width]^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Limits {
    pub half_width: f64,
    pub v_max: f64,
    pub a_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            half_width: 1.0,
            v_max: 4.0,
            a_max: 4.0,
        }
    }
}

impl Limits {
    pub fn contains_position(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.half_width && y.abs() <= self.half_width
    }

    pub fn diagonal(&self) -> f64 {
        2.0 * self.half_width * std::f64::consts::SQRT_2
    }

    /// Position used for padding slots.
    pub fn far_point(&self) -> f64 {
        VIRTUAL_OFFSET * self.half_width
    }

    pub fn clamp_velocity(&self, s: AgentState) -> (AgentState, bool) {
        let vx = s.vx.clamp(-self.v_max, self.v_max);
        let vy = s.vy.clamp(-self.v_max, self.v_max);
        let clamped = vx != s.vx || vy != s.vy;
        (AgentState { vx, vy, ..s }, clamped)
    }
}

/// One agent slot of an observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slot {
    pub state: AgentState,
    pub goal: GoalSpec,
    pub is_virtual: bool,
}

impl Slot {
    pub fn real(state: AgentState, goal: GoalSpec) -> Self {
        Self {
            state,
            goal,
            is_virtual: false,
        }
    }

    /// Padding slot: parked far away, at rest, sitting on its own goal.
    pub fn virtual_slot(limits: &Limits) -> Self {
        let far = limits.far_point();
        Self {
            state: AgentState::new(far, far, 0.0, 0.0),
            goal: GoalSpec::new(far, far),
            is_virtual: true,
        }
    }
}

/// Fixed-layout local view: ego followed by exactly `n` neighbour slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    slots: Vec<Slot>,
}

impl Observation {
    pub fn new(slots: Vec<Slot>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::Validation("observation needs an ego slot".into()));
        }
        if slots[0].is_virtual {
            return Err(Error::Validation("ego slot cannot be virtual".into()));
        }
        Ok(Self { slots })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn ego(&self) -> &Slot {
        &self.slots[0]
    }

    pub fn neighbours(&self) -> &[Slot] {
        &self.slots[1..]
    }

    pub fn n_neighbours(&self) -> usize {
        self.slots.len() - 1
    }

    pub fn real_count(&self) -> usize {
        self.slots.iter().filter(|s| !s.is_virtual).count()
    }

    pub fn flat_len(&self) -> usize {
        self.slots.len() * SLOT_WIDTH
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for s in &self.slots {
            out.extend_from_slice(&[
                s.state.px, s.state.py, s.state.vx, s.state.vy, s.goal.gx, s.goal.gy,
            ]);
        }
        out
    }

    /// Inverse of [`Observation::flatten`]; slots beyond the arena are
    /// recognised as padding.
    pub fn from_flat(flat: &[f64], limits: &Limits) -> Result<Self> {
        if flat.is_empty() || flat.len() % SLOT_WIDTH != 0 {
            return Err(Error::Validation(format!(
                "flattened observation length {} is not a positive multiple of {SLOT_WIDTH}",
                flat.len()
            )));
        }
        let slots = flat
            .chunks(SLOT_WIDTH)
            .map(|c| Slot {
                state: AgentState::new(c[0], c[1], c[2], c[3]),
                goal: GoalSpec::new(c[4], c[5]),
                is_virtual: is_virtual_position(c[0], c[1], limits),
            })
            .collect();
        Self::new(slots)
    }
}

pub(crate) fn is_virtual_position(x: f64, y: f64, limits: &Limits) -> bool {
    let cut = 0.5 * (1.0 + VIRTUAL_OFFSET) * limits.half_width;
    x.abs() > cut || y.abs() > cut
}

/// Observation plus the remaining cost budget `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedObservation {
    pub obs: Observation,
    pub z: f64,
}

impl AugmentedObservation {
    pub fn new(obs: Observation, z: f64) -> Result<Self> {
        if !(z >= 0.0) {
            return Err(Error::Validation(format!("budget z must be non-negative, got {z}")));
        }
        Ok(Self { obs, z })
    }
}

/// Joint state of the whole swarm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agents: Vec<AgentState>,
    pub goals: Vec<GoalSpec>,
    pub time: f64,
}

impl WorldState {
    pub fn new(agents: Vec<AgentState>, goals: Vec<GoalSpec>) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::Validation("world needs at least one agent".into()));
        }
        if agents.len() != goals.len() {
            return Err(Error::Validation(format!(
                "{} agents but {} goals",
                agents.len(),
                goals.len()
            )));
        }
        Ok(Self {
            agents,
            goals,
            time: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }
}

/// Neighbour slot selector used by [`build_observation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeighbourSlot {
    Agent(usize),
    Pad,
}

impl NeighbourSlot {
    pub fn index(self) -> Option<usize> {
        match self {
            NeighbourSlot::Agent(i) => Some(i),
            NeighbourSlot::Pad => None,
        }
    }
}

/// `[vx, vy, ax, ay]` for a planar double integrator.
pub fn agent_derivative(s: &AgentState, u: &ControlInput) -> [f64; 4] {
    [s.vx, s.vy, u.ax, u.ay]
}

/// `r - (min pairwise distance among real agents)`; positive inside the
/// failure set. Returns [`NO_CONSTRAINT`] with fewer than two real agents.
pub fn constraint_g(obs: &Observation, r: f64) -> f64 {
    let real: Vec<&AgentState> = obs
        .slots
        .iter()
        .filter(|s| !s.is_virtual)
        .map(|s| &s.state)
        .collect();
    if real.len() < 2 {
        return NO_CONSTRAINT;
    }
    let mut min_d = f64::INFINITY;
    for i in 0..real.len() {
        for j in (i + 1)..real.len() {
            min_d = min_d.min(real[i].distance_to(real[j]));
        }
    }
    r - min_d
}

/// Sum of goal distances over the ego and every real neighbour.
pub fn running_cost_l(obs: &Observation) -> f64 {
    order_free_sum(
        obs.slots
            .iter()
            .filter(|s| !s.is_virtual)
            .map(|s| s.state.goal_distance(&s.goal))
            .collect(),
    )
}

/// Sum in ascending order, so slot permutations give bit-identical totals.
pub(crate) fn order_free_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(|a, b| a.total_cmp(b));
    terms.iter().sum()
}

/// Terminal cost; same aggregation as the running cost.
pub fn terminal_cost_phi(obs: &Observation) -> f64 {
    running_cost_l(obs)
}

/// Time derivative of the augmented observation in flattened layout
/// (`[vx, vy, ax, ay, 0, 0]` per slot, then `z' = -l`).
pub fn augmented_derivative(
    aug: &AugmentedObservation,
    u_joint: &[ControlInput],
) -> Result<Vec<f64>> {
    let slots = aug.obs.slots();
    if u_joint.len() != slots.len() {
        return Err(Error::Validation(format!(
            "joint control has {} entries, observation has {} slots",
            u_joint.len(),
            slots.len()
        )));
    }
    let mut out = Vec::with_capacity(aug.obs.flat_len() + 1);
    for (slot, u) in slots.iter().zip(u_joint) {
        if slot.is_virtual {
            out.extend_from_slice(&[0.0; SLOT_WIDTH]);
        } else {
            out.extend_from_slice(&agent_derivative(&slot.state, u));
            out.extend_from_slice(&[0.0, 0.0]);
        }
    }
    out.push(-running_cost_l(&aug.obs));
    Ok(out)
}

/// Assemble the ego-centred observation. `neighbours` must hold exactly the
/// configured number of entries; `Pad` entries become virtual slots.
pub fn build_observation(
    world: &WorldState,
    ego_index: usize,
    neighbours: &[NeighbourSlot],
    limits: &Limits,
) -> Result<Observation> {
    if ego_index >= world.len() {
        return Err(Error::Validation(format!(
            "ego index {ego_index} out of range for {} agents",
            world.len()
        )));
    }
    let mut seen = vec![false; world.len()];
    seen[ego_index] = true;
    let mut slots = Vec::with_capacity(neighbours.len() + 1);
    slots.push(Slot::real(world.agents[ego_index], world.goals[ego_index]));
    for nb in neighbours {
        match *nb {
            NeighbourSlot::Pad => slots.push(Slot::virtual_slot(limits)),
            NeighbourSlot::Agent(j) => {
                if j >= world.len() {
                    return Err(Error::Validation(format!(
                        "neighbour index {j} out of range for {} agents",
                        world.len()
                    )));
                }
                if seen[j] {
                    return Err(Error::Validation(format!(
                        "neighbour index {j} is duplicated or equals the ego"
                    )));
                }
                seen[j] = true;
                slots.push(Slot::real(world.agents[j], world.goals[j]));
            }
        }
    }
    Observation::new(slots)
}

/// Classical fourth-order Runge-Kutta step of `x' = f(x)`.
pub fn rk4_step<F>(f: F, x: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(dt > 0.0) {
        return Err(Error::Validation(format!("dt must be positive, got {dt}")));
    }
    let eval = |y: &[f64]| -> Result<Vec<f64>> {
        let d = f(y);
        if d.len() != x.len() {
            return Err(Error::Validation(format!(
                "derivative has length {}, state has {}",
                d.len(),
                x.len()
            )));
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite derivative in rk4_step".into()));
        }
        Ok(d)
    };
    let axpy = |a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };
    let k1 = eval(x)?;
    let k2 = eval(&axpy(0.5 * dt, &k1))?;
    let k3 = eval(&axpy(0.5 * dt, &k2))?;
    let k4 = eval(&axpy(dt, &k3))?;
    Ok((0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}
