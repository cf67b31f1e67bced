//! Value functions with exact terminal conditions.
//!
//! Both learned value functions are wrappers of the form
//! `V(t, x) = terminal(x) + (T - t) * R(t, x)`, so `V(T, x)` equals the
//! terminal function for every parameter vector.

use ndarray::{Array1, Array2, ArrayView2};

use crate::dynamics::{AugmentedObservation, EpigraphSystem};
use crate::error::{Error, Result};
use crate::nn::mlp::{EvalResult, NetParams};
use crate::safety::{psi_with_grad, RelativeState};

/// Affine input map `(raw - offset) * scale`, clamped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn new(offset: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if offset.len() != scale.len() {
            return Err(Error::Validation("offset and scale lengths differ".into()));
        }
        Ok(Self { offset, scale })
    }

    pub fn len(&self) -> usize {
        self.offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset.is_empty()
    }

    /// Normalized input and the raw-coordinate chain factor per component
    /// (zero where the clamp is active).
    pub fn apply(&self, raw: &[f64], out: &mut [f64], chain: &mut [f64]) {
        for i in 0..raw.len() {
            let x = (raw[i] - self.offset[i]) * self.scale[i];
            if x > 1.0 {
                out[i] = 1.0;
                chain[i] = 0.0;
            } else if x < -1.0 {
                out[i] = -1.0;
                chain[i] = 0.0;
            } else {
                out[i] = x;
                chain[i] = self.scale[i];
            }
        }
    }
}

/// Which wrapper a checkpointed network belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Auxiliary epigraph value; input `[t, z, state...]`.
    Epigraph,
    /// Pairwise safety value; input `[t, dx, dy, dvx, dvy]`.
    Safety,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Epigraph => 0,
            ModelKind::Safety => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Epigraph),
            1 => Some(ModelKind::Safety),
            _ => None,
        }
    }
}

/// A residual network together with everything needed to evaluate its
/// wrapper: input normalization and the horizon `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueModel {
    pub kind: ModelKind,
    pub params: NetParams,
    pub norm: Normalization,
    pub horizon: f64,
}

/// Raw-coordinate values and gradients of the residual network `R`.
pub struct ResidualBatch {
    pub values: Array1<f64>,
    pub grads: Array2<f64>,
}

impl ValueModel {
    pub fn new(kind: ModelKind, params: NetParams, norm: Normalization, horizon: f64) -> Result<Self> {
        if norm.len() != params.arch().input_dim() {
            return Err(Error::Validation(format!(
                "normalization covers {} inputs, network takes {}",
                norm.len(),
                params.arch().input_dim()
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::Validation(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            kind,
            params,
            norm,
            horizon,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.norm.len()
    }

    /// Normalize a batch of raw inputs; returns the network input and the
    /// per-component chain factors.
    pub fn normalize(&self, raw: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut x = Array2::zeros(raw.raw_dim());
        let mut chain = Array2::zeros(raw.raw_dim());
        for ((r, mut xo), mut co) in raw.rows().into_iter().zip(x.rows_mut()).zip(chain.rows_mut()) {
            self.norm.apply(
                r.as_slice().expect("contiguous"),
                xo.as_slice_mut().expect("contiguous"),
                co.as_slice_mut().expect("contiguous"),
            );
        }
        (x, chain)
    }

    /// `R` and its gradient with respect to the raw inputs.
    pub fn residual_batch(&self, raw: ArrayView2<f64>) -> Result<ResidualBatch> {
        let (x, chain) = self.normalize(raw);
        let (values, mut grads) = self.params.forward_with_input_grad(x.view())?;
        grads *= &chain;
        Ok(ResidualBatch { values, grads })
    }

    pub fn residual_values(&self, raw: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (x, _) = self.normalize(raw);
        self.params.forward_values(x.view())
    }

    pub fn residual(&self, raw: &[f64]) -> Result<EvalResult> {
        let view = ArrayView2::from_shape((1, raw.len()), raw).map_err(|e| Error::Validation(e.to_string()))?;
        let b = self.residual_batch(view)?;
        Ok(EvalResult {
            value: b.values[0],
            input_gradient: b.grads.row(0).to_vec(),
        })
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Validation(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Terminal branch of the epigraph wrapper: `max(phi - z, g)` with its
/// gradient over `[z, state...]`. Ties resolve to the cost branch.
pub fn epigraph_boundary<S: EpigraphSystem + ?Sized>(
    sys: &S,
    state: &[f64],
    z: f64,
    grad_z_state: &mut [f64],
) -> (f64, f64, bool) {
    let n = sys.state_dim();
    let mut g_phi = vec![0.0; n];
    let mut g_con = vec![0.0; n];
    let phi = sys.terminal_cost(state, &mut g_phi);
    let g = sys.constraint(state, &mut g_con);
    let cost_active = phi - z >= g;
    if cost_active {
        grad_z_state[0] = -1.0;
        grad_z_state[1..].copy_from_slice(&g_phi);
        (phi - z, g, true)
    } else {
        grad_z_state[0] = 0.0;
        grad_z_state[1..].copy_from_slice(&g_con);
        (g, g, false)
    }
}

/// Auxiliary value `max(phi - z, g) + (T - t) R(t, z, state)` and its
/// gradient over `[t, z, state...]`.
pub fn aux_value_eval<S: EpigraphSystem + ?Sized>(
    model: &ValueModel,
    sys: &S,
    t: f64,
    state: &[f64],
    z: f64,
) -> Result<EvalResult> {
    model.check_time(t)?;
    let n = sys.state_dim();
    if state.len() != n || model.input_dim() != n + 2 {
        return Err(Error::Validation(format!(
            "state length {} does not fit a model with {} inputs",
            state.len(),
            model.input_dim()
        )));
    }
    let mut input = Vec::with_capacity(n + 2);
    input.push(t);
    input.push(z);
    input.extend_from_slice(state);
    let r = model.residual(&input)?;
    let mut gb = vec![0.0; n + 1];
    let (b, _, _) = epigraph_boundary(sys, state, z, &mut gb);
    let tau = model.horizon - t;
    let mut grad = Vec::with_capacity(n + 2);
    grad.push(-r.value + tau * r.input_gradient[0]);
    for i in 0..=n {
        grad.push(gb[i] + tau * r.input_gradient[i + 1]);
    }
    Ok(EvalResult {
        value: b + tau * r.value,
        input_gradient: grad,
    })
}

/// Value-only variant of [`aux_value_eval`].
pub fn aux_value<S: EpigraphSystem + ?Sized>(
    model: &ValueModel,
    sys: &S,
    t: f64,
    state: &[f64],
    z: f64,
) -> Result<f64> {
    model.check_time(t)?;
    let mut input = Vec::with_capacity(state.len() + 2);
    input.push(t);
    input.push(z);
    input.extend_from_slice(state);
    let view = ArrayView2::from_shape((1, input.len()), &input[..]).map_err(|e| Error::Validation(e.to_string()))?;
    let r = model.residual_values(view)?[0];
    let mut gb = vec![0.0; state.len() + 1];
    let (b, _, _) = epigraph_boundary(sys, state, z, &mut gb);
    Ok(b + (model.horizon - t) * r)
}

/// [`aux_value_eval`] on an augmented observation of the navigation problem.
pub fn aux_value_eval_obs<S: EpigraphSystem + ?Sized>(
    model: &ValueModel,
    sys: &S,
    t: f64,
    aug: &AugmentedObservation,
) -> Result<EvalResult> {
    aux_value_eval(model, sys, t, &aug.obs.flatten(), aug.z)
}

/// Safety value `psi(x) + (T - t) R(t, x)` and its gradient over
/// `[t, dx, dy, dvx, dvy]`.
pub fn safety_value_eval(model: &ValueModel, r: f64, t: f64, rel: &RelativeState) -> Result<EvalResult> {
    model.check_time(t)?;
    if model.input_dim() != 5 {
        return Err(Error::Validation(format!(
            "safety model must take 5 inputs, this one takes {}",
            model.input_dim()
        )));
    }
    let input = [t, rel.dx, rel.dy, rel.dvx, rel.dvy];
    let res = model.residual(&input)?;
    let (psi, gpsi) = psi_with_grad(rel, r);
    let tau = model.horizon - t;
    let mut grad = vec![-res.value + tau * res.input_gradient[0]];
    for i in 0..4 {
        grad.push(gpsi[i] + tau * res.input_gradient[i + 1]);
    }
    Ok(EvalResult {
        value: psi + tau * res.value,
        input_gradient: grad,
    })
}
