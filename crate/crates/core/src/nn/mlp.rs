//! Sine-activated multilayer perceptron with exact input gradients and
//! parameter gradients of losses that depend on those input gradients.
//!
//! Hidden layer `l` computes `h_l = sin(omega0 * (W_l h_{l-1} + b_l))`; the
//! output layer is linear with a single unit. Parameters live in one flat
//! buffer, layer by layer, each layer stored as its row-major weight matrix
//! (`out x in`) followed by its bias vector.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per gradient shard. Fixed so that the reduction order, and hence
/// the floating point result, does not depend on the worker count.
pub const SHARD_SIZE: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    /// Layer widths from input to output; the last entry must be 1.
    pub sizes: Vec<usize>,
    /// Sine frequency scale.
    pub omega0: f64,
}

impl Arch {
    pub fn new(input: usize, hidden: &[usize], omega0: f64) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self { sizes, omega0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 3 {
            return Err(Error::Validation(
                "architecture needs an input, at least one hidden layer and an output".into(),
            ));
        }
        if self.sizes.iter().any(|&s| s == 0) {
            return Err(Error::Validation(format!("zero-sized layer in {:?}", self.sizes)));
        }
        if *self.sizes.last().unwrap() != 1 {
            return Err(Error::Validation("output layer must have exactly one unit".into()));
        }
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return Err(Error::Validation(format!("omega0 must be positive, got {}", self.omega0)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// `(weight offset, bias offset)` of weight layer `l` (0-based).
    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.sizes.windows(2).take(l) {
            off += w[1] * w[0] + w[1];
        }
        (off, off + self.sizes[l + 1] * self.sizes[l])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    arch: Arch,
    data: Vec<f64>,
}

/// Network value and its gradient with respect to the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub value: f64,
    pub input_gradient: Vec<f64>,
}

/// Per-sample loss contribution and its adjoints with respect to the network
/// value and the network input gradient.
pub struct SampleLoss {
    pub loss: f64,
    pub d_value: f64,
    pub d_input_grad: Vec<f64>,
}

struct ForwardCache {
    /// `h[0]` is the input batch; `h[l]` the output of hidden layer `l`.
    h: Vec<Array2<f64>>,
    /// `cos(omega0 * s_l)` for each hidden layer, indexed like `h`.
    c: Vec<Array2<f64>>,
    value: Array1<f64>,
}

struct BackwardCache {
    /// `g[l]` = d value / d h_l; `g[0]` is the input gradient.
    g: Vec<Array2<f64>>,
    /// `e[l]` = d value / d s_l for hidden layers.
    e: Vec<Array2<f64>>,
}

impl NetParams {
    /// SIREN-style initialization: first layer `U(-1/fan_in, 1/fan_in)`,
    /// deeper layers `U(-sqrt(6/fan_in)/omega0, sqrt(6/fan_in)/omega0)`,
    /// biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(seed: u64, arch: Arch) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(arch.param_count());
        for (l, w) in arch.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = Self::weight_bound(&arch, l);
            for _ in 0..fan_in * fan_out {
                data.push(rng.gen_range(-bound..=bound));
            }
            let b_bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_out {
                data.push(rng.gen_range(-b_bound..=b_bound));
            }
        }
        Ok(Self { arch, data })
    }

    /// Initialization bound for weights of layer `l`.
    pub fn weight_bound(arch: &Arch, l: usize) -> f64 {
        let fan_in = arch.sizes[l] as f64;
        if l == 0 {
            1.0 / fan_in
        } else {
            (6.0 / fan_in).sqrt() / arch.omega0
        }
    }

    pub fn from_parts(arch: Arch, data: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if data.len() != arch.param_count() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                data.len()
            )));
        }
        Ok(Self { arch, data })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Weight matrix (`out x in`) of layer `l`.
    pub fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w, b) = self.arch.offsets(l);
        ArrayView2::from_shape((self.arch.sizes[l + 1], self.arch.sizes[l]), &self.data[w..b])
            .expect("layer shape")
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (_, b) = self.arch.offsets(l);
        ArrayView1::from(&self.data[b..b + self.arch.sizes[l + 1]])
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.arch.input_dim() {
            return Err(Error::Validation(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.arch.input_dim()
            )));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite network input at sample {}",
                pos / x.ncols()
            )));
        }
        Ok(())
    }

    fn forward(&self, x: ArrayView2<f64>) -> ForwardCache {
        let depth = self.arch.depth();
        let w0 = self.arch.omega0;
        let mut h = Vec::with_capacity(depth);
        let mut c = Vec::with_capacity(depth);
        h.push(x.to_owned());
        c.push(Array2::zeros((0, 0)));
        for l in 0..depth - 1 {
            let mut s = h[l].dot(&self.weights(l).t());
            s += &self.bias(l);
            s.mapv_inplace(|v| w0 * v);
            c.push(s.mapv(f64::cos));
            s.mapv_inplace(f64::sin);
            h.push(s);
        }
        let last = depth - 1;
        let w_out = self.weights(last);
        let mut value = h[last].dot(&w_out.row(0));
        value += self.bias(last)[0];
        ForwardCache { h, c, value }
    }

    fn backward(&self, fwd: &ForwardCache) -> BackwardCache {
        let depth = self.arch.depth();
        let w0 = self.arch.omega0;
        let batch = fwd.value.len();
        let mut g = vec![Array2::zeros((0, 0)); depth];
        let mut e = vec![Array2::zeros((0, 0)); depth];
        let w_out = self.weights(depth - 1);
        g[depth - 1] = w_out
            .row(0)
            .broadcast((batch, w_out.ncols()))
            .expect("broadcast")
            .to_owned();
        for l in (1..depth).rev() {
            let mut el = &g[l] * &fwd.c[l];
            el.mapv_inplace(|v| w0 * v);
            g[l - 1] = el.dot(&self.weights(l - 1));
            e[l] = el;
        }
        BackwardCache { g, e }
    }

    /// Network values for a batch of inputs (one sample per row).
    pub fn forward_values(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_input(&x)?;
        Ok(self.forward(x).value)
    }

    /// Values and exact input gradients for a batch of inputs.
    pub fn forward_with_input_grad(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_input(&x)?;
        let fwd = self.forward(x);
        let mut bwd = self.backward(&fwd);
        let grad = std::mem::take(&mut bwd.g[0]);
        Ok((fwd.value, grad))
    }

    /// Single-point convenience wrapper around [`NetParams::forward_with_input_grad`].
    pub fn eval(&self, x: &[f64]) -> Result<EvalResult> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Validation(e.to_string()))?;
        let (v, g) = self.forward_with_input_grad(view)?;
        Ok(EvalResult {
            value: v[0],
            input_gradient: g.row(0).to_vec(),
        })
    }

    /// Mean loss over the batch and its exact parameter gradient.
    ///
    /// `loss(i, value, input_grad)` returns the per-sample loss and its
    /// adjoints; the gradient is propagated through both the forward pass and
    /// the input-gradient pass.
    pub fn loss_param_gradient<F>(&self, x: ArrayView2<f64>, loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: Fn(usize, f64, &[f64]) -> SampleLoss + Sync,
    {
        self.check_input(&x)?;
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Validation("empty batch".into()));
        }
        let starts: Vec<usize> = (0..n).step_by(SHARD_SIZE).collect();
        let shards: Vec<Result<(f64, Vec<f64>)>> = starts
            .par_iter()
            .map(|&start| {
                let end = (start + SHARD_SIZE).min(n);
                self.shard_gradient(x.slice(ndarray::s![start..end, ..]), start, &loss)
            })
            .collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; self.data.len()];
        for shard in shards {
            let (l, g) = shard?;
            total += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let inv = 1.0 / n as f64;
        grad.iter_mut().for_each(|v| *v *= inv);
        Ok((total * inv, grad))
    }

    fn shard_gradient<F>(&self, x: ArrayView2<f64>, offset: usize, loss: &F) -> Result<(f64, Vec<f64>)>
    where
        F: Fn(usize, f64, &[f64]) -> SampleLoss,
    {
        let depth = self.arch.depth();
        let w0 = self.arch.omega0;
        let fwd = self.forward(x);
        let bwd = self.backward(&fwd);
        let batch = x.nrows();
        let d_in = self.arch.input_dim();

        let mut total = 0.0;
        let mut ybar = Array1::<f64>::zeros(batch);
        let mut g0bar = Array2::<f64>::zeros((batch, d_in));
        for b in 0..batch {
            let gi = bwd.g[0].row(b);
            let gi = gi.as_slice().expect("contiguous row");
            let sample = loss(offset + b, fwd.value[b], gi);
            if !sample.loss.is_finite()
                || !sample.d_value.is_finite()
                || sample.d_input_grad.iter().any(|v| !v.is_finite())
            {
                return Err(Error::Numerical(format!(
                    "non-finite loss or adjoint at batch index {} (value {}, loss {})",
                    offset + b,
                    fwd.value[b],
                    sample.loss
                )));
            }
            total += sample.loss;
            ybar[b] = sample.d_value;
            g0bar.row_mut(b).assign(&ArrayView1::from(&sample.d_input_grad[..]));
        }

        let mut grad = vec![0.0; self.data.len()];
        // Second-order contributions to d loss / d s_l, per hidden layer.
        let mut sbar2: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); depth];

        // Reverse through the input-gradient pass: g_{l-1} = e_l W_l,
        // e_l = omega0 * g_l * cos(omega0 s_l), g_{depth-1} = w_out.
        let mut ebar = g0bar.dot(&self.weights(0).t());
        self.add_weight_grad(&mut grad, 0, &bwd.e[1].t().dot(&g0bar));
        for l in 1..depth {
            let mut gbar = &ebar * &fwd.c[l];
            gbar.mapv_inplace(|v| w0 * v);
            let mut s2 = &ebar * &bwd.g[l];
            s2 *= &fwd.h[l];
            s2.mapv_inplace(|v| -w0 * w0 * v);
            sbar2[l] = s2;
            if l < depth - 1 {
                self.add_weight_grad(&mut grad, l, &bwd.e[l + 1].t().dot(&gbar));
                ebar = gbar.dot(&self.weights(l).t());
            } else {
                let colsum = gbar.sum_axis(Axis(0));
                self.add_weight_grad(&mut grad, l, &colsum.insert_axis(Axis(0)));
            }
        }

        // Reverse through the forward pass.
        let last = depth - 1;
        let w_out = self.weights(last);
        let mut hbar = ybar
            .view()
            .insert_axis(Axis(1))
            .dot(&w_out.row(0).insert_axis(Axis(0)));
        self.add_weight_grad(
            &mut grad,
            last,
            &ybar.dot(&fwd.h[last]).insert_axis(Axis(0)),
        );
        self.add_bias_grad(&mut grad, last, &Array1::from_elem(1, ybar.sum()));
        for l in (1..depth).rev() {
            let mut sbar = &hbar * &fwd.c[l];
            sbar.mapv_inplace(|v| w0 * v);
            sbar += &sbar2[l];
            // Adjoints are taken w.r.t. the pre-activation W h + b.
            let pre = sbar;
            let wl = l - 1;
            self.add_weight_grad(&mut grad, wl, &pre.t().dot(&fwd.h[l - 1]));
            self.add_bias_grad(&mut grad, wl, &pre.sum_axis(Axis(0)));
            if l > 1 {
                hbar = pre.dot(&self.weights(wl));
            }
        }
        Ok((total, grad))
    }

    fn add_weight_grad(&self, grad: &mut [f64], l: usize, dw: &Array2<f64>) {
        let (w, _) = self.arch.offsets(l);
        for (dst, src) in grad[w..].iter_mut().zip(dw.iter()) {
            *dst += src;
        }
    }

    fn add_bias_grad(&self, grad: &mut [f64], l: usize, db: &Array1<f64>) {
        let (_, b) = self.arch.offsets(l);
        for (dst, src) in grad[b..].iter_mut().zip(db.iter()) {
            *dst += src;
        }
    }
}
