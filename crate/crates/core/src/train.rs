//! Curriculum-based residual training shared by the epigraph and safety
//! value functions.
//!
//! A [`PinnProblem`] supplies collocation sampling and the pointwise PDE
//! residual as a function of the residual network's value and raw-input
//! gradient; everything else (batching, second-order gradients, Adam,
//! logging, checkpointing) lives here.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic};
use crate::nn::{checkpoint, AdamConfig, AdamState, Arch, ModelKind, NetParams, Normalization, SampleLoss, ValueModel};

pub trait PinnProblem: Sync {
    fn input_dim(&self) -> usize;

    fn horizon(&self) -> f64;

    fn model_kind(&self) -> ModelKind;

    fn normalization(&self) -> Normalization;

    /// Draw one raw input with `t` uniform in `window`.
    fn sample_input(&self, rng: &mut dyn rand::RngCore, window: (f64, f64), out: &mut [f64]);

    /// Signed residual at `input` given the residual network's value `r` and
    /// raw-input gradient `grad_r`. Returns `(residual, d residual / d r)`
    /// and writes `d residual / d grad_r` into `d_grad`.
    fn residual(&self, input: &[f64], r: f64, grad_r: &[f64], d_grad: &mut [f64]) -> (f64, f64);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Total iterations `K`.
    pub iterations: usize,
    /// The sampling window is fully open after `curriculum_fraction * K`.
    pub curriculum_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub log_interval: usize,
    /// Periodic checkpoint interval; 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            curriculum_fraction: 0.8,
            batch_size: 2000,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 10_000,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Validation("iterations must be >= 1".into()));
        }
        if !(self.curriculum_fraction > 0.0 && self.curriculum_fraction <= 1.0) {
            return Err(Error::Validation(format!(
                "curriculum_fraction must lie in (0, 1], got {}",
                self.curriculum_fraction
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if self.log_interval < 1 {
            return Err(Error::Validation("log_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sampling window `[t_min, T]` at iteration `k`, opening linearly backward.
pub fn curriculum_window(k: usize, cfg: &CurriculumConfig, horizon: f64) -> (f64, f64) {
    let open_at = cfg.curriculum_fraction * cfg.iterations as f64;
    let frac = (k as f64 / open_at).min(1.0);
    (horizon * (1.0 - frac), horizon)
}

/// Raw collocation inputs, one sample per row.
pub fn sample_collocation<P: PinnProblem + ?Sized>(
    problem: &P,
    rng: &mut dyn rand::RngCore,
    window: (f64, f64),
    batch: usize,
) -> Array2<f64> {
    let d = problem.input_dim();
    let mut out = Array2::zeros((batch, d));
    for mut row in out.rows_mut() {
        problem.sample_input(rng, window, row.as_slice_mut().expect("contiguous"));
    }
    out
}

fn check_model<P: PinnProblem + ?Sized>(model: &ValueModel, problem: &P) -> Result<()> {
    if model.input_dim() != problem.input_dim() {
        return Err(Error::Validation(format!(
            "model takes {} inputs, problem produces {}",
            model.input_dim(),
            problem.input_dim()
        )));
    }
    Ok(())
}

/// Signed pointwise residuals.
pub fn residuals<P: PinnProblem + ?Sized>(model: &ValueModel, problem: &P, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_model(model, problem)?;
    let batch = model.residual_batch(inputs)?;
    let mut d_grad = vec![0.0; problem.input_dim()];
    let mut out = Vec::with_capacity(inputs.nrows());
    for (i, row) in inputs.rows().into_iter().enumerate() {
        let g = batch.grads.row(i);
        let (res, _) = problem.residual(
            row.as_slice().expect("contiguous"),
            batch.values[i],
            g.as_slice().expect("contiguous"),
            &mut d_grad,
        );
        if !res.is_finite() {
            return Err(Error::Numerical(format!("non-finite residual at sample {i}")));
        }
        out.push(res);
    }
    Ok(out)
}

/// Mean absolute residual over the batch.
pub fn residual_loss<P: PinnProblem + ?Sized>(model: &ValueModel, problem: &P, inputs: ArrayView2<f64>) -> Result<f64> {
    let r = residuals(model, problem, inputs)?;
    Ok(r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64)
}

/// Mean absolute residual and its exact parameter gradient.
pub fn loss_and_gradient<P: PinnProblem + ?Sized>(
    model: &ValueModel,
    problem: &P,
    inputs: ArrayView2<f64>,
) -> Result<(f64, Vec<f64>)> {
    check_model(model, problem)?;
    let (x, chain) = model.normalize(inputs);
    let d = problem.input_dim();
    model.params.loss_param_gradient(x.view(), |i, value, g_norm| {
        let c = chain.row(i);
        let raw = inputs.row(i);
        let grad_raw: Vec<f64> = g_norm.iter().zip(c.iter()).map(|(g, s)| g * s).collect();
        let mut d_grad = vec![0.0; d];
        let (res, d_r) = problem.residual(raw.as_slice().expect("contiguous"), value, &grad_raw, &mut d_grad);
        let s = if res > 0.0 {
            1.0
        } else if res < 0.0 {
            -1.0
        } else {
            0.0
        };
        SampleLoss {
            loss: res.abs(),
            d_value: s * d_r,
            d_input_grad: d_grad.iter().zip(c.iter()).map(|(g, cf)| s * g * cf).collect(),
        }
    })
}

/// Fresh model for `problem` with SIREN initialization.
pub fn init_model<P: PinnProblem + ?Sized>(problem: &P, hidden: &[usize], omega0: f64, seed: u64) -> Result<ValueModel> {
    let params = NetParams::init(seed, Arch::new(problem.input_dim(), hidden, omega0))?;
    ValueModel::new(problem.model_kind(), params, problem.normalization(), problem.horizon())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub t_min: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    /// CSV text with header `iteration,t_min,loss,wall_ms`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,t_min,loss,wall_ms\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{}\n", e.iteration, fmt_f64(e.t_min), fmt_f64(e.loss), e.wall_ms));
        }
        s
    }

    /// The log without the wall-clock column: the part that is a pure
    /// function of config and seed.
    pub fn deterministic_csv(&self) -> String {
        let mut s = String::from("iteration,t_min,loss\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.iteration, fmt_f64(e.t_min), fmt_f64(e.loss)));
        }
        s
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub curriculum: CurriculumConfig,
    pub adam: AdamConfig,
    /// Where periodic, final and last-good checkpoints go.
    pub checkpoint_path: Option<PathBuf>,
}

/// Run `K` iterations of sample -> loss -> gradient -> Adam.
pub fn train<P: PinnProblem + ?Sized>(
    problem: &P,
    opts: &TrainOptions,
    mut model: ValueModel,
) -> Result<(ValueModel, TrainingLog)> {
    let cfg = &opts.curriculum;
    cfg.validate()?;
    check_model(&model, problem)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(opts.adam, model.params.len());
    let mut log = TrainingLog::default();
    let started = Instant::now();
    let horizon = problem.horizon();
    for k in 0..cfg.iterations {
        let window = curriculum_window(k, cfg, horizon);
        let batch = sample_collocation(problem, &mut rng, window, cfg.batch_size);
        let step = loss_and_gradient(&model, problem, batch.view()).and_then(|(loss, grad)| {
            if loss.is_finite() {
                Ok((loss, grad))
            } else {
                Err(Error::Numerical(format!("loss is {loss}")))
            }
        });
        let (loss, grad) = match step {
            Ok(v) => v,
            Err(e) => {
                log::error!("iteration {k}: {e}");
                if let Some(p) = &opts.checkpoint_path {
                    checkpoint::save(&model, p)?;
                }
                return Err(Error::Diverged {
                    iteration: k,
                    checkpoint: opts.checkpoint_path.clone(),
                });
            }
        };
        if k % cfg.log_interval == 0 || k + 1 == cfg.iterations {
            let wall_ms = started.elapsed().as_millis() as u64;
            log::info!("iter {k:>7}  t_min {:.4}  loss {loss:.6e}", window.0);
            log.entries.push(LogEntry {
                iteration: k,
                t_min: window.0,
                loss,
                wall_ms,
            });
        }
        let mut next = model.params.clone();
        adam.step(next.as_mut_slice(), &grad)?;
        if next.as_slice().iter().any(|v| !v.is_finite()) {
            if let Some(p) = &opts.checkpoint_path {
                checkpoint::save(&model, p)?;
            }
            return Err(Error::Diverged {
                iteration: k,
                checkpoint: opts.checkpoint_path.clone(),
            });
        }
        model.params = next;
        if let Some(p) = &opts.checkpoint_path {
            if cfg.checkpoint_interval > 0 && (k + 1) % cfg.checkpoint_interval == 0 {
                checkpoint::save(&model, p)?;
            }
        }
    }
    if let Some(p) = &opts.checkpoint_path {
        checkpoint::save(&model, p)?;
    }
    Ok((model, log))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualStats {
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
}

/// Residual statistics on fresh uniform samples drawn from `window`.
pub fn validate_residual<P: PinnProblem + ?Sized>(
    model: &ValueModel,
    problem: &P,
    n_samples: usize,
    window: (f64, f64),
    seed: u64,
) -> Result<ResidualStats> {
    if n_samples == 0 {
        return Err(Error::Validation("need at least one validation sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = sample_collocation(problem, &mut rng, window, n_samples);
    let mut abs: Vec<f64> = residuals(model, problem, inputs.view())?.iter().map(|v| v.abs()).collect();
    abs.sort_by(|a, b| a.total_cmp(b));
    let mean = abs.iter().sum::<f64>() / abs.len() as f64;
    let idx = ((0.95 * abs.len() as f64).ceil() as usize).clamp(1, abs.len()) - 1;
    Ok(ResidualStats {
        mean,
        p95: abs[idx],
        max: *abs.last().unwrap(),
    })
}
