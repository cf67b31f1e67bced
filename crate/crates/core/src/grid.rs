//! Dense-grid reference solver for low-dimensional HJ problems.
//!
//! Values are stepped backward from the terminal time with explicit Euler
//! and a Lax-Friedrichs numerical Hamiltonian,
//!
//! ```text
//! V(t - dt) = V(t) + dt * [ H(x, (D+ + D-)/2) + sum_i alpha_i (D+_i - D-_i) / 2 ]
//! ```
//!
//! followed by the clamp `min(V, psi)` (reachability VI) or `max(V, g)`
//! (epigraph HJB). Both PDEs are written so that the update sign is the same:
//! the VI uses the maximising Hamiltonian, the epigraph the minimising one.
//!
//! On a boundary face only the inward one-sided difference exists; the
//! outward difference is taken as zero (a ghost node equal to the boundary
//! node). Copying the inward difference outward instead would make the
//! scheme non-monotone at the faces.
//!
//! Dump format (little-endian):
//!
//! ```text
//! b"MADG"            magic
//! u16                version (1)
//! u32                dimension count D
//! (f64 lo, f64 hi, u32 n) x D
//! f64                time stamp
//! u64                value count (product of the n)
//! f64 x count        values, row-major (last axis fastest)
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{EpigraphSystem, LineSystem};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const GRID_MAGIC: &[u8; 4] = b"MADG";
pub const GRID_VERSION: u16 = 1;
pub const DEFAULT_MEMORY_CAP: u64 = 4 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n }
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + i as f64 * self.spacing()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Validation(format!("grid axes need at least 3 points, got {}", self.n)));
        }
        if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Validation(format!("bad axis bounds [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// `min{dV/dt + H, psi - V} = 0`, clamp `V <= psi`.
    Vi,
    /// `min{-dV/dt - H, V - g} = 0`, clamp `V >= g`.
    Epigraph,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub axes: Vec<Axis>,
    pub values: Vec<f64>,
    pub time: f64,
}

fn strides(axes: &[Axis]) -> Vec<usize> {
    let mut s = vec![1; axes.len()];
    for d in (0..axes.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * axes[d + 1].n;
    }
    s
}

fn node_count(axes: &[Axis]) -> Result<usize> {
    axes.iter().try_fold(1usize, |acc, a| {
        acc.checked_mul(a.n)
            .ok_or_else(|| Error::Validation("grid node count overflows".into()))
    })
}

/// Bytes needed to hold `fields` value arrays on `axes`.
pub fn memory_estimate(axes: &[Axis], fields: usize) -> u64 {
    let nodes: u64 = axes.iter().map(|a| a.n as u64).product();
    nodes.saturating_mul(8).saturating_mul(fields as u64)
}

fn check_memory(axes: &[Axis], fields: usize, cap: u64) -> Result<()> {
    let required = memory_estimate(axes, fields);
    if required > cap {
        return Err(Error::GridMemory { required, cap });
    }
    Ok(())
}

impl GridField {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.axes)
    }

    /// Multi-index of flat node `k`.
    pub fn index_of(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            idx[d] = k % self.axes[d].n;
            k /= self.axes[d].n;
        }
        idx
    }

    pub fn node(&self, k: usize, out: &mut [f64]) {
        let mut k = k;
        for d in (0..self.dim()).rev() {
            let n = self.axes[d].n;
            out[d] = self.axes[d].coord(k % n);
            k /= n;
        }
    }

    pub fn max_spacing(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).fold(0.0, f64::max)
    }

    /// True when node `k` touches no boundary face.
    pub fn is_interior(&self, k: usize) -> bool {
        self.index_of(k)
            .iter()
            .zip(&self.axes)
            .all(|(&i, a)| i > 0 && i + 1 < a.n)
    }

    /// Same field with axes reordered: new axis `d` is old axis `perm[d]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<GridField> {
        let d = self.dim();
        let mut seen = vec![false; d];
        if perm.len() != d || perm.iter().any(|&p| p >= d || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Validation(format!("{perm:?} is not a permutation of {d} axes")));
        }
        let axes: Vec<Axis> = perm.iter().map(|&p| self.axes[p]).collect();
        let old_strides = self.strides();
        let mut out = GridField {
            axes,
            values: vec![0.0; self.len()],
            time: self.time,
        };
        for k in 0..out.len() {
            let idx = out.index_of(k);
            let old: usize = idx.iter().enumerate().map(|(nd, &i)| i * old_strides[perm[nd]]).sum();
            out.values[k] = self.values[old];
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 20 * self.dim() + 8 * self.len());
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&GRID_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for a in &self.axes {
            out.extend_from_slice(&a.lo.to_le_bytes());
            out.extend_from_slice(&a.hi.to_le_bytes());
            out.extend_from_slice(&(a.n as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.time.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<GridField> {
        let corrupt = |m: &str| Error::CheckpointCorrupt(format!("grid dump: {m}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(corrupt("truncated"));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(4)? != GRID_MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != GRID_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: GRID_VERSION,
            });
        }
        let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if d == 0 || d > 8 {
            return Err(corrupt("implausible dimension count"));
        }
        let mut axes = Vec::with_capacity(d);
        for _ in 0..d {
            let lo = f64::from_le_bytes(take(8)?.try_into().unwrap());
            let hi = f64::from_le_bytes(take(8)?.try_into().unwrap());
            let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            axes.push(Axis::new(lo, hi, n));
        }
        let time = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let expected = node_count(&axes)?;
        if count != expected {
            return Err(Error::CheckpointShape(format!("grid dump holds {count} values, axes need {expected}")));
        }
        let payload = take(8 * count)?;
        let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(GridField { axes, values, time })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<GridField> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(format!("grid dump {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::decode(&bytes)
    }
}

/// Sample `terminal` at every node; the result is stamped `time`.
pub fn build_grid<F>(axes: &[Axis], time: f64, terminal: F, memory_cap: u64) -> Result<GridField>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if axes.is_empty() {
        return Err(Error::Validation("grid needs at least one axis".into()));
    }
    for a in axes {
        a.validate()?;
    }
    node_count(axes)?;
    check_memory(axes, 1, memory_cap)?;
    let mut field = GridField {
        axes: axes.to_vec(),
        values: vec![0.0; node_count(axes)?],
        time,
    };
    let probe = field.clone_axes_only();
    field.values.par_iter_mut().enumerate().for_each_init(
        || vec![0.0; axes.len()],
        |x, (k, v)| {
            probe.node(k, x);
            *v = terminal(x);
        },
    );
    if let Some(k) = field.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("terminal function is not finite at node {k}")));
    }
    Ok(field)
}

impl GridField {
    fn clone_axes_only(&self) -> GridField {
        GridField {
            axes: self.axes.clone(),
            values: Vec::new(),
            time: self.time,
        }
    }
}

/// A problem the grid solver can step: Hamiltonian, dissipation bounds,
/// terminal function and the clamp function.
pub trait GridProblem: Sync {
    fn dim(&self) -> usize;

    fn mode(&self) -> Mode;

    /// Hamiltonian in the update `V(t - dt) = V(t) + dt * H`.
    fn hamiltonian(&self, x: &[f64], p: &[f64]) -> f64;

    /// Global bounds on `|dH/dp_i|` over the grid.
    fn alpha(&self, axes: &[Axis]) -> Vec<f64>;

    fn terminal(&self, x: &[f64]) -> f64;

    /// `psi` in VI mode, `g` in epigraph mode.
    fn obstacle(&self, x: &[f64]) -> f64;
}

/// Largest stable step: half the one-dimensional CFL bound, further limited
/// so the scheme stays monotone in all dimensions at once.
pub fn max_stable_dt(axes: &[Axis], alpha: &[f64]) -> f64 {
    let per_dim = axes
        .iter()
        .zip(alpha)
        .filter(|(_, &a)| a > 0.0)
        .map(|(ax, a)| ax.spacing() / a)
        .fold(f64::INFINITY, f64::min);
    let total: f64 = axes.iter().zip(alpha).map(|(ax, a)| a / ax.spacing()).sum();
    let multi = if total > 0.0 { 1.0 / total } else { f64::INFINITY };
    (0.5 * per_dim).min(multi)
}

/// One backward step of size `dt`.
pub fn lf_step<P: GridProblem + ?Sized>(field: &GridField, dt: f64, problem: &P) -> Result<GridField> {
    if field.dim() != problem.dim() {
        return Err(Error::Validation(format!(
            "field has {} axes, problem has {}",
            field.dim(),
            problem.dim()
        )));
    }
    let alpha = problem.alpha(&field.axes);
    let max_dt = max_stable_dt(&field.axes, &alpha);
    if !(dt > 0.0) || dt > max_dt * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, max_dt });
    }
    let d = field.dim();
    let st = field.strides();
    let h: Vec<f64> = field.axes.iter().map(Axis::spacing).collect();
    let mode = problem.mode();
    let old = &field.values;
    let mut next = vec![0.0; old.len()];
    next.par_iter_mut().enumerate().for_each_init(
        || (vec![0.0; d], vec![0.0; d]),
        |(x, p), (k, out)| {
            field.node(k, x);
            let v = old[k];
            let mut diss = 0.0;
            let mut rem = k;
            for dd in (0..d).rev() {
                let n = field.axes[dd].n;
                let i = rem % n;
                rem /= n;
                let fwd = if i + 1 < n { Some((old[k + st[dd]] - v) / h[dd]) } else { None };
                let bwd = if i > 0 { Some((v - old[k - st[dd]]) / h[dd]) } else { None };
                let (dp, dm) = match (fwd, bwd) {
                    (Some(f), Some(b)) => (f, b),
                    (Some(f), None) => (f, 0.0),
                    (None, Some(b)) => (0.0, b),
                    (None, None) => (0.0, 0.0),
                };
                p[dd] = 0.5 * (dp + dm);
                diss += alpha[dd] * 0.5 * (dp - dm);
            }
            let updated = v + dt * (problem.hamiltonian(x, p) + diss);
            let obs = problem.obstacle(x);
            *out = match mode {
                Mode::Vi => updated.min(obs),
                Mode::Epigraph => updated.max(obs),
            };
        },
    );
    if let Some(k) = next.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("grid value became non-finite at node {k}")));
    }
    Ok(GridField {
        axes: field.axes.clone(),
        values: next,
        time: field.time - dt,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveOptions {
    /// Fraction of the largest stable step actually used.
    pub cfl_fraction: f64,
    /// Number of evenly spaced slices to keep besides `t = T`.
    pub stored_slices: usize,
    pub memory_cap: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            cfl_fraction: 0.9,
            stored_slices: 4,
            memory_cap: DEFAULT_MEMORY_CAP,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridSolution {
    /// Stored slices in decreasing time; first is `t = T`, last is `t = 0`.
    pub slices: Vec<GridField>,
    pub dt: f64,
    pub steps: usize,
}

impl GridSolution {
    pub fn initial(&self) -> &GridField {
        self.slices.last().expect("at least two slices")
    }

    pub fn terminal(&self) -> &GridField {
        &self.slices[0]
    }
}

/// Solve from `t = horizon` down to `t = 0`.
pub fn solve<P: GridProblem + ?Sized>(problem: &P, axes: &[Axis], horizon: f64, opts: &SolveOptions) -> Result<GridSolution> {
    if !(horizon > 0.0) {
        return Err(Error::Validation(format!("horizon must be positive, got {horizon}")));
    }
    if !(opts.cfl_fraction > 0.0 && opts.cfl_fraction <= 1.0) {
        return Err(Error::Validation(format!("cfl_fraction must lie in (0, 1], got {}", opts.cfl_fraction)));
    }
    for a in axes {
        a.validate()?;
    }
    check_memory(axes, 3 + opts.stored_slices, opts.memory_cap)?;
    let terminal = build_grid(axes, horizon, |x| problem.terminal(x), opts.memory_cap)?;
    let max_dt = max_stable_dt(axes, &problem.alpha(axes));
    let steps = (horizon / (opts.cfl_fraction * max_dt)).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;
    let keep: Vec<usize> = (1..=opts.stored_slices.max(1))
        .map(|j| (j * steps + opts.stored_slices.max(1) / 2) / opts.stored_slices.max(1))
        .collect();
    log::info!("grid solve: {} nodes, {steps} steps of {dt:.3e}", terminal.len());
    let mut slices = vec![terminal.clone()];
    let mut cur = terminal;
    for s in 1..=steps {
        cur = lf_step(&cur, dt, problem)?;
        if s == steps {
            cur.time = 0.0;
        }
        if keep.contains(&s) || s == steps {
            slices.push(cur.clone());
        }
    }
    Ok(GridSolution { slices, dt, steps })
}

/// Multilinear interpolation with queries clamped into the grid box.
pub fn interpolate(field: &GridField, q: &[f64]) -> f64 {
    let d = field.dim();
    let st = field.strides();
    let mut base = 0usize;
    let mut frac = vec![0.0; d];
    let mut step = vec![0usize; d];
    for k in 0..d {
        let a = &field.axes[k];
        let x = q[k].clamp(a.lo, a.hi);
        let s = (x - a.lo) / a.spacing();
        let i = (s.floor() as usize).min(a.n - 2);
        frac[k] = (s - i as f64).clamp(0.0, 1.0);
        base += i * st[k];
        step[k] = st[k];
    }
    let mut total = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut idx = base;
        for k in 0..d {
            if corner >> k & 1 == 1 {
                w *= frac[k];
                idx += step[k];
            } else {
                w *= 1.0 - frac[k];
            }
        }
        if w != 0.0 {
            total += w * field.values[idx];
        }
    }
    total
}

/// Which points [`compare`] evaluates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleSpec {
    AllNodes,
    InteriorNodes,
    Random { n: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub n_points: usize,
    /// Points with `|V_grid| > margin`.
    pub n_confident: usize,
    pub margin: f64,
    pub sign_agreement: f64,
    pub mae_confident: f64,
    pub max_error_confident: f64,
    pub mae_all: f64,
    pub max_error_all: f64,
}

/// Interior nodes of `field` whose coordinates satisfy `keep`.
pub fn interior_nodes_where(field: &GridField, keep: impl Fn(&[f64]) -> bool) -> Vec<Vec<f64>> {
    (0..field.len())
        .filter(|&k| field.is_interior(k))
        .map(|k| {
            let mut x = vec![0.0; field.dim()];
            field.node(k, &mut x);
            x
        })
        .filter(|x| keep(x))
        .collect()
}

/// Compare a grid field with another evaluator over the same coordinates.
pub fn compare<F>(field: &GridField, eval: F, spec: SampleSpec, margin: f64) -> Result<CompareReport>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let points: Vec<Vec<f64>> = match spec {
        SampleSpec::AllNodes | SampleSpec::InteriorNodes => (0..field.len())
            .filter(|&k| spec == SampleSpec::AllNodes || field.is_interior(k))
            .map(|k| {
                let mut x = vec![0.0; field.dim()];
                field.node(k, &mut x);
                x
            })
            .collect(),
        SampleSpec::Random { n, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| field.axes.iter().map(|a| rng.gen_range(a.lo..=a.hi)).collect())
                .collect()
        }
    };
    compare_points(field, &points, eval, margin)
}

/// [`compare`] over an explicit point list.
pub fn compare_points<F>(field: &GridField, points: &[Vec<f64>], eval: F, margin: f64) -> Result<CompareReport>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if points.is_empty() {
        return Err(Error::Validation("comparison has no sample points".into()));
    }
    let pairs: Vec<(f64, f64)> = points
        .par_iter()
        .map(|x| Ok((interpolate(field, x), eval(x)?)))
        .collect::<Result<_>>()?;
    let (mut agree, mut n_conf, mut err_conf, mut max_conf, mut err_all, mut max_all) = (0usize, 0usize, 0.0, 0.0f64, 0.0, 0.0f64);
    for &(g, v) in &pairs {
        if !v.is_finite() {
            return Err(Error::Numerical("evaluator returned a non-finite value".into()));
        }
        let e = (g - v).abs();
        err_all += e;
        max_all = max_all.max(e);
        if g.abs() > margin {
            n_conf += 1;
            err_conf += e;
            max_conf = max_conf.max(e);
            if (g > 0.0) == (v > 0.0) {
                agree += 1;
            }
        }
    }
    let nc = n_conf.max(1) as f64;
    Ok(CompareReport {
        n_points: pairs.len(),
        n_confident: n_conf,
        margin,
        sign_agreement: if n_conf > 0 { agree as f64 / nc } else { f64::NAN },
        mae_confident: if n_conf > 0 { err_conf / nc } else { f64::NAN },
        max_error_confident: max_conf,
        mae_all: err_all / pairs.len() as f64,
        max_error_all: max_all,
    })
}

/// Pairwise relative double integrator `[dx, dy, dvx, dvy]` with the joint
/// control maximisation; VI mode with `psi = |dp| - r`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeViProblem {
    pub r: f64,
    pub a_max: f64,
}

impl RelativeViProblem {
    pub fn axes(points: usize, pos_box: f64, vel_box: f64) -> Vec<Axis> {
        vec![
            Axis::new(-pos_box, pos_box, points),
            Axis::new(-pos_box, pos_box, points),
            Axis::new(-vel_box, vel_box, points),
            Axis::new(-vel_box, vel_box, points),
        ]
    }
}

impl GridProblem for RelativeViProblem {
    fn dim(&self) -> usize {
        4
    }

    fn mode(&self) -> Mode {
        Mode::Vi
    }

    fn hamiltonian(&self, x: &[f64], p: &[f64]) -> f64 {
        p[0] * x[2] + p[1] * x[3] + 2.0 * self.a_max * (p[2].abs() + p[3].abs())
    }

    fn alpha(&self, axes: &[Axis]) -> Vec<f64> {
        let vx = axes[2].lo.abs().max(axes[2].hi.abs());
        let vy = axes[3].lo.abs().max(axes[3].hi.abs());
        vec![vx, vy, 2.0 * self.a_max, 2.0 * self.a_max]
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        x[0].hypot(x[1]) - self.r
    }

    fn obstacle(&self, x: &[f64]) -> f64 {
        self.terminal(x)
    }
}

/// Two single integrators with per-axis speed bound `speed`, relative
/// position `[dx, dy]`; cooperative avoidance in VI mode.
#[derive(Clone, Debug, PartialEq)]
pub struct FleeingProblem {
    pub r: f64,
    pub speed: f64,
}

impl GridProblem for FleeingProblem {
    fn dim(&self) -> usize {
        2
    }

    fn mode(&self) -> Mode {
        Mode::Vi
    }

    fn hamiltonian(&self, _x: &[f64], p: &[f64]) -> f64 {
        2.0 * self.speed * (p[0].abs() + p[1].abs())
    }

    fn alpha(&self, _axes: &[Axis]) -> Vec<f64> {
        vec![2.0 * self.speed; 2]
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        x[0].hypot(x[1]) - self.r
    }

    fn obstacle(&self, x: &[f64]) -> f64 {
        self.terminal(x)
    }
}

/// Epigraph HJB of [`LineSystem`] on `[x, v, z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LineEpigraphProblem {
    pub system: LineSystem,
}

impl LineEpigraphProblem {
    /// `points` nodes per axis on `[0, z_max]` for the budget. Along a
    /// trajectory `z` only decreases, so the budget axis is extended below
    /// zero by `horizon * max l` at the same spacing; otherwise the `z = 0`
    /// face is an outflow boundary and corrupts the values near it.
    pub fn axes(&self, points: usize, horizon: f64) -> Vec<Axis> {
        let s = &self.system;
        let dz = s.z_max / points.saturating_sub(1).max(1) as f64;
        let l_max = s.running_cost(&[-s.x_half, 0.0]).max(s.running_cost(&[s.x_half, 0.0]));
        let extra = (horizon * l_max / dz).ceil() as usize;
        vec![
            Axis::new(-s.x_half, s.x_half, points),
            Axis::new(-s.v_max, s.v_max, points),
            Axis::new(-(extra as f64) * dz, s.z_max, points + extra),
        ]
    }
}

impl GridProblem for LineEpigraphProblem {
    fn dim(&self) -> usize {
        3
    }

    fn mode(&self) -> Mode {
        Mode::Epigraph
    }

    fn hamiltonian(&self, x: &[f64], p: &[f64]) -> f64 {
        let s = &x[..2];
        crate::epigraph::hamiltonian_min(&self.system, s, &p[..2], p[2]).0
    }

    fn alpha(&self, axes: &[Axis]) -> Vec<f64> {
        let s = &self.system;
        let v = axes[1].lo.abs().max(axes[1].hi.abs());
        let l = s.running_cost(&[axes[0].lo, 0.0]).max(s.running_cost(&[axes[0].hi, 0.0]));
        vec![v, s.a_max, l]
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        let mut g = [0.0; 2];
        let phi = self.system.terminal_cost(&x[..2], &mut g);
        (phi - x[2]).max(self.obstacle(x))
    }

    fn obstacle(&self, x: &[f64]) -> f64 {
        let mut g = [0.0; 2];
        self.system.constraint(&x[..2], &mut g)
    }
}

/// Wraps a problem so it can be solved on permuted axes: new axis `d` is
/// the inner problem's axis `perm[d]`.
pub struct Permuted<'a, P: ?Sized> {
    pub inner: &'a P,
    pub perm: Vec<usize>,
}

impl<'a, P: GridProblem + ?Sized> Permuted<'a, P> {
    fn unpermute(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (d, &p) in self.perm.iter().enumerate() {
            out[p] = x[d];
        }
        out
    }
}

impl<'a, P: GridProblem + ?Sized> GridProblem for Permuted<'a, P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn mode(&self) -> Mode {
        self.inner.mode()
    }

    fn hamiltonian(&self, x: &[f64], p: &[f64]) -> f64 {
        self.inner.hamiltonian(&self.unpermute(x), &self.unpermute(p))
    }

    fn alpha(&self, axes: &[Axis]) -> Vec<f64> {
        let orig = self.unpermute_axes(axes);
        let a = self.inner.alpha(&orig);
        self.perm.iter().map(|&p| a[p]).collect()
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        self.inner.terminal(&self.unpermute(x))
    }

    fn obstacle(&self, x: &[f64]) -> f64 {
        self.inner.obstacle(&self.unpermute(x))
    }
}

impl<'a, P: GridProblem + ?Sized> Permuted<'a, P> {
    fn unpermute_axes(&self, axes: &[Axis]) -> Vec<Axis> {
        let mut out = axes.to_vec();
        for (d, &p) in self.perm.iter().enumerate() {
            out[p] = axes[d];
        }
        out
    }
}
