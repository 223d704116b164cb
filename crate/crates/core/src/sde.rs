//! Time grids, SDE specifications and Euler–Maruyama simulation.
//!
//! Trajectories of a batch advance in lockstep so that drift networks are
//! evaluated on whole batches, but every row only ever reads its own state and
//! its own [`RngStream`]; results do not depend on batch composition.
//!
//! Noise increments have variance `Δt` per component and drift and diffusion
//! are evaluated at the left endpoint of each step.

use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Trajectories per lockstep chunk; bounds memory for large batches.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_start < t_end) || n_steps == 0 {
            return Err(Error::invalid(format!(
                "time grid needs t_start < t_end and n_steps ≥ 1, got [{t_start}, {t_end}] / {n_steps}"
            )));
        }
        Ok(Self {
            t_start,
            t_end,
            n_steps,
        })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt()
    }

    pub fn horizon(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// A drift field evaluated on a batch of states (one per row).
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, xs: &Matrix) -> Matrix;

    /// Per-row Jacobians, `rows × d × d`. Defaults to central differences.
    fn jacobian(&self, t: f64, xs: &Matrix) -> Vec<f64> {
        let d = self.dim();
        let h = 1e-6;
        let mut jac = vec![0.0; xs.rows * d * d];
        for j in 0..d {
            let mut plus = xs.clone();
            let mut minus = xs.clone();
            for r in 0..xs.rows {
                plus.data[r * d + j] += h;
                minus.data[r * d + j] -= h;
            }
            let fp = self.eval(t, &plus);
            let fm = self.eval(t, &minus);
            for r in 0..xs.rows {
                for i in 0..d {
                    jac[r * d * d + i * d + j] = (fp.get(r, i) - fm.get(r, i)) / (2.0 * h);
                }
            }
        }
        jac
    }
}

/// Time-dependent scalar diffusion coefficient.
pub trait Diffusion: Sync {
    fn sigma(&self, t: f64) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantSigma(pub f64);

impl Diffusion for ConstantSigma {
    fn sigma(&self, _t: f64) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroField {
    pub dim: usize,
}

impl VectorField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _t: f64, xs: &Matrix) -> Matrix {
        Matrix::zeros(xs.rows, self.dim)
    }
    fn jacobian(&self, _t: f64, xs: &Matrix) -> Vec<f64> {
        vec![0.0; xs.rows * self.dim * self.dim]
    }
}

#[derive(Debug, Clone)]
pub struct ConstantField {
    pub value: Vec<f64>,
}

impl VectorField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }
    fn eval(&self, _t: f64, xs: &Matrix) -> Matrix {
        let mut m = Matrix::zeros(xs.rows, self.value.len());
        for r in 0..xs.rows {
            m.row_mut(r).copy_from_slice(&self.value);
        }
        m
    }
    fn jacobian(&self, _t: f64, xs: &Matrix) -> Vec<f64> {
        vec![0.0; xs.rows * self.dim() * self.dim()]
    }
}

/// `x ↦ coef · x` (an Ornstein–Uhlenbeck drift for negative `coef`).
#[derive(Debug, Clone, Copy)]
pub struct LinearField {
    pub coef: f64,
    pub dim: usize,
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _t: f64, xs: &Matrix) -> Matrix {
        Matrix::from_vec(xs.rows, xs.cols, xs.data.iter().map(|x| self.coef * x).collect())
    }
    fn jacobian(&self, _t: f64, xs: &Matrix) -> Vec<f64> {
        let d = self.dim;
        let mut jac = vec![0.0; xs.rows * d * d];
        for r in 0..xs.rows {
            for i in 0..d {
                jac[r * d * d + i * d + i] = self.coef;
            }
        }
        jac
    }
}

/// Pointwise sum of two fields.
pub struct SumField<'a>(pub &'a dyn VectorField, pub &'a dyn VectorField);

impl VectorField for SumField<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, t: f64, xs: &Matrix) -> Matrix {
        let mut a = self.0.eval(t, xs);
        let b = self.1.eval(t, xs);
        a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        a
    }
    fn jacobian(&self, t: f64, xs: &Matrix) -> Vec<f64> {
        let mut a = self.0.jacobian(t, xs);
        let b = self.1.jacobian(t, xs);
        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        a
    }
}

/// Field defined by a per-state closure `f(t, x, out)`.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> VectorField for FnField<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, xs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(xs.rows, self.dim);
        for r in 0..xs.rows {
            (self.f)(t, xs.row(r), out.row_mut(r));
        }
        out
    }
}

#[derive(Clone, Copy)]
pub struct SdeSpec<'a> {
    pub drift: &'a dyn VectorField,
    pub sigma: &'a dyn Diffusion,
}

impl<'a> SdeSpec<'a> {
    pub fn new(drift: &'a dyn VectorField, sigma: &'a dyn Diffusion) -> Self {
        Self { drift, sigma }
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }
}

/// Mixes a tag into a seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible stream of standard normals, one stream per trajectory.
///
/// Every normal pair consumes exactly two 64-bit words (Box–Muller), so the
/// draws of step `k` can be reached by seeking from `(seed, stream, k)` alone.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    fn words_per_block(count: usize) -> u128 {
        // two u64 per pair, two u32 words per u64
        (count.div_ceil(2) * 4) as u128
    }

    /// Positions the stream at the start of block `index` of `count` normals.
    pub fn seek(&mut self, index: usize, count: usize) {
        self.rng
            .set_word_pos(index as u128 * Self::words_per_block(count));
    }

    fn uniform_open(&mut self) -> f64 {
        // (0, 1]
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Fills `out` with standard normals.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        let mut i = 0;
        while i < out.len() {
            let u1 = self.uniform_open();
            let u2 = self.uniform_open();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = std::f64::consts::TAU * u2;
            out[i] = r * theta.cos();
            if i + 1 < out.len() {
                out[i + 1] = r * theta.sin();
            }
            i += 2;
        }
    }
}

/// How trajectories are initialised. Row `i` of a batch uses stream
/// `first_stream + i`.
pub trait InitialSampler: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, seed: u64, first_stream: u64, count: usize) -> Result<Matrix>;
}

/// `N(mean, std² I)`.
#[derive(Debug, Clone)]
pub struct GaussianInit {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianInit {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: 1.0,
        }
    }
}

const INIT_TAG: u64 = 0x1_417;

impl InitialSampler for GaussianInit {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn sample(&self, seed: u64, first_stream: u64, count: usize) -> Result<Matrix> {
        let d = self.mean.len();
        let mut out = Matrix::zeros(count, d);
        let s = derive_seed(seed, INIT_TAG);
        for i in 0..count {
            let mut rng = RngStream::new(s, first_stream + i as u64);
            let row = out.row_mut(i);
            rng.fill_normal(row);
            for (x, m) in row.iter_mut().zip(&self.mean) {
                *x = m + self.std * *x;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
pub enum Init<'a> {
    Point(&'a [f64]),
    /// One explicit state per trajectory.
    States(&'a Matrix),
    Sampler(&'a dyn InitialSampler),
}

impl Init<'_> {
    pub fn states(&self, dim: usize, seed: u64, first_stream: u64, count: usize) -> Result<Matrix> {
        let m = match *self {
            Init::Point(p) => {
                let mut m = Matrix::zeros(count, p.len());
                for r in 0..count {
                    m.row_mut(r).copy_from_slice(p);
                }
                m
            }
            Init::States(s) => {
                if s.rows != count {
                    return Err(Error::invalid(format!(
                        "{} initial states for {count} trajectories",
                        s.rows
                    )));
                }
                s.clone()
            }
            Init::Sampler(s) => s.sample(seed, first_stream, count)?,
        };
        if m.cols != dim {
            return Err(Error::invalid(format!(
                "initial state dimension {} does not match SDE dimension {dim}",
                m.cols
            )));
        }
        Ok(m)
    }
}

/// A simulated path with the noise increments that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub dim: usize,
    /// `(n_steps + 1) × dim`, row-major.
    pub states: Vec<f64>,
    /// `n_steps × dim`; row `k` is the increment Δw used for step `k → k+1`.
    pub noise: Vec<f64>,
    pub seed: u64,
    pub stream: u64,
}

impl Trajectory {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.noise[k * self.dim..(k + 1) * self.dim]
    }

    pub fn initial(&self) -> &[f64] {
        self.state(0)
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.grid.n_steps)
    }

    /// Rebuilds the states from the stored noise under `spec`.
    pub fn replay(&self, spec: &SdeSpec) -> Result<Vec<f64>> {
        let d = self.dim;
        let dt = self.grid.dt();
        let mut states = Vec::with_capacity(self.states.len());
        states.extend_from_slice(self.initial());
        for k in 0..self.grid.n_steps {
            let t = self.grid.time(k);
            let x = Matrix::from_vec(1, d, states[k * d..(k + 1) * d].to_vec());
            let drift = spec.drift.eval(t, &x);
            let sigma = spec.sigma.sigma(t);
            for j in 0..d {
                states.push(x.data[j] + drift.data[j] * dt + sigma * self.noise[k * d + j]);
            }
        }
        Ok(states)
    }

    /// Writes `t, x_1..x_d` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=self.dim).map(|i| format!("x_{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for k in 0..=self.grid.n_steps {
            let row: Vec<String> = std::iter::once(self.grid.time(k))
                .chain(self.state(k).iter().copied())
                .map(|v| v.to_string())
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Advances `xs` one Euler–Maruyama step in place. `dw` receives the
/// increments actually used.
fn em_step(
    spec: &SdeSpec,
    grid: &TimeGrid,
    k: usize,
    xs: &mut Matrix,
    rngs: &mut [RngStream],
    dw: &mut Matrix,
    first_stream: u64,
) -> Result<()> {
    let d = xs.cols;
    let t = grid.time(k);
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let sigma = spec.sigma.sigma(t);
    let drift = spec.drift.eval(t, xs);
    for (r, rng) in rngs.iter_mut().enumerate() {
        let dwr = dw.row_mut(r);
        rng.fill_normal(dwr);
        dwr.iter_mut().for_each(|z| *z *= sqrt_dt);
        for j in 0..d {
            let x = xs.data[r * d + j];
            let nx = x + drift.data[r * d + j] * dt + sigma * dw.data[r * d + j];
            if !nx.is_finite() {
                return Err(Error::NonFiniteState {
                    step: k + 1,
                    trajectory: (first_stream + r as u64) as usize,
                });
            }
            xs.data[r * d + j] = nx;
        }
    }
    Ok(())
}

fn streams(seed: u64, first_stream: u64, count: usize) -> Vec<RngStream> {
    (0..count)
        .map(|i| RngStream::new(seed, first_stream + i as u64))
        .collect()
}

/// Simulates trajectories `first_stream .. first_stream + count`.
pub fn simulate_batch_from(
    spec: &SdeSpec,
    init: Init,
    grid: &TimeGrid,
    seed: u64,
    first_stream: u64,
    count: usize,
) -> Result<Vec<Trajectory>> {
    let d = spec.dim();
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    while start < count {
        let n = CHUNK.min(count - start);
        let s0 = first_stream + start as u64;
        let mut xs = match init {
            Init::States(m) => {
                let rows = Matrix::from_vec(n, m.cols, m.data[start * m.cols..(start + n) * m.cols].to_vec());
                Init::States(&rows).states(d, seed, s0, n)?
            }
            other => other.states(d, seed, s0, n)?,
        };
        let mut rngs = streams(seed, s0, n);
        let mut states: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let mut v = Vec::with_capacity((grid.n_steps + 1) * d);
                v.extend_from_slice(xs.row(r));
                v
            })
            .collect();
        let mut noise: Vec<Vec<f64>> = (0..n).map(|_| Vec::with_capacity(grid.n_steps * d)).collect();
        let mut dw = Matrix::zeros(n, d);
        for k in 0..grid.n_steps {
            em_step(spec, grid, k, &mut xs, &mut rngs, &mut dw, s0)?;
            for r in 0..n {
                states[r].extend_from_slice(xs.row(r));
                noise[r].extend_from_slice(dw.row(r));
            }
        }
        for (r, (st, nz)) in states.into_iter().zip(noise).enumerate() {
            out.push(Trajectory {
                grid: *grid,
                dim: d,
                states: st,
                noise: nz,
                seed,
                stream: s0 + r as u64,
            });
        }
        start += n;
    }
    Ok(out)
}

pub fn simulate_batch(
    spec: &SdeSpec,
    init: Init,
    grid: &TimeGrid,
    seed: u64,
    count: usize,
) -> Result<Vec<Trajectory>> {
    simulate_batch_from(spec, init, grid, seed, 0, count)
}

/// Simulates the single trajectory on stream `stream`.
pub fn simulate(
    spec: &SdeSpec,
    init: Init,
    grid: &TimeGrid,
    seed: u64,
    stream: u64,
) -> Result<Trajectory> {
    Ok(simulate_batch_from(spec, init, grid, seed, stream, 1)?.remove(0))
}

/// Terminal states only, without storing paths.
pub fn simulate_terminal(
    spec: &SdeSpec,
    init: Init,
    grid: &TimeGrid,
    seed: u64,
    first_stream: u64,
    count: usize,
) -> Result<Matrix> {
    let d = spec.dim();
    let mut out = Matrix::zeros(count, d);
    let mut start = 0;
    while start < count {
        let n = CHUNK.min(count - start);
        let s0 = first_stream + start as u64;
        let mut xs = match init {
            Init::States(m) => {
                let rows = Matrix::from_vec(n, m.cols, m.data[start * m.cols..(start + n) * m.cols].to_vec());
                Init::States(&rows).states(d, seed, s0, n)?
            }
            other => other.states(d, seed, s0, n)?,
        };
        let mut rngs = streams(seed, s0, n);
        let mut dw = Matrix::zeros(n, d);
        for k in 0..grid.n_steps {
            em_step(spec, grid, k, &mut xs, &mut rngs, &mut dw, s0)?;
        }
        out.data[start * d..(start + n) * d].copy_from_slice(&xs.data);
        start += n;
    }
    Ok(out)
}

/// Per-step running-cost weight `(α/2)·Δt/σ²(t)`.
fn cost_weight(alpha: f64, dt: f64, sigma: f64) -> Result<f64> {
    if sigma == 0.0 {
        return Err(Error::invalid("running cost with σ(t) = 0"));
    }
    Ok(0.5 * alpha * dt / (sigma * sigma))
}

/// `(α/2) Σ_k ‖u(t_k, x_k)‖² / σ²(t_k) · Δt` along a stored path.
pub fn running_cost(
    traj: &Trajectory,
    control: &dyn VectorField,
    sigma: &dyn Diffusion,
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("α must be positive, got {alpha}")));
    }
    let d = traj.dim;
    let dt = traj.grid.dt();
    let mut y = 0.0;
    for k in 0..traj.grid.n_steps {
        let t = traj.grid.time(k);
        let w = cost_weight(alpha, dt, sigma.sigma(t))?;
        let x = Matrix::from_vec(1, d, traj.state(k).to_vec());
        let u = control.eval(t, &x);
        y += linalg::norm_sq(&u.data) * w;
    }
    Ok(y)
}

/// A drift that can be recorded on an autodiff graph.
pub trait RecordableControl: VectorField {
    /// Adds the trainable leaves; called once per graph.
    fn leaves(&self, g: &mut Graph) -> Vec<Var>;

    /// Records `u(t, x)` for a batch `x: [rows, d]`.
    fn record(&self, g: &mut Graph, leaves: &[Var], t: f64, x: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RecordOptions {
    /// Steps before this time are simulated without recording (their states
    /// enter the graph as constants).
    pub record_from: Option<f64>,
    /// Multiplies the running cost; `0` drops it from the graph.
    pub alpha: f64,
}

/// Output of [`simulate_recorded`].
pub struct RecordedBatch {
    pub graph: Graph,
    pub trajectories: Vec<Trajectory>,
    /// `[rows, d]` terminal states.
    pub x_final: Var,
    /// `[rows, 1]` accumulated running cost `y_N`.
    pub cost: Var,
}

/// Simulates `dx = (f + u) dt + σ dw` while recording the unrolled recursion
/// and the augmented cost state `y` on a fresh graph.
///
/// Noise increments enter the graph as constants, so gradients are pathwise.
/// The base drift enters through its exact Jacobian.
#[allow(clippy::too_many_arguments)]
pub fn simulate_recorded(
    base: &dyn VectorField,
    control: &dyn RecordableControl,
    sigma: &dyn Diffusion,
    init: Init,
    grid: &TimeGrid,
    seed: u64,
    first_stream: u64,
    count: usize,
    opts: RecordOptions,
) -> Result<RecordedBatch> {
    let d = base.dim();
    if control.dim() != d {
        return Err(Error::invalid("control and base drift dimensions differ"));
    }
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut xs = init.states(d, seed, first_stream, count)?;
    let mut rngs = streams(seed, first_stream, count);
    let mut states: Vec<Vec<f64>> = (0..count).map(|r| xs.row(r).to_vec()).collect();
    let mut noise: Vec<Vec<f64>> = (0..count).map(|_| Vec::with_capacity(grid.n_steps * d)).collect();

    let mut g = Graph::new();
    let leaves = control.leaves(&mut g);
    let mut x_var: Option<Var> = None;
    let mut y_plain = vec![0.0; count];
    let mut y_var: Option<Var> = None;
    let ones = g.constant(&[d, 1], vec![1.0; d])?;
    let mut dw = Matrix::zeros(count, d);

    for k in 0..grid.n_steps {
        let t = grid.time(k);
        let s = sigma.sigma(t);
        let w = if opts.alpha > 0.0 {
            Some(cost_weight(opts.alpha, dt, s)?)
        } else {
            None
        };
        for (r, rng) in rngs.iter_mut().enumerate() {
            let dwr = dw.row_mut(r);
            rng.fill_normal(dwr);
            dwr.iter_mut().for_each(|z| *z *= sqrt_dt);
        }
        let recording = opts.record_from.is_none_or(|k0| t >= k0);

        if recording {
            let x = match x_var {
                Some(v) => v,
                None => g.matrix(&xs),
            };
            let f_vals = base.eval(t, &xs);
            let f_jac = base.jacobian(t, &xs);
            let f = g.external(x, d, f_vals.data, f_jac)?;
            let u = control.record(&mut g, &leaves, t, x)?;
            if let Some(w) = w {
                let sq = g.square(u);
                let norm = g.matmul(sq, ones)?;
                let inc = g.scale(norm, w);
                y_var = Some(match y_var {
                    Some(y) => g.add(y, inc)?,
                    None => {
                        let y0 = g.constant(&[count, 1], y_plain.clone())?;
                        g.add(y0, inc)?
                    }
                });
            }
            let drift = g.add(f, u)?;
            let step = g.scale(drift, dt);
            let moved = g.add(x, step)?;
            let sdw: Vec<f64> = dw.data.iter().map(|v| s * v).collect();
            let noise_c = g.constant(&[count, d], sdw)?;
            let nx = g.add(moved, noise_c)?;
            xs.data.copy_from_slice(g.value(nx));
            x_var = Some(nx);
        } else {
            let f_vals = base.eval(t, &xs);
            let u = control.eval(t, &xs);
            if let Some(w) = w {
                for (r, yr) in y_plain.iter_mut().enumerate() {
                    *yr += linalg::norm_sq(u.row(r)) * w;
                }
            }
            for i in 0..xs.data.len() {
                let drift = f_vals.data[i] + u.data[i];
                xs.data[i] = xs.data[i] + drift * dt + s * dw.data[i];
            }
        }
        for r in 0..count {
            if xs.row(r).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState {
                    step: k + 1,
                    trajectory: (first_stream + r as u64) as usize,
                });
            }
            states[r].extend_from_slice(xs.row(r));
            noise[r].extend_from_slice(dw.row(r));
        }
    }

    let x_final = match x_var {
        Some(v) => v,
        None => g.matrix(&xs),
    };
    let cost = match y_var {
        Some(v) => v,
        None => g.constant(&[count, 1], y_plain)?,
    };
    let trajectories = states
        .into_iter()
        .zip(noise)
        .enumerate()
        .map(|(r, (st, nz))| Trajectory {
            grid: *grid,
            dim: d,
            states: st,
            noise: nz,
            seed,
            stream: first_stream + r as u64,
        })
        .collect();
    Ok(RecordedBatch {
        graph: g,
        trajectories,
        x_final,
        cost,
    })
}

#[cfg(test)]
mod tests;
