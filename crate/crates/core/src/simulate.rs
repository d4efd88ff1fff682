//! Ground-truth path simulation and measurement sampling.
//!
//! Paths are advanced with the explicit strong order-1.5 Taylor scheme for
//! additive noise. The scheme needs `∂a/∂t`, `J·a`, `J·g_j` and second
//! derivatives of the augmented drift `a = (f, h)` along the diffusion
//! columns `g_j`; all are taken by central differences of the model drift.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dynamics;

/// A simulated path on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPath {
    pub dt: f64,
    pub times: Vec<f64>,
    pub dim_x: usize,
    pub dim_z: usize,
    /// Row-major, `times.len() × dim_x`.
    pub x: Vec<f64>,
    /// Row-major, `times.len() × dim_z`.
    pub z: Vec<f64>,
    pub seed: Option<u64>,
}

impl SimPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn x_at(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim_x..(i + 1) * self.dim_x]
    }

    pub fn z_at(&self, i: usize) -> &[f64] {
        &self.z[i * self.dim_z..(i + 1) * self.dim_z]
    }

    /// Writes `t, x…, z…` columns with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(column_names("x", self.dim_x));
        header.extend(column_names("z", self.dim_z));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.times[i].to_string()];
            row.extend(self.x_at(i).iter().map(f64::to_string));
            row.extend(self.z_at(i).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn column_names(prefix: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![prefix.to_string()]
    } else {
        (0..dim).map(|i| format!("{prefix}{i}")).collect()
    }
}

/// Writes `t, y` measurement columns.
pub fn write_measurements_csv<W: Write>(t_s: f64, y: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "y"])?;
    for (k, v) in y.iter().enumerate() {
        w.write_record([(k as f64 * t_s).to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the `t, y` layout of [`write_measurements_csv`]; times must start
/// at zero and be uniformly spaced. Returns `(t_s, y)`.
pub fn read_measurements_csv<R: std::io::Read>(input: R) -> Result<(f64, Vec<f64>)> {
    let mut r = csv::Reader::from_reader(input);
    let mut t = Vec::new();
    let mut y = Vec::new();
    for row in r.records() {
        let row = row?;
        if row.len() != 2 {
            return Err(Error::InvalidParameter(format!(
                "expected 2 columns, got {}",
                row.len()
            )));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidParameter(format!("bad number '{s}': {e}")))
        };
        t.push(parse(&row[0])?);
        y.push(parse(&row[1])?);
    }
    if t.len() < 2 {
        return Err(Error::InvalidParameter("need at least two measurements".into()));
    }
    let t_s = t[1] - t[0];
    let uniform = t
        .iter()
        .enumerate()
        .all(|(k, &tk)| (tk - k as f64 * t_s).abs() <= 1e-9 * (1.0 + tk.abs()));
    if t[0] != 0.0 || !(t_s > 0.0) || !uniform {
        return Err(Error::Misaligned("measurement times must be 0, t_s, 2 t_s, ...".into()));
    }
    Ok((t_s, y))
}

/// Provenance record written next to simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub run_index: u64,
    pub config_hash: String,
    pub dt: f64,
    pub t_end: f64,
    pub t_s: f64,
    pub n_steps: usize,
    pub n_measurements: usize,
}

/// Independent random streams of a single Monte Carlo run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    InitialState = 0,
    ProcessNoise = 1,
    MeasurementNoise = 2,
}

/// Derives the generator for `(master seed, run index, stream)`. ChaCha is
/// counter based, so every triple gets a disjoint sequence.
pub fn derive_rng(master_seed: u64, run_index: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(run_index.wrapping_mul(8).wrapping_add(stream as u64));
    rng
}

/// Presents a model with its diffusion switched off.
pub struct NoiseFree<'a, D: ?Sized> {
    inner: &'a D,
    zeros: Vec<f64>,
}

impl<'a, D: Dynamics + ?Sized> NoiseFree<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        let m = inner.dim_x();
        Self {
            inner,
            zeros: vec![0.0; m * m],
        }
    }
}

impl<D: Dynamics + ?Sized> Dynamics for NoiseFree<'_, D> {
    fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }

    fn dim_z(&self) -> usize {
        self.inner.dim_z()
    }

    fn drift(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64], out: &mut [f64]) {
        self.inner.drift(t, x, z, theta, out)
    }

    fn drift_h(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64], out: &mut [f64]) {
        self.inner.drift_h(t, x, z, theta, out)
    }

    fn diffusion(&self) -> &[f64] {
        &self.zeros
    }
}

/// Number of whole steps of `step` in `span`, or `None` when `span` is not an
/// integer multiple of `step` (relative tolerance 1e-9).
pub fn whole_steps(span: f64, step: f64) -> Option<usize> {
    if !(step > 0.0) || !(span >= 0.0) {
        return None;
    }
    let r = span / step;
    let n = r.round();
    if (r - n).abs() <= 1e-9 * n.max(1.0) {
        Some(n as usize)
    } else {
        None
    }
}

/// Evaluates the augmented drift `(f, h)` at a packed state `(x, z)`.
fn augmented_drift<D: Dynamics + ?Sized>(model: &D, t: f64, y: &[f64], theta: &[f64], out: &mut [f64]) {
    let m = model.dim_x();
    let (x, z) = y.split_at(m);
    let (fx, fz) = out.split_at_mut(m);
    model.drift(t, x, z, theta, fx);
    model.drift_h(t, x, z, theta, fz);
}

/// Scratch buffers for [`order15_step`].
pub struct Order15Workspace {
    a: Vec<f64>,
    plus: Vec<f64>,
    minus: Vec<f64>,
    probe: Vec<f64>,
    l0: Vec<f64>,
    lj: Vec<f64>,
}

impl Order15Workspace {
    pub fn new(dim: usize, dim_noise: usize) -> Self {
        Self {
            a: vec![0.0; dim],
            plus: vec![0.0; dim],
            minus: vec![0.0; dim],
            probe: vec![0.0; dim],
            l0: vec![0.0; dim],
            lj: vec![0.0; dim * dim_noise],
        }
    }
}

/// Central directional derivative of the augmented drift along `dir`,
/// accumulated as `scale · J·dir` into `acc`.
#[allow(clippy::too_many_arguments)]
fn directional<D: Dynamics + ?Sized>(
    model: &D,
    t: f64,
    y: &[f64],
    theta: &[f64],
    dir: &[f64],
    scale: f64,
    ws_probe: &mut [f64],
    plus: &mut [f64],
    minus: &mut [f64],
    acc: &mut [f64],
) {
    let norm = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if norm == 0.0 {
        return;
    }
    let ymag = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let eps = 1e-6 * ymag / norm;
    for ((p, &yi), &di) in ws_probe.iter_mut().zip(y).zip(dir) {
        *p = yi + eps * di;
    }
    augmented_drift(model, t, ws_probe, theta, plus);
    for ((p, &yi), &di) in ws_probe.iter_mut().zip(y).zip(dir) {
        *p = yi - eps * di;
    }
    augmented_drift(model, t, ws_probe, theta, minus);
    for ((o, &p), &q) in acc.iter_mut().zip(plus.iter()).zip(minus.iter()) {
        *o += scale * (p - q) / (2.0 * eps);
    }
}

/// One step of the order-1.5 scheme with given increments `dw[j] = ΔW_j`
/// and `dz[j] = ∫∫ dW_j ds` over `[t, t + dt]`. `state` is the packed
/// `(x, z)` vector and is advanced in place.
pub fn order15_step<D: Dynamics + ?Sized>(
    model: &D,
    t: f64,
    state: &mut [f64],
    theta: &[f64],
    dt: f64,
    dw: &[f64],
    dz: &[f64],
    ws: &mut Order15Workspace,
) {
    let m = model.dim_x();
    let dim = state.len();
    let g = model.diffusion();
    augmented_drift(model, t, state, theta, &mut ws.a);

    // L0 a = ∂a/∂t + J a + ½ Σ_j ∂²a/∂g_j²
    ws.l0.fill(0.0);
    let ht = 1e-6 * t.abs().max(1.0);
    augmented_drift(model, t + ht, state, theta, &mut ws.plus);
    augmented_drift(model, t - ht, state, theta, &mut ws.minus);
    for i in 0..dim {
        ws.l0[i] += (ws.plus[i] - ws.minus[i]) / (2.0 * ht);
    }
    let a = ws.a.clone();
    directional(
        model,
        t,
        state,
        theta,
        &a,
        1.0,
        &mut ws.probe,
        &mut ws.plus,
        &mut ws.minus,
        &mut ws.l0,
    );

    let ymag = state.iter().fold(1.0f64, |mx, v| mx.max(v.abs()));
    let mut col = vec![0.0; dim];
    ws.lj.fill(0.0);
    for j in 0..m {
        col.fill(0.0);
        for k in 0..m {
            col[k] = g[k * m + j];
        }
        let norm = col.iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
        if norm == 0.0 {
            continue;
        }
        directional(
            model,
            t,
            state,
            theta,
            &col,
            1.0,
            &mut ws.probe,
            &mut ws.plus,
            &mut ws.minus,
            &mut ws.lj[j * dim..(j + 1) * dim],
        );
        // second directional derivative, step ~ eps^(1/4)
        let eps = 1e-4 * ymag / norm;
        for i in 0..dim {
            ws.probe[i] = state[i] + eps * col[i];
        }
        augmented_drift(model, t, &ws.probe, theta, &mut ws.plus);
        for i in 0..dim {
            ws.probe[i] = state[i] - eps * col[i];
        }
        augmented_drift(model, t, &ws.probe, theta, &mut ws.minus);
        for i in 0..dim {
            ws.l0[i] += 0.5 * (ws.plus[i] - 2.0 * ws.a[i] + ws.minus[i]) / (eps * eps);
        }
    }

    for i in 0..dim {
        let mut v = state[i] + ws.a[i] * dt + 0.5 * ws.l0[i] * dt * dt;
        if i < m {
            for j in 0..m {
                v += g[i * m + j] * dw[j];
            }
        }
        for j in 0..m {
            v += ws.lj[j * dim + i] * dz[j];
        }
        state[i] = v;
    }
}

/// Draws the correlated pair `(ΔW, ΔZ)` for one channel over a step `dt`:
/// `Var ΔW = dt`, `Var ΔZ = dt³/3`, `Cov = dt²/2`.
pub fn draw_increment(dt: f64, rng: &mut impl Rng) -> (f64, f64) {
    let u1: f64 = StandardNormal.sample(rng);
    let u2: f64 = StandardNormal.sample(rng);
    let dw = u1 * dt.sqrt();
    let dz = 0.5 * dt.powf(1.5) * (u1 + u2 / 3f64.sqrt());
    (dw, dz)
}

/// Simulates the model on `[0, t_end]` with step `dt`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_order15<D: Dynamics + ?Sized>(
    model: &D,
    x0: &[f64],
    z0: &[f64],
    theta: &[f64],
    dt: f64,
    t_end: f64,
    rng: &mut impl Rng,
) -> Result<SimPath> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
    }
    let steps = whole_steps(t_end, dt)
        .ok_or_else(|| Error::Misaligned(format!("horizon {t_end} is not a multiple of the step {dt}")))?;
    let m = model.dim_x();
    let n = model.dim_z();
    crate::error::check_len("x0", m, x0.len())?;
    crate::error::check_len("z0", n, z0.len())?;

    let mut state: Vec<f64> = x0.iter().chain(z0).copied().collect();
    let mut times = Vec::with_capacity(steps + 1);
    let mut xs = Vec::with_capacity((steps + 1) * m);
    let mut zs = Vec::with_capacity((steps + 1) * n);
    let mut ws = Order15Workspace::new(m + n, m);
    let mut dw = vec![0.0; m];
    let mut dz = vec![0.0; m];

    times.push(0.0);
    xs.extend_from_slice(&state[..m]);
    zs.extend_from_slice(&state[m..]);
    for k in 0..steps {
        let t = k as f64 * dt;
        for j in 0..m {
            let (w, z) = draw_increment(dt, rng);
            dw[j] = w;
            dz[j] = z;
        }
        order15_step(model, t, &mut state, theta, dt, &dw, &dz, &mut ws);
        times.push((k + 1) as f64 * dt);
        xs.extend_from_slice(&state[..m]);
        zs.extend_from_slice(&state[m..]);
    }
    Ok(SimPath {
        dt,
        times,
        dim_x: m,
        dim_z: n,
        x: xs,
        z: zs,
        seed: None,
    })
}

/// Independent `N(0, σ0²)` draws of the initial velocity and position.
pub fn sample_initial_state(sigma_0: f64, rng: &mut impl Rng) -> (f64, f64) {
    let x0: f64 = StandardNormal.sample(rng);
    let z0: f64 = StandardNormal.sample(rng);
    (sigma_0 * x0, sigma_0 * z0)
}

/// The sampled noise-free value (first `z` component, or `x` when the model
/// has no noise-free state) at every `t_s`, `k = 0..=N`.
pub fn measured_values(path: &SimPath, t_s: f64) -> Result<Vec<f64>> {
    let stride = whole_steps(t_s, path.dt).filter(|&s| s > 0).ok_or_else(|| {
        Error::Misaligned(format!(
            "sampling period {t_s} is not a multiple of the simulation step {}",
            path.dt
        ))
    })?;
    let n_meas = whole_steps(path.t_end(), t_s).ok_or_else(|| {
        Error::Misaligned(format!(
            "horizon {} is not a multiple of the sampling period {t_s}",
            path.t_end()
        ))
    })?;
    Ok((0..=n_meas)
        .map(|k| {
            let i = k * stride;
            if path.dim_z > 0 {
                path.z_at(i)[0]
            } else {
                path.x_at(i)[0]
            }
        })
        .collect())
}

/// `y_k = z(k t_s) + σ_y ε_k`.
pub fn sample_measurements_gaussian(path: &SimPath, t_s: f64, sigma_y: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(sigma_y >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "measurement std must be non-negative, got {sigma_y}"
        )));
    }
    let mut y = measured_values(path, t_s)?;
    for v in &mut y {
        let e: f64 = StandardNormal.sample(rng);
        *v += sigma_y * e;
    }
    Ok(y)
}

/// Each sample is an outlier with probability `p_o` (std `σ_o`), otherwise a
/// regular measurement (std `σ_r`).
pub fn sample_measurements_mixture(
    path: &SimPath,
    t_s: f64,
    p_o: f64,
    sigma_o: f64,
    sigma_r: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p_o) {
        return Err(Error::InvalidParameter(format!(
            "outlier probability must lie in [0, 1], got {p_o}"
        )));
    }
    if !(sigma_o > 0.0) || !(sigma_r > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "mixture scales must be positive, got {sigma_o}, {sigma_r}"
        )));
    }
    let mut y = measured_values(path, t_s)?;
    for v in &mut y {
        let u: f64 = rng.random();
        let e: f64 = StandardNormal.sample(rng);
        let s = if u < p_o { sigma_o } else { sigma_r };
        *v += s * e;
    }
    Ok(y)
}
