//! Continuous-discrete unscented Kalman filter and RTS smoother on the
//! augmented state `s = (x, z)`, and the prediction-error (PEM) MAP
//! parameter estimator built on the filter's innovation decomposition.
//!
//! Between measurements the sigma-point moment equations
//!
//! ```text
//! dm/dt = Σ W_i F(χ_i)
//! dP/dt = M + Mᵀ + G̃ G̃ᵀ,   M = Σ W_i (χ_i - m)(F(χ_i) - dm/dt)ᵀ
//! dC/dt = C P⁻¹ M            (C = Cov(s(t₀), s(t)))
//! ```
//!
//! are integrated by classical RK4 with sigma points redrawn at every stage.
//! The filter keeps every fine step, so the smoother runs over the full
//! fine grid.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{Dynamics, SdeModel};
use crate::simulate::whole_steps;
use crate::solve::{lbfgs_minimize, InnerStatus};
use crate::trajectory::{Interpolant, Trajectory};

/// Mean and covariance of the augmented state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
}

impl GaussianBelief {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        check_len("covariance", mean.len() * mean.len(), cov.len())?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_at(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.dim() + j]
    }

    fn mean_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    fn cov_mat(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }

    fn from_parts(m: &DVector<f64>, p: &DMatrix<f64>) -> Self {
        let d = m.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = p[(i, j)];
            }
        }
        Self {
            mean: m.as_slice().to_vec(),
            cov,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UkfOptions {
    /// Largest RK4 step of the moment equations.
    pub dt_max: f64,
    /// Use `m ∓ c·Lᵢ` instead of `m ± c·Lᵢ` as the sigma-point pairs.
    pub flip_sigma_signs: bool,
}

impl Default for UkfOptions {
    fn default() -> Self {
        Self {
            dt_max: 0.01,
            flip_sigma_signs: false,
        }
    }
}

/// Unscented weights for `α = 1, β = 0, κ = 3 - D`: mean and covariance
/// weights coincide.
fn weights(d: usize) -> (f64, f64, f64) {
    let lambda = 3.0 - d as f64;
    let c = d as f64 + lambda;
    (lambda / c, 0.5 / c, c.sqrt())
}

/// Symmetrises `p` and returns a square root `L Lᵀ = P`, falling back to a
/// clipped eigendecomposition.
fn sqrt_cov(p: &mut DMatrix<f64>) -> Result<DMatrix<f64>> {
    let pt = p.transpose();
    *p = (&*p + pt) * 0.5;
    if let Some(ch) = p.clone().cholesky() {
        return Ok(ch.l());
    }
    check_psd(p)?;
    let eig = p.clone().symmetric_eigen();
    let mut v = eig.eigenvectors;
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        let s = ev.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    Ok(v)
}

fn check_psd(p: &DMatrix<f64>) -> Result<()> {
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::FilterDivergence("non-finite covariance".into()));
    }
    let scale = p.amax().max(1.0);
    let min = p.clone().symmetric_eigen().eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(Error::FilterDivergence(format!(
            "covariance lost positive semi-definiteness (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

fn sigma_points(m: &DVector<f64>, p: &mut DMatrix<f64>, flip: bool) -> Result<Vec<DVector<f64>>> {
    let d = m.len();
    let (_, _, c) = weights(d);
    let l = sqrt_cov(p)?;
    let sign = if flip { -1.0 } else { 1.0 };
    let mut pts = Vec::with_capacity(2 * d + 1);
    pts.push(m.clone());
    for i in 0..d {
        pts.push(m + l.column(i) * (sign * c));
    }
    for i in 0..d {
        pts.push(m - l.column(i) * (sign * c));
    }
    Ok(pts)
}

fn augmented_drift<D: Dynamics + ?Sized>(model: &D, t: f64, s: &DVector<f64>, theta: &[f64]) -> DVector<f64> {
    let (m, n) = (model.dim_x(), model.dim_z());
    let mut out = DVector::zeros(m + n);
    let (x, z) = s.as_slice().split_at(m);
    model.drift(t, x, z, theta, &mut out.as_mut_slice()[..m]);
    model.drift_h(t, x, z, theta, &mut out.as_mut_slice()[m..]);
    out
}

fn process_noise<D: Dynamics + ?Sized>(model: &D) -> DMatrix<f64> {
    let (m, n) = (model.dim_x(), model.dim_z());
    let g = DMatrix::from_row_slice(m, m, model.diffusion());
    let mut q = DMatrix::zeros(m + n, m + n);
    q.view_mut((0, 0), (m, m)).copy_from(&(&g * g.transpose()));
    q
}

struct Moments {
    dm: DVector<f64>,
    dp: DMatrix<f64>,
    /// `P⁻¹ M`, the statistically linearised drift Jacobian transposed.
    a_t: DMatrix<f64>,
}

fn moment_rates<D: Dynamics + ?Sized>(
    model: &D,
    t: f64,
    m: &DVector<f64>,
    p: &DMatrix<f64>,
    theta: &[f64],
    q: &DMatrix<f64>,
    opts: &UkfOptions,
    need_cross: bool,
) -> Result<Moments> {
    let d = m.len();
    let (w0, wi, _) = weights(d);
    let mut p = p.clone();
    let pts = sigma_points(m, &mut p, opts.flip_sigma_signs)?;
    let fs: Vec<DVector<f64>> = pts.iter().map(|s| augmented_drift(model, t, s, theta)).collect();
    let w = |i: usize| if i == 0 { w0 } else { wi };
    let mut dm = DVector::zeros(d);
    for (i, f) in fs.iter().enumerate() {
        dm += f * w(i);
    }
    let mut mm = DMatrix::zeros(d, d);
    for (i, (s, f)) in pts.iter().zip(&fs).enumerate() {
        mm += (s - m) * (f - &dm).transpose() * w(i);
    }
    let dp = &mm + mm.transpose() + q;
    let a_t = if need_cross {
        match p.clone().cholesky() {
            Some(ch) => ch.solve(&mm),
            None => {
                p.clone()
                    .pseudo_inverse(1e-12)
                    .map_err(|e| Error::FilterDivergence(e.to_string()))?
                    * &mm
            }
        }
    } else {
        DMatrix::zeros(0, 0)
    };
    if !dm.iter().all(|v| v.is_finite()) || !dp.iter().all(|v| v.is_finite()) {
        return Err(Error::FilterDivergence(format!("non-finite moment rates at t = {t}")));
    }
    Ok(Moments { dm, dp, a_t })
}

/// One RK4 step of `(m, P, C)`; returns the new mean, covariance and
/// `Cov(s(t), s(t + h))`.
#[allow(clippy::too_many_arguments)]
fn rk4_step<D: Dynamics + ?Sized>(
    model: &D,
    t: f64,
    h: f64,
    m: &DVector<f64>,
    p: &DMatrix<f64>,
    theta: &[f64],
    q: &DMatrix<f64>,
    opts: &UkfOptions,
    need_cross: bool,
) -> Result<(DVector<f64>, DMatrix<f64>, Option<DMatrix<f64>>)> {
    let c0 = p.clone();
    let cross_rate = |k: &Moments, c: &DMatrix<f64>| if need_cross { c * &k.a_t } else { DMatrix::zeros(0, 0) };
    let k1 = moment_rates(model, t, m, p, theta, q, opts, need_cross)?;
    let dc1 = cross_rate(&k1, &c0);
    let half = 0.5 * h;
    let k2 = moment_rates(
        model,
        t + half,
        &(m + &k1.dm * half),
        &(p + &k1.dp * half),
        theta,
        q,
        opts,
        need_cross,
    )?;
    let dc2 = if need_cross {
        cross_rate(&k2, &(&c0 + &dc1 * half))
    } else {
        dc1.clone()
    };
    let k3 = moment_rates(
        model,
        t + half,
        &(m + &k2.dm * half),
        &(p + &k2.dp * half),
        theta,
        q,
        opts,
        need_cross,
    )?;
    let dc3 = if need_cross {
        cross_rate(&k3, &(&c0 + &dc2 * half))
    } else {
        dc1.clone()
    };
    let k4 = moment_rates(
        model,
        t + h,
        &(m + &k3.dm * h),
        &(p + &k3.dp * h),
        theta,
        q,
        opts,
        need_cross,
    )?;
    let dc4 = if need_cross {
        cross_rate(&k4, &(&c0 + &dc3 * h))
    } else {
        dc1.clone()
    };
    let m_new = m + (&k1.dm + &k2.dm * 2.0 + &k3.dm * 2.0 + &k4.dm) * (h / 6.0);
    let mut p_new = p + (&k1.dp + &k2.dp * 2.0 + &k3.dp * 2.0 + &k4.dp) * (h / 6.0);
    let pt = p_new.transpose();
    p_new = (&p_new + pt) * 0.5;
    let cross = need_cross.then(|| &c0 + (dc1 + dc2 * 2.0 + dc3 * 2.0 + dc4) * (h / 6.0));
    if !m_new.iter().all(|v| v.is_finite()) {
        return Err(Error::FilterDivergence(format!("non-finite mean at t = {}", t + h)));
    }
    if p_new.clone().cholesky().is_none() {
        check_psd(&p_new)?;
    }
    Ok((m_new, p_new, cross))
}

/// Propagates a belief from `t0` to `t1` through the moment equations.
pub fn ukf_predict<D: Dynamics + ?Sized>(
    model: &D,
    belief: &GaussianBelief,
    theta: &[f64],
    t0: f64,
    t1: f64,
    opts: &UkfOptions,
) -> Result<GaussianBelief> {
    check_len("belief", model.dim_x() + model.dim_z(), belief.dim())?;
    if !(t1 >= t0) {
        return Err(Error::InvalidParameter(format!(
            "prediction needs t1 ≥ t0, got {t0} → {t1}"
        )));
    }
    if t1 == t0 {
        return Ok(belief.clone());
    }
    let n = ((t1 - t0) / opts.dt_max - 1e-9).ceil().max(1.0) as usize;
    let h = (t1 - t0) / n as f64;
    let q = process_noise(model);
    let mut m = belief.mean_vec();
    let mut p = belief.cov_mat();
    for i in 0..n {
        let (m1, p1, _) = rk4_step(model, t0 + i as f64 * h, h, &m, &p, theta, &q, opts, false)?;
        m = m1;
        p = p1;
    }
    Ok(GaussianBelief::from_parts(&m, &p))
}

/// Result of a measurement update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateResult {
    pub belief: GaussianBelief,
    pub innovation: f64,
    pub innovation_var: f64,
    /// `-½ [ln 2πS + e²/S]`.
    pub loglik: f64,
}

/// Sigma-point update for `y = s[measured] + N(0, σ_y²)`.
pub fn ukf_update(
    belief: &GaussianBelief,
    y: f64,
    sigma_y: f64,
    measured: usize,
    opts: &UkfOptions,
) -> Result<UpdateResult> {
    if !(sigma_y > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "measurement scale must be positive, got {sigma_y}"
        )));
    }
    let d = belief.dim();
    if measured >= d {
        return Err(Error::InvalidParameter(format!(
            "measured index {measured} out of range for dimension {d}"
        )));
    }
    let m = belief.mean_vec();
    let mut p = belief.cov_mat();
    let pts = sigma_points(&m, &mut p, opts.flip_sigma_signs)?;
    let (w0, wi, _) = weights(d);
    let w = |i: usize| if i == 0 { w0 } else { wi };
    let y_hat: f64 = pts.iter().enumerate().map(|(i, s)| w(i) * s[measured]).sum();
    let mut s_var = sigma_y * sigma_y;
    let mut cross = DVector::zeros(d);
    for (i, s) in pts.iter().enumerate() {
        let dy = s[measured] - y_hat;
        s_var += w(i) * dy * dy;
        cross += (s - &m) * (w(i) * dy);
    }
    if !(s_var > 0.0) {
        return Err(Error::FilterDivergence(format!(
            "innovation variance {s_var} is not positive"
        )));
    }
    let gain = cross / s_var;
    let e = y - y_hat;
    let m_new = &m + &gain * e;
    let mut p_new = &p - &gain * gain.transpose() * s_var;
    let pt = p_new.transpose();
    p_new = (&p_new + pt) * 0.5;
    if p_new.clone().cholesky().is_none() {
        check_psd(&p_new)?;
    }
    Ok(UpdateResult {
        belief: GaussianBelief::from_parts(&m_new, &p_new),
        innovation: e,
        innovation_var: s_var,
        loglik: -0.5 * ((2.0 * std::f64::consts::PI * s_var).ln() + e * e / s_var),
    })
}

/// Everything the smoother needs from a forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterHistory {
    /// Fine time nodes; measurement `k` sits at node `k · stride`.
    pub times: Vec<f64>,
    pub stride: usize,
    /// Beliefs after any update at each node.
    pub filtered: Vec<GaussianBelief>,
    /// `predicted[j]` is the prediction at node `j` from node `j - 1`
    /// (`predicted[0]` is the prior).
    pub predicted: Vec<GaussianBelief>,
    /// `cross[j] = Cov(s_{j-1}, s_j)` in row-major form (`cross[0]` empty).
    pub cross: Vec<Vec<f64>>,
    pub innovations: Vec<UpdateResult>,
    pub loglik: f64,
}

/// Runs the filter over measurements `y_k` at `k·t_s`, starting from the
/// model's initial-state prior.
pub fn ukf_filter<M: SdeModel + ?Sized>(
    model: &M,
    theta: &[f64],
    y: &[f64],
    t_s: f64,
    opts: &UkfOptions,
) -> Result<FilterHistory> {
    check_len("theta", model.dim_theta(), theta.len())?;
    let sigma_idx = model
        .meas_scale_index()
        .ok_or_else(|| Error::InvalidParameter("model has no measurement scale parameter".into()))?;
    let sigma_y = theta[sigma_idx];
    let stride = whole_steps(t_s, opts.dt_max)
        .filter(|&s| s > 0)
        .or_else(|| (opts.dt_max >= t_s).then_some(1))
        .unwrap_or(((t_s / opts.dt_max).ceil()) as usize);
    let h = t_s / stride as f64;
    let (mean0, sd0) = model.initial_state_prior();
    let d = mean0.len();
    check_len("initial-state prior", model.dim_x() + model.dim_z(), d)?;
    let mut cov0 = vec![0.0; d * d];
    for i in 0..d {
        cov0[i * d + i] = sd0[i] * sd0[i];
    }
    let prior = GaussianBelief::new(mean0, cov0)?;
    let measured = model.measured_state();
    let q = process_noise(model);

    let n_nodes = if y.is_empty() { 0 } else { (y.len() - 1) * stride + 1 };
    let mut hist = FilterHistory {
        times: Vec::with_capacity(n_nodes),
        stride,
        filtered: Vec::with_capacity(n_nodes),
        predicted: Vec::with_capacity(n_nodes),
        cross: Vec::with_capacity(n_nodes),
        innovations: Vec::with_capacity(y.len()),
        loglik: 0.0,
    };
    if y.is_empty() {
        return Ok(hist);
    }
    let up = ukf_update(&prior, y[0], sigma_y, measured, opts)?;
    hist.times.push(0.0);
    hist.predicted.push(prior);
    hist.cross.push(Vec::new());
    hist.loglik += up.loglik;
    hist.filtered.push(up.belief.clone());
    hist.innovations.push(up);
    let mut m = hist.filtered[0].mean_vec();
    let mut p = hist.filtered[0].cov_mat();
    for (k, &yk) in y.iter().enumerate().skip(1) {
        for s in 0..stride {
            let j = (k - 1) * stride + s;
            let t = j as f64 * h;
            let (m1, p1, c) = rk4_step(model, t, h, &m, &p, theta, &q, opts, true)?;
            let c = c.expect("cross-covariance requested");
            hist.times.push((j + 1) as f64 * h);
            let pred = GaussianBelief::from_parts(&m1, &p1);
            hist.cross.push(GaussianBelief::from_parts(&m1, &c).cov);
            if s + 1 == stride {
                let up = ukf_update(&pred, yk, sigma_y, measured, opts)?;
                hist.loglik += up.loglik;
                m = up.belief.mean_vec();
                p = up.belief.cov_mat();
                hist.filtered.push(up.belief.clone());
                hist.innovations.push(up);
            } else {
                m = m1;
                p = p1;
                hist.filtered.push(pred.clone());
            }
            hist.predicted.push(pred);
        }
    }
    Ok(hist)
}

/// Backward RTS pass over every fine node of a filter history.
pub fn uks_smooth(history: &FilterHistory) -> Result<Vec<GaussianBelief>> {
    let n = history.filtered.len();
    if n == 0 {
        return Err(Error::InvalidParameter("empty filter history".into()));
    }
    if history.predicted.len() != n || history.cross.len() != n || history.times.len() != n {
        return Err(Error::InvalidParameter("incomplete filter history".into()));
    }
    let d = history.filtered[0].dim();
    let mut out = vec![history.filtered[n - 1].clone(); n];
    let mut ms = history.filtered[n - 1].mean_vec();
    let mut ps = history.filtered[n - 1].cov_mat();
    for j in (0..n - 1).rev() {
        let mf = history.filtered[j].mean_vec();
        let pf = history.filtered[j].cov_mat();
        let mp = history.predicted[j + 1].mean_vec();
        let pp = history.predicted[j + 1].cov_mat();
        check_len("cross-covariance", d * d, history.cross[j + 1].len())?;
        let c = DMatrix::from_row_slice(d, d, &history.cross[j + 1]);
        // G = C Pp⁻¹
        let gain = match pp.clone().cholesky() {
            Some(ch) => ch.solve(&c.transpose()).transpose(),
            None => {
                &c * pp
                    .clone()
                    .pseudo_inverse(1e-12)
                    .map_err(|e| Error::FilterDivergence(e.to_string()))?
            }
        };
        ms = &mf + &gain * (&ms - &mp);
        ps = &pf + &gain * (&ps - &pp) * gain.transpose();
        let pt = ps.transpose();
        ps = (&ps + pt) * 0.5;
        out[j] = GaussianBelief::from_parts(&ms, &ps);
    }
    Ok(out)
}

/// Writes `t, mean…, var…` rows (diagonal covariance).
pub fn write_beliefs_csv<W: Write>(times: &[f64], beliefs: &[GaussianBelief], out: W) -> Result<()> {
    check_len("beliefs", times.len(), beliefs.len())?;
    let d = beliefs.first().map_or(0, GaussianBelief::dim);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|i| format!("mean{i}")));
    header.extend((0..d).map(|i| format!("var{i}")));
    w.write_record(&header)?;
    for (t, b) in times.iter().zip(beliefs) {
        let mut row = vec![t.to_string()];
        row.extend(b.mean.iter().map(f64::to_string));
        row.extend((0..d).map(|i| b.cov_at(i, i).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Smoothed means as a continuous path (cubic Hermite through the fine nodes).
pub fn smoothed_trajectory<M: SdeModel + ?Sized>(
    model: &M,
    theta: &[f64],
    history: &FilterHistory,
    smoothed: &[GaussianBelief],
) -> Trajectory {
    let (m, n) = (model.dim_x(), model.dim_z());
    let mut x = Vec::with_capacity(smoothed.len() * m);
    let mut z = Vec::with_capacity(smoothed.len() * n);
    for b in smoothed {
        x.extend_from_slice(&b.mean[..m]);
        z.extend_from_slice(&b.mean[m..]);
    }
    Trajectory {
        times: history.times.clone(),
        dim_x: m,
        dim_z: n,
        x,
        z,
        theta: theta.to_vec(),
        interpolant: Interpolant::Samples,
    }
}

/// `-[Σ_k ln N(e_k; 0, S_k) + ln π(θ)]`; filter failures give `+∞`.
pub fn pem_neglogpost<M: SdeModel + ?Sized>(theta: &[f64], y: &[f64], t_s: f64, model: &M, opts: &UkfOptions) -> f64 {
    match ukf_filter(model, theta, y, t_s, opts) {
        Ok(h) => {
            let v = -(h.loglik + model.log_prior_theta(theta));
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        }
        Err(_) => f64::INFINITY,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PemOptions {
    pub ukf: UkfOptions,
    /// θ indices held at their starting values.
    pub fixed: Vec<usize>,
    /// Relative central-difference step.
    pub fd_step: f64,
    /// Gradient tolerance, scaled by `1 + |objective|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PemOptions {
    fn default() -> Self {
        Self {
            ukf: UkfOptions::default(),
            fixed: Vec::new(),
            fd_step: 1e-5,
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PemStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PemResult {
    /// Natural-scale estimate.
    pub theta: Vec<f64>,
    pub neglogpost: f64,
    pub status: PemStatus,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Minimises [`pem_neglogpost`] from `theta_start` by L-BFGS with
/// central-difference gradients; log-scale parameters are optimised as
/// logarithms.
pub fn pem_estimate<M: SdeModel + ?Sized>(
    y: &[f64],
    t_s: f64,
    model: &M,
    theta_start: &[f64],
    opts: &PemOptions,
) -> Result<PemResult> {
    check_len("theta", model.dim_theta(), theta_start.len())?;
    let log_idx = model.log_scale_params();
    if log_idx.iter().any(|&i| !(theta_start[i] > 0.0)) {
        return Err(Error::InvalidParameter(
            "log-scale parameters must start positive".into(),
        ));
    }
    let free: Vec<usize> = (0..theta_start.len()).filter(|i| !opts.fixed.contains(i)).collect();
    let to_natural = |u: &[f64]| {
        let mut th = theta_start.to_vec();
        for (k, &i) in free.iter().enumerate() {
            th[i] = if log_idx.contains(&i) { u[k].exp() } else { u[k] };
        }
        th
    };
    let u0: Vec<f64> = free
        .iter()
        .map(|&i| {
            if log_idx.contains(&i) {
                theta_start[i].ln()
            } else {
                theta_start[i]
            }
        })
        .collect();
    let f0 = pem_neglogpost(theta_start, y, t_s, model, &opts.ukf);
    if !f0.is_finite() {
        return Err(Error::FilterDivergence(
            "filter diverged at the starting parameters".into(),
        ));
    }
    let tol = opts.tol * (1.0 + f0.abs());
    let mut evaluations = 0usize;
    let objective = |u: &[f64], grad: &mut [f64]| -> f64 {
        let f = pem_neglogpost(&to_natural(u), y, t_s, model, &opts.ukf);
        evaluations += 1;
        if !f.is_finite() {
            return f64::INFINITY;
        }
        let mut w = u.to_vec();
        for i in 0..u.len() {
            let h = opts.fd_step * u[i].abs().max(1.0);
            w[i] = u[i] + h;
            let fp = pem_neglogpost(&to_natural(&w), y, t_s, model, &opts.ukf);
            w[i] = u[i] - h;
            let fm = pem_neglogpost(&to_natural(&w), y, t_s, model, &opts.ukf);
            evaluations += 2;
            // one-sided when a step leaves the filter's domain
            grad[i] = match (fp.is_finite(), fm.is_finite()) {
                (true, true) => (fp - fm) / (2.0 * h),
                (true, false) => (fp - f) / h,
                (false, true) => (f - fm) / h,
                (false, false) => 0.0,
            };
            w[i] = u[i];
        }
        f
    };
    let res = lbfgs_minimize(objective, &u0, tol, opts.max_iter, 20, |_, _, _, _, _| {});
    let status = match res.status {
        InnerStatus::Converged => PemStatus::Converged,
        InnerStatus::MaxIterations => PemStatus::MaxIterations,
        InnerStatus::LineSearchFailure => PemStatus::LineSearchFailure,
    };
    Ok(PemResult {
        theta: to_natural(&res.x),
        neglogpost: res.f,
        status,
        iterations: res.iterations,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::scalar_kalman;
    use crate::model::{DuffingModel, DuffingParams, IntegratorModel, Jacobian, MeasurementKind, OuModel};
    use crate::simulate::{derive_rng, sample_measurements_gaussian, simulate_order15, NoiseFree, Stream};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ou_data(a: f64, sigma: f64, sigma_y: f64, n: usize, seed: u64) -> Vec<f64> {
        let model = OuModel::new(sigma).unwrap();
        let path = simulate_order15(
            &model,
            &[0.8],
            &[],
            &[a, sigma_y],
            0.01,
            n as f64 * 0.1,
            &mut derive_rng(seed, 0, Stream::ProcessNoise),
        )
        .unwrap();
        sample_measurements_gaussian(&path, 0.1, sigma_y, &mut derive_rng(seed, 0, Stream::MeasurementNoise)).unwrap()
    }

    #[test]
    fn ou_prediction_matches_exact_moments() {
        let model = OuModel::new(0.7).unwrap();
        let (a, dt) = (1.3, 0.37);
        let b0 = GaussianBelief::new(vec![0.9], vec![0.25]).unwrap();
        let b1 = ukf_predict(&model, &b0, &[a, 0.1], 0.0, dt, &UkfOptions::default()).unwrap();
        let mean = 0.9 * (-a * dt).exp();
        let var = 0.25 * (-2.0 * a * dt).exp() + 0.49 * (1.0 - (-2.0 * a * dt).exp()) / (2.0 * a);
        assert!((b1.mean[0] - mean).abs() <= 1e-6 * mean.abs());
        assert!((b1.cov[0] - var).abs() <= 1e-6 * var);
    }

    #[test]
    fn zero_diffusion_follows_the_linear_flow() {
        let base = IntegratorModel::new(1.0).unwrap();
        let model = NoiseFree::new(&base);
        let dt = 0.73;
        let p = [0.5, 0.1, 0.1, 0.3];
        let b0 = GaussianBelief::new(vec![0.2, -1.0], p.to_vec()).unwrap();
        let b1 = ukf_predict(&model, &b0, &[0.1], 0.0, dt, &UkfOptions::default()).unwrap();
        // Φ = [[1, 0], [dt, 1]] on (x, z)
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, dt, 1.0]);
        let expect = &phi * DMatrix::from_row_slice(2, 2, &p) * phi.transpose();
        for i in 0..2 {
            for j in 0..2 {
                assert!((b1.cov_at(i, j) - expect[(i, j)]).abs() <= 1e-6);
            }
        }
        assert!((b1.mean[1] - (-1.0 + 0.2 * dt)).abs() <= 1e-12);

        let ou = OuModel::new(0.0).unwrap();
        let b0 = GaussianBelief::new(vec![1.0], vec![2.0]).unwrap();
        let b1 = ukf_predict(&ou, &b0, &[0.8, 0.1], 0.0, 1.0, &UkfOptions::default()).unwrap();
        assert!((b1.cov[0] - 2.0 * (-1.6f64).exp()).abs() <= 1e-6);
    }

    #[test]
    fn empty_interval_is_identity() {
        let model = DuffingModel::nominal(MeasurementKind::Gaussian);
        let b0 = GaussianBelief::new(vec![0.3, 0.1], vec![0.2, 0.01, 0.01, 0.1]).unwrap();
        let b1 = ukf_predict(
            &model,
            &b0,
            &DuffingParams::nominal().theta(),
            2.0,
            2.0,
            &UkfOptions::default(),
        )
        .unwrap();
        assert_eq!(b0, b1);
        assert!(ukf_predict(
            &model,
            &b0,
            &DuffingParams::nominal().theta(),
            2.0,
            1.0,
            &UkfOptions::default()
        )
        .is_err());
    }

    #[test]
    fn scalar_update_examples() {
        let b = GaussianBelief::new(vec![0.0], vec![1.0]).unwrap();
        let up = ukf_update(&b, 1.0, 1.0, 0, &UkfOptions::default()).unwrap();
        assert!((up.belief.mean[0] - 0.5).abs() < 1e-14);
        assert!((up.belief.cov[0] - 0.5).abs() < 1e-14);
        let b = GaussianBelief::new(vec![0.4, -0.3], vec![1.0, 0.2, 0.2, 0.5]).unwrap();
        let up = ukf_update(&b, -0.3, 0.1, 1, &UkfOptions::default()).unwrap();
        assert!(up.innovation.abs() < 1e-14);
        assert!((up.belief.mean[0] - 0.4).abs() < 1e-14 && (up.belief.mean[1] + 0.3).abs() < 1e-14);
        assert!(ukf_update(&b, 0.0, 0.0, 1, &UkfOptions::default()).is_err());
    }

    #[test]
    fn update_matches_kalman_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let d = rng.random_range(1..4usize);
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let p = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
            let m = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let idx = rng.random_range(0..d);
            let (y, sy) = (rng.random_range(-2.0..2.0), rng.random_range(0.05..1.0));
            let b = GaussianBelief::from_parts(&m, &p);
            let up = ukf_update(&b, y, sy, idx, &UkfOptions::default()).unwrap();
            let s = p[(idx, idx)] + sy * sy;
            let k = p.column(idx) / s;
            let m_ref = &m + &k * (y - m[idx]);
            let p_ref = &p - &k * k.transpose() * s;
            for i in 0..d {
                assert!((up.belief.mean[i] - m_ref[i]).abs() < 1e-10);
                for j in 0..d {
                    assert!((up.belief.cov_at(i, j) - p_ref[(i, j)]).abs() < 1e-10);
                }
            }
            let ll = -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (y - m[idx]).powi(2) / s);
            assert!((up.loglik - ll).abs() < 1e-10);
        }
    }

    #[test]
    fn filter_and_smoother_match_closed_form_on_ou() {
        let (a, sigma, sy) = (0.9, 0.6, 0.2);
        let y = ou_data(a, sigma, sy, 100, 3);
        let model = OuModel::new(sigma).unwrap();
        let theta = [a, sy];
        let hist = ukf_filter(&model, &theta, &y, 0.1, &UkfOptions::default()).unwrap();
        let sm = uks_smooth(&hist).unwrap();
        let kf = scalar_kalman(a, sigma, 1.0, sy, 0.1, &y);
        assert!((hist.loglik - kf.loglik).abs() < 1e-8 * kf.loglik.abs());
        for k in 0..y.len() {
            let j = k * hist.stride;
            assert!((hist.filtered[j].mean[0] - kf.filtered[k].0).abs() < 1e-8);
            assert!((hist.filtered[j].cov[0] - kf.filtered[k].1).abs() < 1e-8);
            assert!((sm[j].mean[0] - kf.smoothed[k].0).abs() < 1e-8);
            assert!((sm[j].cov[0] - kf.smoothed[k].1).abs() < 1e-8);
        }
        assert_eq!(sm.last(), hist.filtered.last());
        for (s, f) in sm.iter().zip(&hist.filtered) {
            assert!(s.cov[0] <= f.cov[0] + 1e-12);
        }
    }

    #[test]
    fn smoothed_covariance_is_below_filtered_in_two_dimensions() {
        let model = IntegratorModel::new(0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hist = ukf_filter(&model, &[0.3], &y, 0.1, &UkfOptions::default()).unwrap();
        let sm = uks_smooth(&hist).unwrap();
        for (s, f) in sm.iter().zip(&hist.filtered) {
            let diff = f.cov_mat() - s.cov_mat();
            assert!(diff.symmetric_eigen().eigenvalues.min() >= -1e-12);
        }
    }

    #[test]
    fn smoother_rejects_missing_history() {
        let empty = FilterHistory {
            times: vec![],
            stride: 1,
            filtered: vec![],
            predicted: vec![],
            cross: vec![],
            innovations: vec![],
            loglik: 0.0,
        };
        assert!(uks_smooth(&empty).is_err());
    }

    fn ou_log_prior(model: &OuModel, theta: &[f64]) -> f64 {
        model.log_prior_theta(theta)
    }

    #[test]
    fn neglogpost_matches_kalman_decomposition() {
        let (a, sigma, sy) = (1.1, 0.5, 0.15);
        let y = ou_data(a, sigma, sy, 80, 4);
        let model = OuModel::new(sigma).unwrap();
        for theta in [[a, sy], [0.4, 0.3], [2.0, 0.05]] {
            let kf = scalar_kalman(theta[0], sigma, 1.0, theta[1], 0.1, &y);
            let exact = -(kf.loglik + ou_log_prior(&model, &theta));
            let fine = UkfOptions {
                dt_max: 0.001,
                ..Default::default()
            };
            let v = pem_neglogpost(&theta, &y, 0.1, &model, &fine);
            assert!((v - exact).abs() < 1e-8 * exact.abs().max(1.0), "{v} vs {exact}");
        }
    }

    /// Delegates to an OU model with its parameter prior shifted by a constant.
    struct ShiftedPrior(OuModel, f64);

    impl Dynamics for ShiftedPrior {
        fn dim_x(&self) -> usize {
            self.0.dim_x()
        }
        fn dim_z(&self) -> usize {
            self.0.dim_z()
        }
        fn drift(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64], out: &mut [f64]) {
            self.0.drift(t, x, z, theta, out)
        }
        fn drift_h(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64], out: &mut [f64]) {
            self.0.drift_h(t, x, z, theta, out)
        }
        fn diffusion(&self) -> &[f64] {
            self.0.diffusion()
        }
    }

    impl SdeModel for ShiftedPrior {
        fn dim_theta(&self) -> usize {
            self.0.dim_theta()
        }
        fn diffusion_inv(&self) -> &[f64] {
            self.0.diffusion_inv()
        }
        fn drift_div(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64]) -> f64 {
            self.0.drift_div(t, x, z, theta)
        }
        fn drift_jacobian(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64], jac: &mut Jacobian) {
            self.0.drift_jacobian(t, x, z, theta, jac)
        }
        fn drift_h_jacobian(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64], jac: &mut Jacobian) {
            self.0.drift_h_jacobian(t, x, z, theta, jac)
        }
        fn drift_div_gradient(
            &self,
            t: f64,
            x: &[f64],
            z: &[f64],
            theta: &[f64],
            gx: &mut [f64],
            gz: &mut [f64],
            gt: &mut [f64],
        ) {
            self.0.drift_div_gradient(t, x, z, theta, gx, gz, gt)
        }
        fn log_prior(&self, x0: &[f64], z0: &[f64], theta: &[f64]) -> f64 {
            self.0.log_prior(x0, z0, theta) + self.1
        }
        fn log_prior_gradient(
            &self,
            x0: &[f64],
            z0: &[f64],
            theta: &[f64],
            gx0: &mut [f64],
            gz0: &mut [f64],
            gt: &mut [f64],
        ) -> f64 {
            self.0.log_prior_gradient(x0, z0, theta, gx0, gz0, gt) + self.1
        }
        fn log_prior_theta(&self, theta: &[f64]) -> f64 {
            self.0.log_prior_theta(theta) + self.1
        }
        fn initial_state_prior(&self) -> (Vec<f64>, Vec<f64>) {
            self.0.initial_state_prior()
        }
        fn meas_loglik(&self, y: &[f64], states: &[f64], theta: &[f64]) -> f64 {
            self.0.meas_loglik(y, states, theta)
        }
        fn meas_loglik_gradient(
            &self,
            y: &[f64],
            states: &[f64],
            theta: &[f64],
            gs: &mut [f64],
            gt: &mut [f64],
        ) -> f64 {
            self.0.meas_loglik_gradient(y, states, theta, gs, gt)
        }
        fn log_scale_params(&self) -> &[usize] {
            self.0.log_scale_params()
        }
        fn meas_scale_index(&self) -> Option<usize> {
            self.0.meas_scale_index()
        }
    }

    #[test]
    fn prior_shift_shifts_the_objective() {
        let y = ou_data(1.0, 0.5, 0.1, 40, 5);
        let base = OuModel::new(0.5).unwrap();
        let theta = [0.8, 0.12];
        let v0 = pem_neglogpost(&theta, &y, 0.1, &base, &UkfOptions::default());
        let v1 = pem_neglogpost(&theta, &y, 0.1, &ShiftedPrior(base, 2.5), &UkfOptions::default());
        assert!((v0 - v1 - 2.5).abs() < 1e-9);
    }

    #[test]
    fn large_noise_scale_approaches_the_flat_limit() {
        let y = ou_data(1.0, 0.5, 0.1, 40, 6);
        let model = OuModel::new(0.5).unwrap();
        let n = y.len() as f64;
        let mut prev_ll = f64::INFINITY;
        let mut prev_gap = f64::INFINITY;
        for sy in [1.0, 2.0, 4.0, 8.0, 16.0, 64.0, 256.0, 1024.0] {
            let ll = ukf_filter(&model, &[1.0, sy], &y, 0.1, &UkfOptions::default())
                .unwrap()
                .loglik;
            let flat = -n * (sy.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
            let gap = (ll - flat).abs();
            assert!(ll < prev_ll, "loglik not decreasing at σ_y = {sy}");
            assert!(gap < prev_gap, "gap to the flat limit not shrinking at σ_y = {sy}");
            prev_ll = ll;
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-4);
    }

    #[test]
    fn pem_recovers_noise_free_ou_decay() {
        let a = 0.7;
        let model = OuModel::new(0.0).unwrap();
        let path = simulate_order15(
            &model,
            &[1.5],
            &[],
            &[a, 0.01],
            0.01,
            5.0,
            &mut derive_rng(1, 0, Stream::ProcessNoise),
        )
        .unwrap();
        let y = sample_measurements_gaussian(&path, 0.1, 0.0, &mut derive_rng(1, 0, Stream::MeasurementNoise)).unwrap();
        let opts = PemOptions {
            fixed: vec![1],
            ..Default::default()
        };
        let res = pem_estimate(&y, 0.1, &model, &[0.3, 0.01], &opts).unwrap();
        assert!((res.theta[0] - a).abs() < 1e-3, "{:?}", res);
        assert_eq!(res.theta[1], 0.01);

        // restarting at the optimum stays there
        let again = pem_estimate(&y, 0.1, &model, &res.theta, &opts).unwrap();
        assert!((again.theta[0] - res.theta[0]).abs() < 1e-5);
    }

    #[test]
    fn long_duffing_run_keeps_covariances_psd() {
        let model = DuffingModel::nominal(MeasurementKind::Gaussian);
        let theta = DuffingParams::nominal().theta();
        let path = simulate_order15(
            &model,
            &[0.1],
            &[0.2],
            &theta,
            0.005,
            100.0,
            &mut derive_rng(2, 0, Stream::ProcessNoise),
        )
        .unwrap();
        let y = sample_measurements_gaussian(&path, 0.1, 0.1, &mut derive_rng(2, 0, Stream::MeasurementNoise)).unwrap();
        let hist = ukf_filter(&model, &theta, &y, 0.1, &UkfOptions::default()).unwrap();
        assert!(hist.filtered.len() > 10_000);
        let sm = uks_smooth(&hist).unwrap();
        for b in hist.filtered.iter().chain(&hist.predicted).chain(&sm) {
            let p = b.cov_mat();
            assert!((&p - p.transpose()).amax() <= 1e-12);
            assert!(p.symmetric_eigen().eigenvalues.min() >= -1e-10);
        }
    }

    #[test]
    fn sigma_point_signs_do_not_matter() {
        let model = DuffingModel::nominal(MeasurementKind::Gaussian);
        let theta = DuffingParams::nominal().theta();
        let path = simulate_order15(
            &model,
            &[0.1],
            &[0.2],
            &theta,
            0.005,
            10.0,
            &mut derive_rng(3, 0, Stream::ProcessNoise),
        )
        .unwrap();
        let y = sample_measurements_gaussian(&path, 0.1, 0.1, &mut derive_rng(3, 0, Stream::MeasurementNoise)).unwrap();
        let a = pem_neglogpost(&theta, &y, 0.1, &model, &UkfOptions::default());
        let b = pem_neglogpost(
            &theta,
            &y,
            0.1,
            &model,
            &UkfOptions {
                flip_sigma_signs: true,
                ..Default::default()
            },
        );
        assert!((a - b).abs() <= 1e-10 * a.abs());
    }

    #[test]
    fn belief_csv_layout() {
        let b = vec![GaussianBelief::new(vec![1.0, 2.0], vec![0.5, 0.0, 0.0, 0.25]).unwrap()];
        let mut buf = Vec::new();
        write_beliefs_csv(&[0.0], &b, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t,mean0,mean1,var0,var1\n0,1,2,0.5,0.25\n"
        );
    }
}
