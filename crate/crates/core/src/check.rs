//! Self-contained oracle suites used by the `check` subcommand and the
//! acceptance tests. Each returns the measured error so callers choose the
//! threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::baseline::{pem_neglogpost, ukf_filter, uks_smooth, UkfOptions};
use crate::error::Result;
use crate::model::{DuffingModel, DuffingParams, MeasurementKind, OuModel, SdeModel};
use crate::simulate::{
    derive_rng, order15_step, sample_measurements_gaussian, simulate_order15, Order15Workspace, Stream,
};
use crate::solve::fd_gradient;
use crate::transcribe::{CollocationGrid, CollocationProblem, EstimatorKind};

/// Outcome of one named check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckOutcome {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }

    /// Passes when `value >= threshold`.
    pub fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value >= threshold,
        }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(
            f,
            "{tag} {}: {:.3e} (threshold {:.3e})",
            self.name, self.value, self.threshold
        )
    }
}

/// Per-component relative error with denominator `max(|a|, |b|, 1)`.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Node values `[x, z]` of a random smooth path: `z` a sum of three
/// sinusoids with amplitudes up to `amp` and `x = ż`, so the collocation
/// defects are small.
fn random_smooth_nodes(grid: &CollocationGrid, amp: f64, rng: &mut impl Rng) -> Vec<f64> {
    let coef: Vec<[f64; 3]> = (0..3)
        .map(|_| {
            [
                rng.random_range(-amp..amp),
                rng.random_range(0.3..2.0),
                rng.random_range(0.0..6.0),
            ]
        })
        .collect();
    let mut v = Vec::with_capacity(2 * grid.n_nodes());
    for t in grid.node_times() {
        v.push(coef.iter().map(|[a, w, p]| a * w * (w * t + p).cos()).sum());
        v.push(coef.iter().map(|[a, w, p]| a * (w * t + p).sin()).sum());
    }
    v
}

/// Largest relative gradient error over `n_vectors` random decision vectors
/// for each of JME/MEE × Gaussian/Student-t.
pub fn merit_gradient_error(n_vectors: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = CollocationGrid::new(2.0, 0.1, 0.05)?;
    let mut worst = 0.0f64;
    for kind in [EstimatorKind::Jme, EstimatorKind::Mee] {
        for lik in [MeasurementKind::Gaussian, MeasurementKind::StudentT] {
            let y = (0..grid.n_meas).map(|_| rng.random_range(-1.5..1.5)).collect();
            let p = CollocationProblem::build(DuffingModel::nominal(lik), grid, y, kind)?;
            for _ in 0..n_vectors {
                let mut v = random_smooth_nodes(&grid, 1.0, &mut rng);
                v.iter_mut().for_each(|e| *e += rng.random_range(-0.01..0.01));
                v.extend([
                    rng.random_range(0.0..2.0),
                    rng.random_range(-2.0..0.0),
                    rng.random_range(0.0..0.5),
                    rng.random_range(0.1f64..0.5).ln(),
                ]);
                let mut g = vec![0.0; v.len()];
                p.merit_gradient(&v, &mut g);
                let fd = fd_gradient(|w| p.merit(w), &v, 1e-6);
                worst = worst.max(max_rel_error(&g, &fd));
            }
        }
    }
    Ok(worst)
}

/// Largest relative error of `merit_JME - merit_MEE` against `d T / 2` over
/// `n_paths` random trajectories with `|z| <= 1000`. The difference is taken
/// term by term over the merit components.
pub fn om_energy_error(n_paths: usize, t_end: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = CollocationGrid::new(t_end, 0.1, 0.05)?;
    let mut worst = 0.0f64;
    for _ in 0..n_paths {
        let y = (0..grid.n_meas).map(|_| rng.random_range(-1.5..1.5)).collect();
        let jme = CollocationProblem::build(
            DuffingModel::nominal(MeasurementKind::Gaussian),
            grid,
            y,
            EstimatorKind::Jme,
        )?;
        let mee = jme.with_kind(EstimatorKind::Mee);
        let mut v = random_smooth_nodes(&grid, 330.0, &mut rng);
        let d = rng.random_range(0.05..1.0);
        v.extend([rng.random_range(0.5..2.0), rng.random_range(-2.0..0.0), d, 0.1f64.ln()]);
        let (a, b) = (jme.merit_parts(&v), mee.merit_parts(&v));
        let diff =
            (a.loglik - b.loglik) + (a.log_prior - b.log_prior) + (a.energy - b.energy) + (a.divergence - b.divergence);
        let expect = 0.5 * d * t_end;
        worst = worst.max((diff - expect).abs() / expect);
    }
    Ok(worst)
}

/// Largest absolute defect over `n_paths` random cubic `z` paths with
/// `x = ż`.
pub fn hermite_simpson_cubic_defect(n_paths: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = CollocationGrid::new(5.0, 0.1, 0.05)?;
    let y = vec![0.0; grid.n_meas];
    let p = CollocationProblem::build(
        DuffingModel::nominal(MeasurementKind::Gaussian),
        grid,
        y,
        EstimatorKind::Jme,
    )?;
    let mut d = vec![0.0; p.n_constraints()];
    let mut worst = 0.0f64;
    for _ in 0..n_paths {
        let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let mut v = Vec::new();
        for t in grid.node_times() {
            v.push(c[1] + 2.0 * c[2] * t + 3.0 * c[3] * t * t);
            v.push(c[0] + t * (c[1] + t * (c[2] + t * c[3])));
        }
        v.extend(DuffingParams::nominal().theta());
        p.defects(&v, &mut d);
        worst = d.iter().fold(worst, |m, e| m.max(e.abs()));
    }
    Ok(worst)
}

/// Closed-form Kalman filter / RTS smoother for `dX = -a X dt + σ dW`,
/// `y_k = X(k t_s) + σ_y ε`, `X(0) ~ N(0, p0)`.
#[derive(Debug, Clone)]
pub struct ScalarKalman {
    /// `(mean, variance)` after each update.
    pub filtered: Vec<(f64, f64)>,
    pub smoothed: Vec<(f64, f64)>,
    pub loglik: f64,
}

pub fn scalar_kalman(a: f64, sigma: f64, p0: f64, sigma_y: f64, t_s: f64, y: &[f64]) -> ScalarKalman {
    let phi = (-a * t_s).exp();
    let q = sigma * sigma * (1.0 - (-2.0 * a * t_s).exp()) / (2.0 * a);
    let r = sigma_y * sigma_y;
    let (mut m, mut p) = (0.0, p0);
    let mut filtered = Vec::with_capacity(y.len());
    let mut predicted = Vec::with_capacity(y.len());
    let mut loglik = 0.0;
    for (k, &yk) in y.iter().enumerate() {
        if k > 0 {
            m *= phi;
            p = phi * phi * p + q;
        }
        predicted.push((m, p));
        let s = p + r;
        let e = yk - m;
        loglik += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + e * e / s);
        let g = p / s;
        m += g * e;
        p -= g * g * s;
        filtered.push((m, p));
    }
    let mut smoothed = filtered.clone();
    for k in (0..y.len().saturating_sub(1)).rev() {
        let (mf, pf) = filtered[k];
        let (mp, pp) = predicted[k + 1];
        let g = pf * phi / pp;
        let (ms, ps) = smoothed[k + 1];
        smoothed[k] = (mf + g * (ms - mp), pf + g * g * (ps - pp));
    }
    ScalarKalman {
        filtered,
        smoothed,
        loglik,
    }
}

/// Errors of the unscented filter, smoother and PEM objective against the
/// closed-form Kalman quantities on a scalar OU model.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KalmanOracleErrors {
    /// Max abs error of filtered means and variances.
    pub filter: f64,
    /// Max abs error of smoothed means and variances.
    pub smoother: f64,
    /// Relative error of the log-likelihood.
    pub loglik: f64,
    /// Relative error of the negative log-posterior.
    pub neglogpost: f64,
}

/// Runs the unscented filter with moment step `dt_max` on `steps`
/// measurements of a simulated OU path.
pub fn kalman_oracle_errors(steps: usize, dt_max: f64, seed: u64) -> Result<KalmanOracleErrors> {
    let (a, sigma, sigma_y, t_s) = (0.9, 0.6, 0.2, 0.1);
    let model = OuModel::new(sigma)?;
    let theta = [a, sigma_y];
    let path = simulate_order15(
        &model,
        &[0.8],
        &[],
        &theta,
        0.01,
        steps as f64 * t_s,
        &mut derive_rng(seed, 0, Stream::ProcessNoise),
    )?;
    let mut y = sample_measurements_gaussian(&path, t_s, sigma_y, &mut derive_rng(seed, 0, Stream::MeasurementNoise))?;
    y.truncate(steps);
    let opts = UkfOptions {
        dt_max,
        ..Default::default()
    };
    let hist = ukf_filter(&model, &theta, &y, t_s, &opts)?;
    let sm = uks_smooth(&hist)?;
    let kf = scalar_kalman(a, sigma, model.initial_state_prior().1[0].powi(2), sigma_y, t_s, &y);
    let mut filter = 0.0f64;
    let mut smoother = 0.0f64;
    for k in 0..y.len() {
        let j = k * hist.stride;
        let f = &hist.filtered[j];
        filter = filter
            .max((f.mean[0] - kf.filtered[k].0).abs())
            .max((f.cov[0] - kf.filtered[k].1).abs());
        let s = &sm[j];
        smoother = smoother
            .max((s.mean[0] - kf.smoothed[k].0).abs())
            .max((s.cov[0] - kf.smoothed[k].1).abs());
    }
    let exact = -(kf.loglik + model.log_prior_theta(&theta));
    let npl = pem_neglogpost(&theta, &y, t_s, &model, &opts);
    Ok(KalmanOracleErrors {
        filter,
        smoother,
        loglik: (hist.loglik - kf.loglik).abs() / kf.loglik.abs(),
        neglogpost: (npl - exact).abs() / exact.abs(),
    })
}

/// Mean absolute endpoint errors of the order-1.5 scheme on
/// `dX = -a X dt + σ dW` for each step in `dts` (each a multiple of the
/// smallest), against the exact solution driven by the same Brownian path.
pub fn ou_strong_errors(dts: &[f64], n_paths: usize, t_end: f64, seed: u64) -> Result<Vec<f64>> {
    let (a, sigma, x0) = (1.0, 1.0, 1.0);
    let model = OuModel::new(sigma)?;
    let theta = [a, 1.0];
    let fine = dts.iter().copied().fold(f64::INFINITY, f64::min);
    let n_fine = (t_end / fine).round() as usize;
    let ratios: Vec<usize> = dts.iter().map(|dt| (dt / fine).round() as usize).collect();

    // joint law of (ΔW, ΔZ, ∫ e^{-a(δ-s)} dW_s) over one fine step δ
    let dl = fine;
    let e = (-a * dl).exp();
    let cov = nalgebra::Matrix3::new(
        dl,
        dl * dl / 2.0,
        (1.0 - e) / a,
        dl * dl / 2.0,
        dl.powi(3) / 3.0,
        (1.0 - e * (1.0 + a * dl)) / (a * a),
        (1.0 - e) / a,
        (1.0 - e * (1.0 + a * dl)) / (a * a),
        (1.0 - e * e) / (2.0 * a),
    );
    let chol = cov
        .cholesky()
        .ok_or_else(|| crate::Error::Degenerate("increment covariance is not positive definite".into()))?
        .l();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs = vec![0.0; dts.len()];
    let mut ws = Order15Workspace::new(1, 1);
    let mut dw = vec![0.0; n_fine];
    let mut dz = vec![0.0; n_fine];
    for _ in 0..n_paths {
        let mut exact = x0;
        for i in 0..n_fine {
            let u = nalgebra::Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let s = chol * u;
            dw[i] = s[0];
            dz[i] = s[1];
            exact = e * exact + sigma * s[2];
        }
        for (slot, &r) in ratios.iter().enumerate() {
            let h = fine * r as f64;
            let mut state = [x0];
            for k in 0..n_fine / r {
                // aggregate r fine increments into one coarse pair
                let (mut w, mut z) = (0.0, 0.0);
                for i in k * r..(k + 1) * r {
                    z += dz[i] + fine * w;
                    w += dw[i];
                }
                order15_step(&model, k as f64 * h, &mut state, &theta, h, &[w], &[z], &mut ws);
            }
            errs[slot] += (state[0] - exact).abs();
        }
    }
    errs.iter_mut().for_each(|e| *e /= n_paths as f64);
    Ok(errs)
}

/// Least-squares slope of `ln err` against `ln dt`.
pub fn log_log_slope(dts: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = dts.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// The quick suite run by `sdemap check`.
pub fn run_checks() -> Result<Vec<CheckOutcome>> {
    let mut out = vec![CheckOutcome::at_most(
        "merit gradient vs finite differences",
        merit_gradient_error(10, 1)?,
        1e-6,
    )];
    out.push(CheckOutcome::at_most(
        "JME - MEE = d T / 2",
        om_energy_error(5, 50.0, 2)?,
        1e-10,
    ));
    out.push(CheckOutcome::at_most(
        "Hermite-Simpson cubic defects",
        hermite_simpson_cubic_defect(20, 3)?,
        1e-13,
    ));
    let k = kalman_oracle_errors(200, 0.001, 4)?;
    out.push(CheckOutcome::at_most("UKF vs Kalman filter", k.filter, 1e-8));
    out.push(CheckOutcome::at_most("UKS vs RTS smoother", k.smoother, 1e-8));
    out.push(CheckOutcome::at_most("UKF log-likelihood", k.loglik, 1e-8));
    out.push(CheckOutcome::at_most("PEM objective", k.neglogpost, 1e-8));
    let dts = [0.02, 0.01, 0.005];
    let errs = ou_strong_errors(&dts, 500, 1.0, 5)?;
    out.push(CheckOutcome::at_least(
        "OU strong order",
        log_log_slope(&dts, &errs),
        1.4,
    ));
    Ok(out)
}
