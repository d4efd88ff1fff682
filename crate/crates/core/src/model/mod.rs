//! Model interface for systems of the form
//!
//! ```text
//! dX = f(t, X, Z, θ) dt + G dW
//! dZ = h(t, X, Z, θ) dt
//! ```
//!
//! with a constant, full-rank diffusion matrix `G`, a joint prior density over
//! `(X(0), Z(0), θ)` and a measurement likelihood on sampled states.
//!
//! All matrices are stored row-major in flat slices. Parameter vectors are in
//! their natural scale; estimators that optimise a positive parameter in log
//! space consult [`SdeModel::log_scale_params`].

mod duffing;
mod integrator;
mod likelihood;
mod ou;

pub use duffing::{
    duffing_drift, duffing_drift_div, duffing_log_prior, smootherstep, smootherstep_derivative, DuffingModel,
    DuffingParams, DuffingPrior,
};
pub use integrator::IntegratorModel;
pub use likelihood::{gaussian_meas_loglik, student_t_meas_loglik, MeasurementKind, STUDENT_T_DOF};
pub use ou::OuModel;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense Jacobian blocks of a vector field with respect to `(x, z, θ)`.
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub rows: usize,
    /// `rows × dim_x`
    pub dx: Vec<f64>,
    /// `rows × dim_z`
    pub dz: Vec<f64>,
    /// `rows × dim_theta`
    pub dtheta: Vec<f64>,
}

impl Jacobian {
    pub fn new(rows: usize, dim_x: usize, dim_z: usize, dim_theta: usize) -> Self {
        Self {
            rows,
            dx: vec![0.0; rows * dim_x],
            dz: vec![0.0; rows * dim_z],
            dtheta: vec![0.0; rows * dim_theta],
        }
    }

    pub fn clear(&mut self) {
        self.dx.fill(0.0);
        self.dz.fill(0.0);
        self.dtheta.fill(0.0);
    }
}

/// The parts of a model needed to simulate it.
pub trait Dynamics: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_z(&self) -> usize;

    /// Noise-driven drift `f`, written into `out` (length `dim_x`).
    fn drift(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64], out: &mut [f64]);

    /// Noise-free drift `h`, written into `out` (length `dim_z`).
    fn drift_h(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64], out: &mut [f64]);

    /// Row-major `dim_x × dim_x` diffusion matrix `G`.
    fn diffusion(&self) -> &[f64];
}

/// A fully specified estimation model.
///
/// Gradient and Jacobian methods overwrite their output buffers.
pub trait SdeModel: Dynamics {
    fn dim_theta(&self) -> usize;

    /// Row-major inverse of [`Dynamics::diffusion`].
    fn diffusion_inv(&self) -> &[f64];

    /// `Σ_k ∂f_k/∂x_k`.
    fn drift_div(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64]) -> f64;

    fn drift_jacobian(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64], jac: &mut Jacobian);

    fn drift_h_jacobian(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64], jac: &mut Jacobian);

    #[allow(clippy::too_many_arguments)]
    fn drift_div_gradient(
        &self,
        t: f64,
        x: &[f64],
        z: &[f64],
        theta: &[f64],
        gx: &mut [f64],
        gz: &mut [f64],
        gtheta: &mut [f64],
    );

    /// `ln π(x0, z0, θ)`.
    fn log_prior(&self, x0: &[f64], z0: &[f64], theta: &[f64]) -> f64;

    /// Value and gradient of [`SdeModel::log_prior`].
    fn log_prior_gradient(
        &self,
        x0: &[f64],
        z0: &[f64],
        theta: &[f64],
        gx0: &mut [f64],
        gz0: &mut [f64],
        gtheta: &mut [f64],
    ) -> f64;

    /// The parameter-only part of the prior, used by the filter baseline.
    fn log_prior_theta(&self, theta: &[f64]) -> f64;

    /// Mean and standard deviation of the independent Gaussian prior on the
    /// augmented initial state `(x0, z0)`.
    fn initial_state_prior(&self) -> (Vec<f64>, Vec<f64>);

    /// `ln ψ(y | states, θ)`, where `states` holds one augmented `(x, z)` row
    /// per measurement instant.
    fn meas_loglik(&self, y: &[f64], states: &[f64], theta: &[f64]) -> f64;

    /// Value and gradient of [`SdeModel::meas_loglik`].
    fn meas_loglik_gradient(
        &self,
        y: &[f64],
        states: &[f64],
        theta: &[f64],
        gstates: &mut [f64],
        gtheta: &mut [f64],
    ) -> f64;

    /// Indices of θ entries that are strictly positive and are optimised as
    /// logarithms.
    fn log_scale_params(&self) -> &[usize];

    /// Augmented-state index observed by the linear-Gaussian filter baseline.
    fn measured_state(&self) -> usize {
        if self.dim_z() > 0 {
            self.dim_x()
        } else {
            0
        }
    }

    /// θ index of the measurement noise scale, if estimated.
    fn meas_scale_index(&self) -> Option<usize>;
}

/// Inverts a row-major square matrix, failing when it is numerically singular.
pub fn invert_diffusion(g: &[f64], dim: usize) -> Result<Vec<f64>> {
    crate::error::check_len("diffusion matrix", dim * dim, g.len())?;
    let mat = nalgebra::DMatrix::from_row_slice(dim, dim, g);
    let lu = mat.clone().lu();
    let inv = lu
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("diffusion matrix is singular".into()))?;
    if !inv.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter("diffusion matrix is singular".into()));
    }
    let resid = (&mat * &inv - nalgebra::DMatrix::identity(dim, dim)).amax();
    if resid > 1e-8 {
        return Err(Error::InvalidParameter(format!(
            "diffusion matrix is ill-conditioned (|G G⁻¹ - I| = {resid:.3e})"
        )));
    }
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            out[i * dim + j] = inv[(i, j)];
        }
    }
    Ok(out)
}

/// Registration check: the cached diffusion inverse must invert `G`, and the
/// supplied divergence must match central differences of the drift.
///
/// Points are drawn with `|x|, |z| ≤ state_bound`; `thetas` supplies the
/// parameter vectors to test (cycled over the points).
pub fn register<M: SdeModel + ?Sized>(
    model: &M,
    thetas: &[Vec<f64>],
    state_bound: f64,
    n_points: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let m = model.dim_x();
    let n = model.dim_z();
    let g = model.diffusion();
    let g_inv = model.diffusion_inv();
    for i in 0..m {
        for j in 0..m {
            let v: f64 = (0..m).map(|k| g[i * m + k] * g_inv[k * m + j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            if !((v - target).abs() <= 1e-10) {
                return Err(Error::ModelCheck(format!(
                    "diffusion_inv does not invert diffusion at ({i},{j})"
                )));
            }
        }
    }
    if thetas.is_empty() {
        return Ok(());
    }
    let mut x = vec![0.0; m];
    let mut z = vec![0.0; n];
    for p in 0..n_points {
        let theta = &thetas[p % thetas.len()];
        crate::error::check_len("theta", model.dim_theta(), theta.len())?;
        x.iter_mut()
            .for_each(|v| *v = rng.random_range(-state_bound..=state_bound));
        z.iter_mut()
            .for_each(|v| *v = rng.random_range(-state_bound..=state_bound));
        let t = rng.random_range(0.0..10.0);
        let div = model.drift_div(t, &x, &z, theta);
        let fd = fd_divergence(model, t, &x, &z, theta);
        let rel = (div - fd).abs() / div.abs().max(1.0);
        if !(rel <= 1e-5) {
            return Err(Error::ModelCheck(format!(
                "drift_div = {div} but finite differences give {fd} at t={t}, x={x:?}, z={z:?}"
            )));
        }
    }
    Ok(())
}

/// Central-difference divergence of the drift with respect to `x`.
pub fn fd_divergence<M: Dynamics + ?Sized>(model: &M, t: f64, x: &[f64], z: &[f64], theta: &[f64]) -> f64 {
    let m = model.dim_x();
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; m];
    let mut fm = vec![0.0; m];
    let mut div = 0.0;
    for k in 0..m {
        let h = 1e-6 * x[k].abs().max(1.0);
        xp[k] = x[k] + h;
        model.drift(t, &xp, z, theta, &mut fp);
        xp[k] = x[k] - h;
        model.drift(t, &xp, z, theta, &mut fm);
        xp[k] = x[k];
        div += (fp[k] - fm[k]) / (2.0 * h);
    }
    div
}

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Log-density of `N(mean, sd²)` at `v`.
pub(crate) fn normal_ln_pdf(v: f64, mean: f64, sd: f64) -> f64 {
    let u = (v - mean) / sd;
    -0.5 * u * u - sd.ln() - LN_SQRT_2PI
}

/// Log-density of the gamma distribution with the given shape and scale.
pub(crate) fn gamma_ln_pdf(v: f64, shape: f64, scale: f64) -> f64 {
    (shape - 1.0) * v.ln() - v / scale - statrs::function::gamma::ln_gamma(shape) - shape * scale.ln()
}
