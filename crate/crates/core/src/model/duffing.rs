//! Forced Duffing oscillator with a smootherstep-bounded drift.
//!
//! `x` is the velocity (noise-driven) and `z` the position (noise-free):
//!
//! ```text
//! dX = φ(Z) [-a Z³ - b Z - d X + γ cos t] dt + σ_d dW
//! dZ = X dt
//! ```
//!
//! The estimated parameter vector is `θ = [a, b, d, σ_y]`.

use serde::{Deserialize, Serialize};

use super::likelihood::{gaussian_terms, student_t_terms};
use super::{gamma_ln_pdf, normal_ln_pdf, Dynamics, Jacobian, MeasurementKind, SdeModel};
use crate::error::{Error, Result};

const BOUND_INNER: f64 = 1000.0;
const BOUND_OUTER: f64 = 1001.0;

/// Nominal and estimated quantities of the oscillator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuffingParams {
    pub a: f64,
    pub b: f64,
    pub d: f64,
    /// Forcing amplitude (known).
    pub gamma: f64,
    /// Diffusion intensity (known).
    pub sigma_d: f64,
    /// Measurement scale (estimated).
    pub sigma_y: f64,
}

impl Default for DuffingParams {
    fn default() -> Self {
        Self::nominal()
    }
}

impl DuffingParams {
    pub const fn nominal() -> Self {
        Self {
            a: 1.0,
            b: -1.0,
            d: 0.2,
            gamma: 0.3,
            sigma_d: 0.1,
            sigma_y: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.a, self.b, self.d, self.gamma, self.sigma_d, self.sigma_y]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("non-finite Duffing parameter".into()));
        }
        if !(self.sigma_d > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma_d must be positive, got {}",
                self.sigma_d
            )));
        }
        if !(self.sigma_y > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma_y must be positive, got {}",
                self.sigma_y
            )));
        }
        Ok(())
    }

    /// The estimated part `[a, b, d, σ_y]`.
    pub fn theta(&self) -> [f64; 4] {
        [self.a, self.b, self.d, self.sigma_y]
    }

    pub fn with_theta(&self, theta: &[f64]) -> Self {
        Self {
            a: theta[0],
            b: theta[1],
            d: theta[2],
            sigma_y: theta[3],
            ..*self
        }
    }
}

/// Prior hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuffingPrior {
    /// Std of the zero-mean Gaussian priors on `a`, `b`, `d`.
    pub sigma_theta: f64,
    /// Std of the zero-mean Gaussian priors on `x(0)` and `z(0)`.
    pub sigma_0: f64,
    /// Gamma shape for `σ_y`.
    pub shape: f64,
    /// Gamma scale for `σ_y` (mean = shape·scale).
    pub scale: f64,
}

impl Default for DuffingPrior {
    fn default() -> Self {
        Self {
            sigma_theta: 10.0,
            sigma_0: 0.4,
            shape: 1.1,
            scale: 10.0,
        }
    }
}

impl DuffingPrior {
    pub fn log_density(&self, x0: f64, z0: f64, a: f64, b: f64, d: f64, sigma_y: f64) -> f64 {
        normal_ln_pdf(x0, 0.0, self.sigma_0)
            + normal_ln_pdf(z0, 0.0, self.sigma_0)
            + self.log_density_theta(a, b, d, sigma_y)
    }

    pub fn log_density_theta(&self, a: f64, b: f64, d: f64, sigma_y: f64) -> f64 {
        normal_ln_pdf(a, 0.0, self.sigma_theta)
            + normal_ln_pdf(b, 0.0, self.sigma_theta)
            + normal_ln_pdf(d, 0.0, self.sigma_theta)
            + gamma_ln_pdf(sigma_y, self.shape, self.scale)
    }
}

fn eta(e: f64) -> f64 {
    e * e * e * (10.0 + e * (-15.0 + 6.0 * e))
}

fn eta_prime(e: f64) -> f64 {
    30.0 * e * e * (1.0 + e * (-2.0 + e))
}

/// C² ramp: 1 for `|z| ≤ 1000`, 0 for `|z| ≥ 1001`.
pub fn smootherstep(z: f64) -> f64 {
    let a = z.abs();
    if a <= BOUND_INNER {
        1.0
    } else if a >= BOUND_OUTER {
        0.0
    } else {
        eta(BOUND_OUTER - a)
    }
}

pub fn smootherstep_derivative(z: f64) -> f64 {
    let a = z.abs();
    if a <= BOUND_INNER || a >= BOUND_OUTER {
        0.0
    } else {
        -eta_prime(BOUND_OUTER - a) * z.signum()
    }
}

#[inline]
fn unbounded_drift(t: f64, x: f64, z: f64, a: f64, b: f64, d: f64, gamma: f64) -> f64 {
    -a * z * z * z - b * z - d * x + gamma * t.cos()
}

pub fn duffing_drift(t: f64, x: f64, z: f64, p: &DuffingParams) -> f64 {
    smootherstep(z) * unbounded_drift(t, x, z, p.a, p.b, p.d, p.gamma)
}

/// Divergence of the drift with respect to `x`.
pub fn duffing_drift_div(_t: f64, _x: f64, z: f64, p: &DuffingParams) -> f64 {
    -smootherstep(z) * p.d
}

/// Log prior density under the default hyper-parameters.
pub fn duffing_log_prior(x0: f64, z0: f64, p: &DuffingParams) -> Result<f64> {
    if !(p.sigma_y > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma_y must be positive, got {}",
            p.sigma_y
        )));
    }
    Ok(DuffingPrior::default().log_density(x0, z0, p.a, p.b, p.d, p.sigma_y))
}

/// The oscillator as an estimation model.
#[derive(Debug, Clone)]
pub struct DuffingModel {
    gamma: f64,
    sigma_d: f64,
    g: [f64; 1],
    g_inv: [f64; 1],
    prior: DuffingPrior,
    likelihood: MeasurementKind,
}

const LOG_SCALE: [usize; 1] = [3];

impl DuffingModel {
    pub fn new(params: &DuffingParams, prior: DuffingPrior, likelihood: MeasurementKind) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            gamma: params.gamma,
            sigma_d: params.sigma_d,
            g: [params.sigma_d],
            g_inv: [1.0 / params.sigma_d],
            prior,
            likelihood,
        })
    }

    /// Nominal model with the default priors.
    pub fn nominal(likelihood: MeasurementKind) -> Self {
        Self::new(&DuffingParams::nominal(), DuffingPrior::default(), likelihood).expect("nominal parameters are valid")
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn sigma_d(&self) -> f64 {
        self.sigma_d
    }

    pub fn prior(&self) -> &DuffingPrior {
        &self.prior
    }

    pub fn likelihood(&self) -> MeasurementKind {
        self.likelihood
    }

    fn pairs<'a>(y: &'a [f64], states: &'a [f64]) -> impl Iterator<Item = (f64, f64)> + 'a {
        y.iter().enumerate().map(move |(k, &y)| (y, states[2 * k + 1]))
    }
}

impl Dynamics for DuffingModel {
    fn dim_x(&self) -> usize {
        1
    }

    fn dim_z(&self) -> usize {
        1
    }

    fn drift(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = smootherstep(z[0]) * unbounded_drift(t, x[0], z[0], theta[0], theta[1], theta[2], self.gamma);
    }

    fn drift_h(&self, _t: f64, x: &[f64], _z: &[f64], _theta: &[f64], out: &mut [f64]) {
        out[0] = x[0];
    }

    fn diffusion(&self) -> &[f64] {
        &self.g
    }
}

impl SdeModel for DuffingModel {
    fn dim_theta(&self) -> usize {
        4
    }

    fn diffusion_inv(&self) -> &[f64] {
        &self.g_inv
    }

    fn drift_div(&self, _t: f64, _x: &[f64], z: &[f64], theta: &[f64]) -> f64 {
        -smootherstep(z[0]) * theta[2]
    }

    fn drift_jacobian(&self, t: f64, x: &[f64], z: &[f64], theta: &[f64], jac: &mut Jacobian) {
        let (x, z) = (x[0], z[0]);
        let (a, b, d) = (theta[0], theta[1], theta[2]);
        let phi = smootherstep(z);
        let dphi = smootherstep_derivative(z);
        let g = unbounded_drift(t, x, z, a, b, d, self.gamma);
        jac.dx[0] = -phi * d;
        jac.dz[0] = dphi * g + phi * (-3.0 * a * z * z - b);
        jac.dtheta[0] = -phi * z * z * z;
        jac.dtheta[1] = -phi * z;
        jac.dtheta[2] = -phi * x;
        jac.dtheta[3] = 0.0;
    }

    fn drift_h_jacobian(&self, _t: f64, _x: &[f64], _z: &[f64], _theta: &[f64], jac: &mut Jacobian) {
        jac.dx[0] = 1.0;
        jac.dz[0] = 0.0;
        jac.dtheta.fill(0.0);
    }

    fn drift_div_gradient(
        &self,
        _t: f64,
        _x: &[f64],
        z: &[f64],
        theta: &[f64],
        gx: &mut [f64],
        gz: &mut [f64],
        gtheta: &mut [f64],
    ) {
        gx[0] = 0.0;
        gz[0] = -smootherstep_derivative(z[0]) * theta[2];
        gtheta.fill(0.0);
        gtheta[2] = -smootherstep(z[0]);
    }

    fn log_prior(&self, x0: &[f64], z0: &[f64], theta: &[f64]) -> f64 {
        self.prior
            .log_density(x0[0], z0[0], theta[0], theta[1], theta[2], theta[3])
    }

    fn log_prior_gradient(
        &self,
        x0: &[f64],
        z0: &[f64],
        theta: &[f64],
        gx0: &mut [f64],
        gz0: &mut [f64],
        gtheta: &mut [f64],
    ) -> f64 {
        let p = &self.prior;
        let v0 = p.sigma_0 * p.sigma_0;
        let vt = p.sigma_theta * p.sigma_theta;
        gx0[0] = -x0[0] / v0;
        gz0[0] = -z0[0] / v0;
        for i in 0..3 {
            gtheta[i] = -theta[i] / vt;
        }
        gtheta[3] = (p.shape - 1.0) / theta[3] - 1.0 / p.scale;
        self.log_prior(x0, z0, theta)
    }

    fn log_prior_theta(&self, theta: &[f64]) -> f64 {
        self.prior.log_density_theta(theta[0], theta[1], theta[2], theta[3])
    }

    fn initial_state_prior(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; 2], vec![self.prior.sigma_0; 2])
    }

    fn meas_loglik(&self, y: &[f64], states: &[f64], theta: &[f64]) -> f64 {
        let pairs = Self::pairs(y, states);
        match self.likelihood {
            MeasurementKind::Gaussian => gaussian_terms(pairs, theta[3], |_, _| {}).0,
            MeasurementKind::StudentT => student_t_terms(pairs, theta[3], |_, _| {}).0,
        }
    }

    fn meas_loglik_gradient(
        &self,
        y: &[f64],
        states: &[f64],
        theta: &[f64],
        gstates: &mut [f64],
        gtheta: &mut [f64],
    ) -> f64 {
        gstates.fill(0.0);
        gtheta.fill(0.0);
        let pairs = Self::pairs(y, states);
        let on_dz = |k: usize, d: f64| gstates[2 * k + 1] = d;
        let (value, dsigma) = match self.likelihood {
            MeasurementKind::Gaussian => gaussian_terms(pairs, theta[3], on_dz),
            MeasurementKind::StudentT => student_t_terms(pairs, theta[3], on_dz),
        };
        gtheta[3] = dsigma;
        value
    }

    fn log_scale_params(&self) -> &[usize] {
        &LOG_SCALE
    }

    fn meas_scale_index(&self) -> Option<usize> {
        Some(3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::register;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Continuous, Gamma, Normal};

    #[test]
    fn drift_examples() {
        let p = DuffingParams::nominal();
        assert!((duffing_drift(0.0, 0.0, 0.0, &p) - 0.3).abs() < 1e-15);
        assert!((duffing_drift(0.0, 1.0, 1.0, &p) - 0.1).abs() < 1e-15);
        assert_eq!(duffing_drift(3.7, -2.0, 1001.0, &p), 0.0);
        assert_eq!(duffing_drift(3.7, -2.0, -1001.0, &p), 0.0);
    }

    #[test]
    fn divergence_examples() {
        let p = DuffingParams::nominal();
        assert!((duffing_drift_div(0.0, 0.0, 0.0, &p) + 0.2).abs() < 1e-15);
        assert_eq!(duffing_drift_div(0.0, 0.0, 1001.0, &p), 0.0);
    }

    #[test]
    fn divergence_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = DuffingParams::nominal();
        for _ in 0..100 {
            let p = DuffingParams {
                a: rng.random_range(-30.0..30.0),
                b: rng.random_range(-30.0..30.0),
                d: rng.random_range(-30.0..30.0),
                ..base
            };
            let t = rng.random_range(0.0..200.0);
            let x: f64 = rng.random_range(-10.0..10.0);
            let z = rng.random_range(-10.0..10.0);
            let h = 1e-6 * x.abs().max(1.0);
            let fd = (duffing_drift(t, x + h, z, &p) - duffing_drift(t, x - h, z, &p)) / (2.0 * h);
            let div = duffing_drift_div(t, x, z, &p);
            assert!((fd - div).abs() <= 1e-6 * div.abs().max(1e-12) + 1e-9, "{fd} vs {div}");
        }
    }

    #[test]
    fn registration_passes_within_prior_box() {
        let model = DuffingModel::nominal(MeasurementKind::Gaussian);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let thetas: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                vec![
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                    rng.random_range(0.01..30.0),
                ]
            })
            .collect();
        register(&model, &thetas, 10.0, 100, &mut rng).unwrap();
    }

    #[test]
    fn smootherstep_values() {
        assert_eq!(smootherstep(0.0), 1.0);
        assert_eq!(smootherstep(1001.0), 0.0);
        assert_eq!(smootherstep(-1001.0), 0.0);
        assert!((smootherstep(1000.5) - 0.5).abs() < 1e-12);
        assert!((smootherstep(-1000.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn smootherstep_is_c2_at_the_joins() {
        // one-sided difference quotients of φ and φ' vanish at both joins
        for &z in &[1000.0, 1001.0, -1000.0, -1001.0] {
            for &h in &[1e-4, -1e-4] {
                let d1 = (smootherstep(z + h) - smootherstep(z)) / h;
                assert!(d1.abs() < 1e-6, "φ' at {z}: {d1}");
                let d2 = (smootherstep_derivative(z + h) - smootherstep_derivative(z)) / h;
                assert!(d2.abs() < 1e-2, "φ'' at {z}: {d2}");
            }
            assert_eq!(smootherstep_derivative(z), 0.0);
        }
        assert_eq!(eta_prime(0.0), 0.0);
        assert_eq!(eta_prime(1.0), 0.0);
    }

    #[test]
    fn smootherstep_derivative_matches_fd() {
        for i in 1..100 {
            let z = 1000.0 + i as f64 / 100.0;
            for z in [z, -z] {
                let h = 1e-7;
                let fd = (smootherstep(z + h) - smootherstep(z - h)) / (2.0 * h);
                assert!((fd - smootherstep_derivative(z)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn prior_gamma_mode_and_gaussian_drop() {
        let p = DuffingParams::nominal();
        let prior = DuffingPrior::default();
        let mode = prior.scale * (prior.shape - 1.0);
        let at_mode = duffing_log_prior(0.0, 0.0, &DuffingParams { sigma_y: mode, ..p }).unwrap();
        for s in [0.5, 0.9, 0.99, 1.01, 1.2, 3.0] {
            let v = duffing_log_prior(0.0, 0.0, &DuffingParams { sigma_y: s, ..p }).unwrap();
            assert!(v < at_mode);
        }
        let base = DuffingParams { a: 0.0, ..p };
        let at0 = duffing_log_prior(0.0, 0.0, &base).unwrap();
        let at10 = duffing_log_prior(0.0, 0.0, &DuffingParams { a: 10.0, ..base }).unwrap();
        assert!((at0 - at10 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn prior_matches_textbook_densities() {
        let p = DuffingParams {
            a: 0.0,
            b: 0.0,
            d: 0.0,
            sigma_y: 1.0,
            ..DuffingParams::nominal()
        };
        let v = duffing_log_prior(0.0, 0.0, &p).unwrap();
        let n0 = Normal::new(0.0, 0.4).unwrap();
        let nt = Normal::new(0.0, 10.0).unwrap();
        let g = Gamma::new(1.1, 1.0 / 10.0).unwrap();
        let oracle = 2.0 * n0.ln_pdf(0.0) + 3.0 * nt.ln_pdf(0.0) + g.ln_pdf(1.0);
        assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");
    }

    #[test]
    fn prior_rejects_nonpositive_scale() {
        let p = DuffingParams {
            sigma_y: 0.0,
            ..DuffingParams::nominal()
        };
        assert!(duffing_log_prior(0.0, 0.0, &p).is_err());
        assert!(DuffingModel::new(&p, DuffingPrior::default(), MeasurementKind::Gaussian).is_err());
        let p = DuffingParams {
            sigma_d: 0.0,
            ..DuffingParams::nominal()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let model = DuffingModel::nominal(MeasurementKind::StudentT);
        let theta = [1.3, -0.7, 0.25, 0.2];
        let (t, x, z) = (0.4, [0.3], [1000.4]);
        let mut jac = Jacobian::new(1, 1, 1, 4);
        model.drift_jacobian(t, &x, &z, &theta, &mut jac);
        let f = |x: f64, z: f64, th: &[f64]| {
            let mut o = [0.0];
            model.drift(t, &[x], &[z], th, &mut o);
            o[0]
        };
        let h = 1e-7;
        let fdz = (f(x[0], z[0] + h, &theta) - f(x[0], z[0] - h, &theta)) / (2.0 * h);
        assert!((fdz - jac.dz[0]).abs() < 1e-3 * fdz.abs().max(1.0));
        let zm = 1.7;
        model.drift_jacobian(t, &x, &[zm], &theta, &mut jac);
        for i in 0..4 {
            let mut tp = theta;
            tp[i] += h;
            let mut tm = theta;
            tm[i] -= h;
            let fd = (f(x[0], zm, &tp) - f(x[0], zm, &tm)) / (2.0 * h);
            assert!((fd - jac.dtheta[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        let (mut gx, mut gz, mut gt) = ([0.0], [0.0], [0.0; 4]);
        model.drift_div_gradient(t, &x, &z, &theta, &mut gx, &mut gz, &mut gt);
        let dv = |z: f64, th: &[f64]| model.drift_div(t, &x, &[z], th);
        let fd = (dv(z[0] + h, &theta) - dv(z[0] - h, &theta)) / (2.0 * h);
        assert!((fd - gz[0]).abs() < 1e-5);
    }
}
