//! Double-integrator test model `dX = σ dW`, `dZ = X dt`, with `Z` measured
//! under Gaussian noise. `θ = [σ_y]`.

use super::likelihood::gaussian_terms;
use super::{gamma_ln_pdf, normal_ln_pdf, Dynamics, Jacobian, SdeModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct IntegratorModel {
    g: [f64; 1],
    g_inv: [f64; 1],
    pub sigma_0: f64,
    /// Prior standard deviation of `Z(0)`; `None` leaves it flat.
    pub z0_sd: Option<f64>,
    pub shape: f64,
    pub scale: f64,
}

const LOG_SCALE: [usize; 1] = [0];

impl IntegratorModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "diffusion must be positive, got {sigma}"
            )));
        }
        Ok(Self {
            g: [sigma],
            g_inv: [1.0 / sigma],
            sigma_0: 1.0,
            z0_sd: Some(1.0),
            shape: 1.1,
            scale: 10.0,
        })
    }

    /// Mode of the measurement-scale prior.
    pub fn sigma_y_mode(&self) -> f64 {
        (self.shape - 1.0) * self.scale
    }
}

impl Dynamics for IntegratorModel {
    fn dim_x(&self) -> usize {
        1
    }

    fn dim_z(&self) -> usize {
        1
    }

    fn drift(&self, _t: f64, _x: &[f64], _z: &[f64], _theta: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn drift_h(&self, _t: f64, x: &[f64], _z: &[f64], _theta: &[f64], out: &mut [f64]) {
        out[0] = x[0];
    }

    fn diffusion(&self) -> &[f64] {
        &self.g
    }
}

impl SdeModel for IntegratorModel {
    fn dim_theta(&self) -> usize {
        1
    }

    fn diffusion_inv(&self) -> &[f64] {
        &self.g_inv
    }

    fn drift_div(&self, _t: f64, _x: &[f64], _z: &[f64], _theta: &[f64]) -> f64 {
        0.0
    }

    fn drift_jacobian(&self, _t: f64, _x: &[f64], _z: &[f64], _theta: &[f64], jac: &mut Jacobian) {
        jac.clear();
    }

    fn drift_h_jacobian(&self, _t: f64, _x: &[f64], _z: &[f64], _theta: &[f64], jac: &mut Jacobian) {
        jac.clear();
        jac.dx[0] = 1.0;
    }

    fn drift_div_gradient(
        &self,
        _t: f64,
        _x: &[f64],
        _z: &[f64],
        _theta: &[f64],
        gx: &mut [f64],
        gz: &mut [f64],
        gtheta: &mut [f64],
    ) {
        gx[0] = 0.0;
        gz[0] = 0.0;
        gtheta[0] = 0.0;
    }

    fn log_prior(&self, x0: &[f64], z0: &[f64], theta: &[f64]) -> f64 {
        let z_term = self.z0_sd.map_or(0.0, |sd| normal_ln_pdf(z0[0], 0.0, sd));
        normal_ln_pdf(x0[0], 0.0, self.sigma_0) + z_term + self.log_prior_theta(theta)
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
        gx0[0] = -x0[0] / (self.sigma_0 * self.sigma_0);
        gz0[0] = self.z0_sd.map_or(0.0, |sd| -z0[0] / (sd * sd));
        gtheta[0] = (self.shape - 1.0) / theta[0] - 1.0 / self.scale;
        self.log_prior(x0, z0, theta)
    }

    fn log_prior_theta(&self, theta: &[f64]) -> f64 {
        gamma_ln_pdf(theta[0], self.shape, self.scale)
    }

    fn initial_state_prior(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0, 0.0], vec![self.sigma_0, self.z0_sd.unwrap_or(1e6)])
    }

    fn meas_loglik(&self, y: &[f64], states: &[f64], theta: &[f64]) -> f64 {
        let pairs = y.iter().enumerate().map(|(k, &yk)| (yk, states[2 * k + 1]));
        gaussian_terms(pairs, theta[0], |_, _| {}).0
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
        let pairs = y.iter().enumerate().map(|(k, &yk)| (yk, states[2 * k + 1]));
        let (v, ds) = gaussian_terms(pairs, theta[0], |k, d| gstates[2 * k + 1] = d);
        gtheta[0] = ds;
        v
    }

    fn log_scale_params(&self) -> &[usize] {
        &LOG_SCALE
    }

    fn meas_scale_index(&self) -> Option<usize> {
        Some(0)
    }
}
