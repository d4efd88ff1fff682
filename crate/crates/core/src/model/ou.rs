//! Scalar Ornstein–Uhlenbeck test model `dX = -a X dt + σ dW`, measured
//! directly with Gaussian noise. `θ = [a, σ_y]`, no noise-free state.

use super::likelihood::gaussian_terms;
use super::{gamma_ln_pdf, normal_ln_pdf, Dynamics, Jacobian, SdeModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OuModel {
    g: [f64; 1],
    g_inv: [f64; 1],
    pub sigma_theta: f64,
    pub sigma_0: f64,
    pub shape: f64,
    pub scale: f64,
}

const LOG_SCALE: [usize; 1] = [1];

impl OuModel {
    /// `sigma = 0` is accepted for simulation and filtering only; such a model
    /// fails [`crate::model::register`].
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "diffusion must be non-negative, got {sigma}"
            )));
        }
        Ok(Self {
            g: [sigma],
            g_inv: [1.0 / sigma],
            sigma_theta: 10.0,
            sigma_0: 1.0,
            shape: 1.1,
            scale: 10.0,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.g[0]
    }
}

impl Dynamics for OuModel {
    fn dim_x(&self) -> usize {
        1
    }

    fn dim_z(&self) -> usize {
        0
    }

    fn drift(&self, _t: f64, x: &[f64], _z: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = -theta[0] * x[0];
    }

    fn drift_h(&self, _t: f64, _x: &[f64], _z: &[f64], _theta: &[f64], _out: &mut [f64]) {}

    fn diffusion(&self) -> &[f64] {
        &self.g
    }
}

impl SdeModel for OuModel {
    fn dim_theta(&self) -> usize {
        2
    }

    fn diffusion_inv(&self) -> &[f64] {
        &self.g_inv
    }

    fn drift_div(&self, _t: f64, _x: &[f64], _z: &[f64], theta: &[f64]) -> f64 {
        -theta[0]
    }

    fn drift_jacobian(&self, _t: f64, x: &[f64], _z: &[f64], theta: &[f64], jac: &mut Jacobian) {
        jac.dx[0] = -theta[0];
        jac.dtheta[0] = -x[0];
        jac.dtheta[1] = 0.0;
    }

    fn drift_h_jacobian(&self, _t: f64, _x: &[f64], _z: &[f64], _theta: &[f64], _jac: &mut Jacobian) {}

    fn drift_div_gradient(
        &self,
        _t: f64,
        _x: &[f64],
        _z: &[f64],
        _theta: &[f64],
        gx: &mut [f64],
        _gz: &mut [f64],
        gtheta: &mut [f64],
    ) {
        gx[0] = 0.0;
        gtheta[0] = -1.0;
        gtheta[1] = 0.0;
    }

    fn log_prior(&self, x0: &[f64], _z0: &[f64], theta: &[f64]) -> f64 {
        normal_ln_pdf(x0[0], 0.0, self.sigma_0) + self.log_prior_theta(theta)
    }

    fn log_prior_gradient(
        &self,
        x0: &[f64],
        z0: &[f64],
        theta: &[f64],
        gx0: &mut [f64],
        _gz0: &mut [f64],
        gtheta: &mut [f64],
    ) -> f64 {
        gx0[0] = -x0[0] / (self.sigma_0 * self.sigma_0);
        gtheta[0] = -theta[0] / (self.sigma_theta * self.sigma_theta);
        gtheta[1] = (self.shape - 1.0) / theta[1] - 1.0 / self.scale;
        self.log_prior(x0, z0, theta)
    }

    fn log_prior_theta(&self, theta: &[f64]) -> f64 {
        normal_ln_pdf(theta[0], 0.0, self.sigma_theta) + gamma_ln_pdf(theta[1], self.shape, self.scale)
    }

    fn initial_state_prior(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0], vec![self.sigma_0])
    }

    fn meas_loglik(&self, y: &[f64], states: &[f64], theta: &[f64]) -> f64 {
        gaussian_terms(y.iter().copied().zip(states.iter().copied()), theta[1], |_, _| {}).0
    }

    fn meas_loglik_gradient(
        &self,
        y: &[f64],
        states: &[f64],
        theta: &[f64],
        gstates: &mut [f64],
        gtheta: &mut [f64],
    ) -> f64 {
        gtheta.fill(0.0);
        let (v, ds) = gaussian_terms(y.iter().copied().zip(states.iter().copied()), theta[1], |k, d| {
            gstates[k] = d
        });
        gtheta[1] = ds;
        v
    }

    fn log_scale_params(&self) -> &[usize] {
        &LOG_SCALE
    }

    fn meas_scale_index(&self) -> Option<usize> {
        Some(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::register;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn registers_with_positive_diffusion() {
        let model = OuModel::new(0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        register(&model, &[vec![0.7, 0.1], vec![-2.0, 1.0]], 10.0, 100, &mut rng).unwrap();
    }

    #[test]
    fn zero_diffusion_fails_registration() {
        let model = OuModel::new(0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(register(&model, &[vec![0.7, 0.1]], 10.0, 10, &mut rng).is_err());
        assert!(OuModel::new(-1.0).is_err());
    }
}
