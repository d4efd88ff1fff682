//! Scalar measurement likelihoods `y_k = z(k t_s) + noise`.

use serde::{Deserialize, Serialize};

use super::LN_SQRT_2PI;
use crate::error::{check_len, Error, Result};

/// Degrees of freedom of the robust likelihood.
pub const STUDENT_T_DOF: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    Gaussian,
    StudentT,
}

fn validate(y: &[f64], z: &[f64], sigma_y: f64) -> Result<()> {
    check_len("measurement samples", y.len(), z.len())?;
    if !(sigma_y > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "measurement scale must be positive, got {sigma_y}"
        )));
    }
    Ok(())
}

/// Gaussian log-likelihood with all normalising constants.
pub fn gaussian_meas_loglik(y: &[f64], z: &[f64], sigma_y: f64) -> Result<f64> {
    validate(y, z, sigma_y)?;
    Ok(gaussian_terms(y.iter().copied().zip(z.iter().copied()), sigma_y, |_, _| {}).0)
}

/// Student-t (4 dof) log-likelihood, constants dropped:
/// `-Σ [ 5/2 ln(1 + r²/(4σ²)) + ln σ ]`.
pub fn student_t_meas_loglik(y: &[f64], z: &[f64], sigma_y: f64) -> Result<f64> {
    validate(y, z, sigma_y)?;
    Ok(student_t_terms(y.iter().copied().zip(z.iter().copied()), sigma_y, |_, _| {}).0)
}

/// Sums the Gaussian terms; `on_dz(k, ∂/∂z_k)` receives each residual
/// derivative. Returns `(value, ∂/∂σ)`.
pub(crate) fn gaussian_terms(
    pairs: impl Iterator<Item = (f64, f64)>,
    sigma: f64,
    mut on_dz: impl FnMut(usize, f64),
) -> (f64, f64) {
    let inv_var = 1.0 / (sigma * sigma);
    let ln_sigma = sigma.ln();
    let mut value = 0.0;
    let mut dsigma = 0.0;
    for (k, (y, z)) in pairs.enumerate() {
        let r = y - z;
        value += -0.5 * r * r * inv_var - ln_sigma - LN_SQRT_2PI;
        dsigma += r * r * inv_var / sigma - 1.0 / sigma;
        on_dz(k, r * inv_var);
    }
    (value, dsigma)
}

pub(crate) fn student_t_terms(
    pairs: impl Iterator<Item = (f64, f64)>,
    sigma: f64,
    mut on_dz: impl FnMut(usize, f64),
) -> (f64, f64) {
    let nu = STUDENT_T_DOF;
    let half_nu1 = 0.5 * (nu + 1.0);
    let scale2 = nu * sigma * sigma;
    let ln_sigma = sigma.ln();
    let mut value = 0.0;
    let mut dsigma = 0.0;
    for (k, (y, z)) in pairs.enumerate() {
        let r = y - z;
        let u = r * r / scale2;
        value -= half_nu1 * u.ln_1p() + ln_sigma;
        // d/du ln(1+u) = 1/(1+u); du/dσ = -2u/σ; du/dz = -2r/scale2
        let w = half_nu1 / (1.0 + u);
        dsigma += w * 2.0 * u / sigma - 1.0 / sigma;
        on_dz(k, w * 2.0 * r / scale2);
    }
    (value, dsigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Continuous, Normal};

    #[test]
    fn gaussian_zero_residual_single_sample() {
        let v = gaussian_meas_loglik(&[0.3], &[0.3], 1.0).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn gaussian_doubling_scale_costs_ln2_per_sample() {
        let y = vec![0.1, -0.4, 2.0, 0.0, 1.5];
        let a = gaussian_meas_loglik(&y, &y, 0.7).unwrap();
        let b = gaussian_meas_loglik(&y, &y, 1.4).unwrap();
        assert!((a - b - 5.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_matches_density_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma = 0.8;
        let v = gaussian_meas_loglik(&y, &z, sigma).unwrap();
        let oracle: f64 = y
            .iter()
            .zip(&z)
            .map(|(y, z)| Normal::new(*z, sigma).unwrap().pdf(*y))
            .product::<f64>()
            .ln();
        assert!((v - oracle).abs() / oracle.abs() < 1e-12);
    }

    #[test]
    fn student_t_zero_residuals() {
        let y = vec![1.0; 11];
        let v = student_t_meas_loglik(&y, &y, 0.3).unwrap();
        assert!((v + 11.0 * 0.3f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn student_t_residual_two_sigma() {
        let s = 0.25;
        let v = student_t_meas_loglik(&[2.0 * s], &[0.0], s).unwrap();
        assert!((v - (-2.5 * 2f64.ln() - s.ln())).abs() < 1e-14);
    }

    #[test]
    fn student_t_monotone_in_residual() {
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let r = i as f64 * 0.1;
            let v = student_t_meas_loglik(&[r], &[0.0], 0.5).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            gaussian_meas_loglik(&[1.0], &[1.0, 2.0], 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(gaussian_meas_loglik(&[1.0], &[1.0], 0.0).is_err());
        assert!(student_t_meas_loglik(&[1.0], &[1.0], -1.0).is_err());
        assert!(student_t_meas_loglik(&[1.0, 2.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let y = [0.3, -0.2, 1.1];
        let z = [0.1, 0.4, 0.9];
        for kind in [MeasurementKind::Gaussian, MeasurementKind::StudentT] {
            let eval = |z: &[f64], s: f64| {
                let pairs = y.iter().copied().zip(z.iter().copied());
                match kind {
                    MeasurementKind::Gaussian => gaussian_terms(pairs, s, |_, _| {}).0,
                    MeasurementKind::StudentT => student_t_terms(pairs, s, |_, _| {}).0,
                }
            };
            let s = 0.37;
            let mut dz = [0.0; 3];
            let pairs = y.iter().copied().zip(z.iter().copied());
            let (_, ds) = match kind {
                MeasurementKind::Gaussian => gaussian_terms(pairs, s, |k, d| dz[k] = d),
                MeasurementKind::StudentT => student_t_terms(pairs, s, |k, d| dz[k] = d),
            };
            let h = 1e-6;
            let fd_s = (eval(&z, s + h) - eval(&z, s - h)) / (2.0 * h);
            assert!((fd_s - ds).abs() < 1e-6 * ds.abs().max(1.0));
            for k in 0..3 {
                let mut zp = z;
                zp[k] += h;
                let mut zm = z;
                zm[k] -= h;
                let fd = (eval(&zp, s) - eval(&zm, s)) / (2.0 * h);
                assert!((fd - dz[k]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn invariant_under_pair_permutation(
            pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
            sigma in 0.05f64..3.0,
            rot in 0usize..20,
        ) {
            let (y, z): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let mut perm = pairs.clone();
            let r = rot % perm.len();
            perm.rotate_left(r);
            perm.reverse();
            let (yp, zp): (Vec<f64>, Vec<f64>) = perm.into_iter().unzip();
            let g = gaussian_meas_loglik(&y, &z, sigma).unwrap();
            let gp = gaussian_meas_loglik(&yp, &zp, sigma).unwrap();
            proptest::prop_assert!((g - gp).abs() <= 1e-9 * g.abs().max(1.0));
            let t = student_t_meas_loglik(&y, &z, sigma).unwrap();
            let tp = student_t_meas_loglik(&yp, &zp, sigma).unwrap();
            proptest::prop_assert!((t - tp).abs() <= 1e-9 * t.abs().max(1.0));
        }
    }
}
