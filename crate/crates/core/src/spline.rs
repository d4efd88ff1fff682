//! Penalised least-squares cubic B-spline on a uniform knot grid:
//!
//! ```text
//! minimise  Σ_k (y_k - s(t_k))² + λ ∫ s''(t)² dt
//! ```
//!
//! with `λ` chosen by generalised cross-validation. The normal equations are
//! banded (half-bandwidth 3) and solved by a banded `LDLᵀ` factorisation; the
//! GCV trace uses the band of the inverse from the Takahashi recurrence.

use crate::error::{Error, Result};

const BAND: usize = 3;

/// Values of the four nonzero uniform cubic B-splines at local coordinate
/// `u ∈ [0, 1]`, and their first and second derivatives (unit spacing).
fn basis(u: f64) -> [[f64; 4]; 3] {
    let v = 1.0 - u;
    let u2 = u * u;
    let u3 = u2 * u;
    [
        [
            v * v * v / 6.0,
            (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
            (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
            u3 / 6.0,
        ],
        [
            -0.5 * v * v,
            0.5 * (3.0 * u2 - 4.0 * u),
            0.5 * (-3.0 * u2 + 2.0 * u + 1.0),
            0.5 * u2,
        ],
        [v, 3.0 * u - 2.0, 1.0 - 3.0 * u, u],
    ]
}

/// Symmetric banded matrix stored as `band[i][k] = A[i][i + k]`.
#[derive(Debug, Clone)]
struct SymBand {
    band: Vec<[f64; BAND + 1]>,
}

impl SymBand {
    fn zeros(n: usize) -> Self {
        Self {
            band: vec![[0.0; BAND + 1]; n],
        }
    }

    fn n(&self) -> usize {
        self.band.len()
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.band[i][j - i] += v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        if j - i > BAND {
            0.0
        } else {
            self.band[i][j - i]
        }
    }

    fn combine(&self, other: &Self, lambda: f64) -> Self {
        let band = self
            .band
            .iter()
            .zip(&other.band)
            .map(|(a, b)| std::array::from_fn(|k| a[k] + lambda * b[k]))
            .collect();
        Self { band }
    }

    /// `A = L D Lᵀ` with unit lower-triangular banded `L`; `l[j][k] = L[j+k][j]`.
    fn ldl(&self) -> Option<(Vec<[f64; BAND + 1]>, Vec<f64>)> {
        let n = self.n();
        let mut l = vec![[0.0; BAND + 1]; n];
        let mut d = vec![0.0; n];
        let lij = |l: &Vec<[f64; BAND + 1]>, i: usize, j: usize| -> f64 {
            if i == j {
                1.0
            } else if i > j && i - j <= BAND {
                l[j][i - j]
            } else {
                0.0
            }
        };
        for j in 0..n {
            let lo = j.saturating_sub(BAND);
            let mut dj = self.get(j, j);
            for k in lo..j {
                let v = lij(&l, j, k);
                dj -= v * v * d[k];
            }
            if !(dj > 0.0) {
                return None;
            }
            d[j] = dj;
            l[j][0] = 1.0;
            for i in j + 1..(j + BAND + 1).min(n) {
                let mut s = self.get(i, j);
                for k in i.saturating_sub(BAND)..j {
                    s -= lij(&l, i, k) * lij(&l, j, k) * d[k];
                }
                l[j][i - j] = s / dj;
            }
        }
        Some((l, d))
    }
}

fn ldl_solve(l: &[[f64; BAND + 1]], d: &[f64], b: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut x = b.to_vec();
    for j in 0..n {
        for k in 1..=BAND.min(n - 1 - j) {
            x[j + k] -= l[j][k] * x[j];
        }
    }
    for j in 0..n {
        x[j] /= d[j];
    }
    for j in (0..n).rev() {
        for k in 1..=BAND.min(n - 1 - j) {
            x[j] -= l[j][k] * x[j + k];
        }
    }
    x
}

/// Band of `A⁻¹` from the `LDLᵀ` factors: `z[j][k] = (A⁻¹)[j][j+k]`.
fn inverse_band(l: &[[f64; BAND + 1]], d: &[f64]) -> Vec<[f64; BAND + 1]> {
    let n = d.len();
    let mut z = vec![[0.0; BAND + 1]; n];
    let get = |z: &Vec<[f64; BAND + 1]>, i: usize, j: usize| -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        z[i][j - i]
    };
    for j in (0..n).rev() {
        let hi = (j + BAND).min(n - 1);
        for i in (j..=hi).rev() {
            let mut v = if i == j { 1.0 / d[j] } else { 0.0 };
            for k in j + 1..=hi {
                v -= l[j][k - j] * get(&z, k, i);
            }
            z[j][i - j] = v;
        }
    }
    z
}

/// A fitted smoothing spline.
#[derive(Debug, Clone)]
pub struct SmoothingSpline {
    t0: f64,
    spacing: f64,
    n_int: usize,
    coef: Vec<f64>,
    pub lambda: f64,
    /// Effective degrees of freedom `tr(A(λ))`.
    pub edf: f64,
    pub gcv: f64,
}

struct Design {
    gram: SymBand,
    penalty: SymBand,
    bty: Vec<f64>,
    yty: f64,
    n_obs: usize,
}

impl SmoothingSpline {
    /// Fits `(t_k, y_k)` with knots every `knot_spacing` on `[t_0, t_end]`,
    /// choosing `λ` by GCV.
    pub fn fit(t: &[f64], y: &[f64], knot_spacing: f64) -> Result<Self> {
        crate::error::check_len("spline samples", t.len(), y.len())?;
        if t.len() < 4 {
            return Err(Error::Degenerate("spline fit needs at least 4 samples".into()));
        }
        if !(knot_spacing > 0.0) {
            return Err(Error::InvalidParameter("knot spacing must be positive".into()));
        }
        let t0 = t[0];
        let t_end = t[t.len() - 1];
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("sample times must increase".into()));
        }
        let n_int = (((t_end - t0) / knot_spacing).round() as usize).max(1);
        let spacing = (t_end - t0) / n_int as f64;
        let mut s = Self {
            t0,
            spacing,
            n_int,
            coef: vec![0.0; n_int + 3],
            lambda: 0.0,
            edf: 0.0,
            gcv: 0.0,
        };
        let design = s.design(t, y);
        // λ is searched relative to the natural scale of the two quadratic forms
        let scale = (0..design.gram.n()).map(|i| design.gram.get(i, i)).sum::<f64>()
            / (0..design.penalty.n()).map(|i| design.penalty.get(i, i)).sum::<f64>();
        let eval = |log_l: f64| s.gcv_at(&design, scale * 10f64.powf(log_l));
        let grid: Vec<f64> = (0..=60).map(|i| -12.0 + 0.25 * i as f64).collect();
        let scores: Vec<f64> = grid.iter().map(|&g| eval(g).map_or(f64::INFINITY, |r| r.0)).collect();
        let best = scores
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if !scores[best].is_finite() {
            return Err(Error::Degenerate("spline normal equations are singular".into()));
        }
        // golden-section refinement inside the neighbouring grid cells
        let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let score = |g: f64| eval(g).map_or(f64::INFINITY, |r| r.0);
        let (mut a, mut b) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
        let (mut fa, mut fb) = (score(a), score(b));
        for _ in 0..40 {
            if fa < fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - phi * (hi - lo);
                fa = score(a);
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + phi * (hi - lo);
                fb = score(b);
            }
        }
        let mut log_l = 0.5 * (lo + hi);
        if score(log_l) > scores[best] {
            log_l = grid[best];
        }
        let lambda = scale * 10f64.powf(log_l);
        let (gcv, edf, coef) = s.gcv_at(&design, lambda).expect("λ was evaluated during the search");
        s.coef = coef;
        s.lambda = lambda;
        s.edf = edf;
        s.gcv = gcv;
        Ok(s)
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let x = (t - self.t0) / self.spacing;
        let m = (x.floor().max(0.0) as usize).min(self.n_int - 1);
        (m, x - m as f64)
    }

    fn design(&self, t: &[f64], y: &[f64]) -> Design {
        let nb = self.n_int + 3;
        let mut gram = SymBand::zeros(nb);
        let mut bty = vec![0.0; nb];
        for (&tk, &yk) in t.iter().zip(y) {
            let (m, u) = self.locate(tk);
            let b = basis(u)[0];
            for r in 0..4 {
                bty[m + r] += b[r] * yk;
                for c in r..4 {
                    gram.add(m + r, m + c, b[r] * b[c]);
                }
            }
        }
        // ∫ B_i'' B_j'': piecewise linear products, exact with 2-point Gauss
        let mut penalty = SymBand::zeros(nb);
        let g = 0.5 / 3f64.sqrt();
        let scale = self.spacing.powi(-3);
        for m in 0..self.n_int {
            for u in [0.5 - g, 0.5 + g] {
                let b2 = basis(u)[2];
                for r in 0..4 {
                    for c in r..4 {
                        penalty.add(m + r, m + c, 0.5 * scale * b2[r] * b2[c]);
                    }
                }
            }
        }
        Design {
            gram,
            penalty,
            bty,
            yty: y.iter().map(|v| v * v).sum(),
            n_obs: y.len(),
        }
    }

    /// `(GCV score, edf, coefficients)` at `λ`.
    fn gcv_at(&self, d: &Design, lambda: f64) -> Option<(f64, f64, Vec<f64>)> {
        let a = d.gram.combine(&d.penalty, lambda);
        let (l, dd) = a.ldl()?;
        let c = ldl_solve(&l, &dd, &d.bty);
        let zinv = inverse_band(&l, &dd);
        let mut edf = 0.0;
        for i in 0..c.len() {
            for k in 0..=BAND {
                if i + k >= c.len() {
                    break;
                }
                let w = if k == 0 { 1.0 } else { 2.0 };
                edf += w * zinv[i][k] * d.gram.band[i][k];
            }
        }
        // RSS = yᵀy - 2cᵀBᵀy + cᵀBᵀBc
        let mut btb_c = vec![0.0; c.len()];
        for i in 0..c.len() {
            for j in i.saturating_sub(BAND)..(i + BAND + 1).min(c.len()) {
                btb_c[i] += d.gram.get(i, j) * c[j];
            }
        }
        let rss = (d.yty - 2.0 * dot(&c, &d.bty) + dot(&c, &btb_c)).max(0.0);
        let n = d.n_obs as f64;
        let denom = (n - edf).max(1e-9);
        Some((n * rss / (denom * denom), edf, c))
    }

    fn eval_order(&self, t: f64, order: usize) -> f64 {
        let (m, u) = self.locate(t);
        let b = basis(u)[order];
        let v: f64 = (0..4).map(|r| b[r] * self.coef[m + r]).sum();
        v / self.spacing.powi(order as i32)
    }

    pub fn value(&self, t: f64) -> f64 {
        self.eval_order(t, 0)
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.eval_order(t, 1)
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        self.eval_order(t, 2)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
