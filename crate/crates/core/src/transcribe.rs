//! Hermite–Simpson transcription of the joint MAP (JME) and minimum-energy
//! (MEE) estimation problems.
//!
//! The horizon `[0, T]` is split into `K` intervals of length `h`. Each
//! interval has two endpoint nodes and one midpoint node, so there are
//! `2K + 1` nodes in time order (even index = endpoint, odd = midpoint).
//!
//! Decision vector layout (stable):
//!
//! ```text
//! [ x(node 0), z(node 0), x(node 1), z(node 1), …, x(node 2K), z(node 2K), θ ]
//! ```
//!
//! with θ in optimisation coordinates: entries listed by
//! [`SdeModel::log_scale_params`] are stored as logarithms.
//!
//! Merit (JME):
//!
//! ```text
//! ln ψ(y | z at measurement nodes, θ) + ln π(x0, z0, θ)
//!   + Σ_i h/6 [g(t_i) + 4 g(t_i+½) + g(t_i+1)],
//! g = -½ div_x f - ½ |G⁻¹(ẋ - f)|²
//! ```
//!
//! The MEE drops the divergence term. Within an interval `ẋ` is the
//! derivative of the quadratic through the three `x` nodes. The constraint
//! `ż = h(t, x, z, θ)` is imposed by the Simpson defect and the midpoint
//! interpolation defect of every interval. The [`Nlp`] view hands the solver
//! the defects divided by `h`, so its constraints are rate residuals.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{Jacobian, SdeModel};
use crate::simulate::whole_steps;
use crate::solve::Nlp;
use crate::trajectory::{Interpolant, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Joint MAP state path and parameters (Onsager–Machlup merit).
    Jme,
    /// Minimum-energy estimator (no divergence term).
    Mee,
}

impl EstimatorKind {
    fn divergence_weight(self) -> f64 {
        match self {
            EstimatorKind::Jme => 1.0,
            EstimatorKind::Mee => 0.0,
        }
    }
}

/// Uniform collocation grid aligned with the measurement instants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollocationGrid {
    /// Interval length `h_c`.
    pub h: f64,
    pub n_intervals: usize,
    /// Intervals per sampling period.
    pub meas_stride: usize,
    /// Number of measurements, `N + 1`.
    pub n_meas: usize,
}

impl CollocationGrid {
    pub fn new(t_end: f64, t_s: f64, h: f64) -> Result<Self> {
        if !(h > 0.0) || !(t_s > 0.0) || !(t_end > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "grid spacings must be positive (T={t_end}, t_s={t_s}, h_c={h})"
            )));
        }
        let meas_stride = whole_steps(t_s, h).filter(|&s| s > 0).ok_or_else(|| {
            Error::Misaligned(format!(
                "sampling period {t_s} is not a multiple of the collocation step {h}"
            ))
        })?;
        let n_samples = whole_steps(t_end, t_s).ok_or_else(|| {
            Error::Misaligned(format!(
                "horizon {t_end} is not a multiple of the sampling period {t_s}"
            ))
        })?;
        Ok(Self {
            h,
            n_intervals: n_samples * meas_stride,
            meas_stride,
            n_meas: n_samples + 1,
        })
    }

    pub fn n_nodes(&self) -> usize {
        2 * self.n_intervals + 1
    }

    pub fn t_end(&self) -> f64 {
        self.n_intervals as f64 * self.h
    }

    pub fn node_time(&self, node: usize) -> f64 {
        node as f64 * 0.5 * self.h
    }

    pub fn node_times(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|j| self.node_time(j)).collect()
    }

    /// Node index of measurement `k`.
    pub fn meas_node(&self, k: usize) -> usize {
        2 * k * self.meas_stride
    }
}

/// Composite-free Simpson rule over one interval.
pub fn simpson(h: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    h / 6.0 * (fa + 4.0 * fm + fb)
}

/// Unflattened decision variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionVector {
    /// `n_nodes × dim_x`, row-major.
    pub x: Vec<f64>,
    /// `n_nodes × dim_z`, row-major.
    pub z: Vec<f64>,
    /// Optimisation coordinates (log-scale entries as logarithms).
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub dim_x: usize,
    pub dim_z: usize,
    pub dim_theta: usize,
    pub n_nodes: usize,
}

impl Layout {
    pub fn node_width(&self) -> usize {
        self.dim_x + self.dim_z
    }

    pub fn dim(&self) -> usize {
        self.n_nodes * self.node_width() + self.dim_theta
    }

    pub fn x_index(&self, node: usize, comp: usize) -> usize {
        node * self.node_width() + comp
    }

    pub fn z_index(&self, node: usize, comp: usize) -> usize {
        node * self.node_width() + self.dim_x + comp
    }

    pub fn theta_index(&self, i: usize) -> usize {
        self.n_nodes * self.node_width() + i
    }

    pub fn pack(&self, dv: &DecisionVector) -> Result<Vec<f64>> {
        check_len("x nodes", self.n_nodes * self.dim_x, dv.x.len())?;
        check_len("z nodes", self.n_nodes * self.dim_z, dv.z.len())?;
        check_len("theta", self.dim_theta, dv.theta.len())?;
        let mut v = Vec::with_capacity(self.dim());
        for j in 0..self.n_nodes {
            v.extend_from_slice(&dv.x[j * self.dim_x..(j + 1) * self.dim_x]);
            v.extend_from_slice(&dv.z[j * self.dim_z..(j + 1) * self.dim_z]);
        }
        v.extend_from_slice(&dv.theta);
        Ok(v)
    }

    pub fn unpack(&self, v: &[f64]) -> Result<DecisionVector> {
        check_len("decision vector", self.dim(), v.len())?;
        let w = self.node_width();
        let mut x = Vec::with_capacity(self.n_nodes * self.dim_x);
        let mut z = Vec::with_capacity(self.n_nodes * self.dim_z);
        for j in 0..self.n_nodes {
            x.extend_from_slice(&v[j * w..j * w + self.dim_x]);
            z.extend_from_slice(&v[j * w + self.dim_x..(j + 1) * w]);
        }
        Ok(DecisionVector {
            x,
            z,
            theta: v[self.n_nodes * w..].to_vec(),
        })
    }
}

/// The four additive pieces of the merit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeritParts {
    pub loglik: f64,
    pub log_prior: f64,
    /// `-½ ∫ div_x f` (zero for the MEE).
    pub divergence: f64,
    /// `-½ ∫ |G⁻¹(ẋ - f)|²`.
    pub energy: f64,
}

impl MeritParts {
    pub fn total(&self) -> f64 {
        self.loglik + self.log_prior + self.divergence + self.energy
    }
}

/// Debug description of a transcribed problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemDump {
    pub kind: EstimatorKind,
    pub grid: CollocationGrid,
    pub layout: Layout,
    pub dim: usize,
    pub n_constraints: usize,
    pub node_times: Vec<f64>,
    pub measurement_nodes: Vec<usize>,
    pub log_scale_params: Vec<usize>,
}

/// ẋ at the (start, mid, end) nodes of an interval, as coefficients on the
/// (start, mid, end) values divided by `h`.
const XDOT: [[f64; 3]; 3] = [[-3.0, 4.0, -1.0], [-1.0, 0.0, 1.0], [1.0, -4.0, 3.0]];
const SIMPSON_W: [f64; 3] = [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0];

/// A transcribed estimation instance. Immutable once built.
#[derive(Debug, Clone)]
pub struct CollocationProblem<M> {
    model: M,
    grid: CollocationGrid,
    layout: Layout,
    y: Vec<f64>,
    kind: EstimatorKind,
    /// `G⁻ᵀ G⁻¹`, row-major.
    precision: Vec<f64>,
    log_idx: Vec<usize>,
}

/// Per-node drift evaluations shared by the merit and its gradient.
struct NodeEval {
    f: Vec<f64>,
    div: Vec<f64>,
}

impl<M: SdeModel> CollocationProblem<M> {
    pub fn build(model: M, grid: CollocationGrid, y: Vec<f64>, kind: EstimatorKind) -> Result<Self> {
        check_len("measurements", grid.n_meas, y.len())?;
        let m = model.dim_x();
        check_len("diffusion", m * m, model.diffusion().len())?;
        check_len("diffusion inverse", m * m, model.diffusion_inv().len())?;
        let g_inv = model.diffusion_inv();
        if !g_inv.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("model diffusion is not invertible".into()));
        }
        let mut precision = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                precision[i * m + j] = (0..m).map(|k| g_inv[k * m + i] * g_inv[k * m + j]).sum();
            }
        }
        let log_idx = model.log_scale_params().to_vec();
        if log_idx.iter().any(|&i| i >= model.dim_theta()) {
            return Err(Error::InvalidParameter("log-scale index out of range".into()));
        }
        let layout = Layout {
            dim_x: m,
            dim_z: model.dim_z(),
            dim_theta: model.dim_theta(),
            n_nodes: grid.n_nodes(),
        };
        Ok(Self {
            model,
            grid,
            layout,
            y,
            kind,
            precision,
            log_idx,
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn grid(&self) -> &CollocationGrid {
        &self.grid
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn measurements(&self) -> &[f64] {
        &self.y
    }

    /// Same data and grid, other estimator.
    pub fn with_kind(&self, kind: EstimatorKind) -> Self
    where
        M: Clone,
    {
        Self { kind, ..self.clone() }
    }

    pub fn n_constraints(&self) -> usize {
        2 * self.grid.n_intervals * self.layout.dim_z
    }

    pub fn dump(&self) -> ProblemDump {
        ProblemDump {
            kind: self.kind,
            grid: self.grid,
            layout: self.layout,
            dim: self.layout.dim(),
            n_constraints: self.n_constraints(),
            node_times: self.grid.node_times(),
            measurement_nodes: (0..self.grid.n_meas).map(|k| self.grid.meas_node(k)).collect(),
            log_scale_params: self.log_idx.clone(),
        }
    }

    /// Natural-scale parameters from optimisation coordinates.
    pub fn theta_natural(&self, theta_opt: &[f64]) -> Vec<f64> {
        let mut th = theta_opt.to_vec();
        for &i in &self.log_idx {
            th[i] = th[i].exp();
        }
        th
    }

    /// Optimisation coordinates from natural-scale parameters.
    pub fn theta_optimization(&self, theta: &[f64]) -> Vec<f64> {
        let mut th = theta.to_vec();
        for &i in &self.log_idx {
            th[i] = th[i].ln();
        }
        th
    }

    fn theta_slice<'v>(&self, v: &'v [f64]) -> &'v [f64] {
        &v[self.layout.theta_index(0)..]
    }

    fn node_x<'v>(&self, v: &'v [f64], node: usize) -> &'v [f64] {
        let i = self.layout.x_index(node, 0);
        &v[i..i + self.layout.dim_x]
    }

    fn node_z<'v>(&self, v: &'v [f64], node: usize) -> &'v [f64] {
        let i = self.layout.z_index(node, 0);
        &v[i..i + self.layout.dim_z]
    }

    fn eval_nodes(&self, v: &[f64], theta: &[f64]) -> NodeEval {
        let m = self.layout.dim_x;
        let nodes = self.layout.n_nodes;
        let mut f = vec![0.0; nodes * m];
        let mut div = vec![0.0; nodes];
        let with_div = self.kind == EstimatorKind::Jme;
        for j in 0..nodes {
            let t = self.grid.node_time(j);
            let (x, z) = (self.node_x(v, j), self.node_z(v, j));
            self.model.drift(t, x, z, theta, &mut f[j * m..(j + 1) * m]);
            if with_div {
                div[j] = self.model.drift_div(t, x, z, theta);
            }
        }
        NodeEval { f, div }
    }

    fn measurement_states(&self, v: &[f64]) -> Vec<f64> {
        let w = self.layout.node_width();
        let mut states = Vec::with_capacity(self.grid.n_meas * w);
        for k in 0..self.grid.n_meas {
            let node = self.grid.meas_node(k);
            states.extend_from_slice(&v[node * w..(node + 1) * w]);
        }
        states
    }

    /// The merit decomposed into its additive parts.
    pub fn merit_parts(&self, v: &[f64]) -> MeritParts {
        let m = self.layout.dim_x;
        let theta = self.theta_natural(self.theta_slice(v));
        let nodes = self.eval_nodes(v, &theta);
        let h = self.grid.h;
        let kappa = self.kind.divergence_weight();
        let mut energy = 0.0;
        let mut divergence = 0.0;
        let mut e = vec![0.0; m];
        for i in 0..self.grid.n_intervals {
            let ids = [2 * i, 2 * i + 1, 2 * i + 2];
            for (role, &node) in ids.iter().enumerate() {
                for c in 0..m {
                    let xdot: f64 = (0..3)
                        .map(|l| XDOT[role][l] * v[self.layout.x_index(ids[l], c)])
                        .sum::<f64>()
                        / h;
                    e[c] = xdot - nodes.f[node * m + c];
                }
                let w = SIMPSON_W[role] * h;
                energy -= 0.5 * w * quad_form(&self.precision, &e);
                divergence -= 0.5 * kappa * w * nodes.div[node];
            }
        }
        let states = self.measurement_states(v);
        let loglik = self.model.meas_loglik(&self.y, &states, &theta);
        let log_prior = self.model.log_prior(self.node_x(v, 0), self.node_z(v, 0), &theta);
        MeritParts {
            loglik,
            log_prior,
            divergence,
            energy,
        }
    }

    /// Merit value; non-finite evaluations map to `-∞`.
    pub fn merit(&self, v: &[f64]) -> f64 {
        finite_or_neg_inf(self.merit_parts(v).total())
    }

    /// Merit value and its exact gradient (written into `grad`).
    pub fn merit_gradient(&self, v: &[f64], grad: &mut [f64]) -> f64 {
        let lay = &self.layout;
        let (m, n, q) = (lay.dim_x, lay.dim_z, lay.dim_theta);
        let n_nodes = lay.n_nodes;
        grad.fill(0.0);
        let theta = self.theta_natural(self.theta_slice(v));
        let nodes = self.eval_nodes(v, &theta);
        let h = self.grid.h;
        let kappa = self.kind.divergence_weight();

        // ∂merit/∂f at each node and the summed quadrature weight per node.
        let mut gf = vec![0.0; n_nodes * m];
        let mut wsum = vec![0.0; n_nodes];
        let mut e = vec![0.0; m];
        let mut s = vec![0.0; m];
        let mut energy = 0.0;
        let mut divergence = 0.0;
        for i in 0..self.grid.n_intervals {
            let ids = [2 * i, 2 * i + 1, 2 * i + 2];
            for (role, &node) in ids.iter().enumerate() {
                for c in 0..m {
                    let xdot: f64 = (0..3).map(|l| XDOT[role][l] * v[lay.x_index(ids[l], c)]).sum::<f64>() / h;
                    e[c] = xdot - nodes.f[node * m + c];
                }
                mat_vec(&self.precision, &e, &mut s);
                let w = SIMPSON_W[role] * h;
                energy -= 0.5 * w * dot(&e, &s);
                divergence -= 0.5 * kappa * w * nodes.div[node];
                wsum[node] += w;
                for c in 0..m {
                    gf[node * m + c] += w * s[c];
                    // ∂/∂ẋ = -w s, spread over the three x nodes
                    for l in 0..3 {
                        grad[lay.x_index(ids[l], c)] -= w * s[c] * XDOT[role][l] / h;
                    }
                }
            }
        }

        let mut gtheta = vec![0.0; q];
        let mut jac = Jacobian::new(m, m, n, q);
        let (mut dgx, mut dgz, mut dgt) = (vec![0.0; m], vec![0.0; n], vec![0.0; q]);
        for j in 0..n_nodes {
            let t = self.grid.node_time(j);
            let (x, z) = (self.node_x(v, j), self.node_z(v, j));
            let gfj = &gf[j * m..(j + 1) * m];
            if gfj.iter().any(|&g| g != 0.0) {
                self.model.drift_jacobian(t, x, z, &theta, &mut jac);
                for r in 0..m {
                    let g = gfj[r];
                    for c in 0..m {
                        grad[lay.x_index(j, c)] += g * jac.dx[r * m + c];
                    }
                    for c in 0..n {
                        grad[lay.z_index(j, c)] += g * jac.dz[r * n + c];
                    }
                    for c in 0..q {
                        gtheta[c] += g * jac.dtheta[r * q + c];
                    }
                }
            }
            if kappa != 0.0 {
                self.model
                    .drift_div_gradient(t, x, z, &theta, &mut dgx, &mut dgz, &mut dgt);
                let w = -0.5 * kappa * wsum[j];
                for c in 0..m {
                    grad[lay.x_index(j, c)] += w * dgx[c];
                }
                for c in 0..n {
                    grad[lay.z_index(j, c)] += w * dgz[c];
                }
                for c in 0..q {
                    gtheta[c] += w * dgt[c];
                }
            }
        }

        // measurement likelihood
        let states = self.measurement_states(v);
        let mut gstates = vec![0.0; states.len()];
        let loglik = self
            .model
            .meas_loglik_gradient(&self.y, &states, &theta, &mut gstates, &mut dgt);
        let w = lay.node_width();
        for k in 0..self.grid.n_meas {
            let node = self.grid.meas_node(k);
            for c in 0..w {
                grad[node * w + c] += gstates[k * w + c];
            }
        }
        for c in 0..q {
            gtheta[c] += dgt[c];
        }

        // prior
        let log_prior = self.model.log_prior_gradient(
            self.node_x(v, 0),
            self.node_z(v, 0),
            &theta,
            &mut dgx,
            &mut dgz,
            &mut dgt,
        );
        for c in 0..m {
            grad[lay.x_index(0, c)] += dgx[c];
        }
        for c in 0..n {
            grad[lay.z_index(0, c)] += dgz[c];
        }
        for c in 0..q {
            gtheta[c] += dgt[c];
        }

        for &i in &self.log_idx {
            gtheta[i] *= theta[i];
        }
        let t0 = lay.theta_index(0);
        grad[t0..t0 + q].copy_from_slice(&gtheta);

        finite_or_neg_inf(loglik + log_prior + divergence + energy)
    }

    fn eval_h(&self, v: &[f64], theta: &[f64]) -> Vec<f64> {
        let n = self.layout.dim_z;
        let nodes = self.layout.n_nodes;
        let mut hv = vec![0.0; nodes * n];
        for j in 0..nodes {
            let t = self.grid.node_time(j);
            self.model.drift_h(
                t,
                self.node_x(v, j),
                self.node_z(v, j),
                theta,
                &mut hv[j * n..(j + 1) * n],
            );
        }
        hv
    }

    /// Simpson and midpoint defects, interval-major:
    /// `[D1(interval 0), D2(interval 0), D1(interval 1), …]`, each `dim_z` long.
    pub fn defects(&self, v: &[f64], out: &mut [f64]) {
        let n = self.layout.dim_z;
        if n == 0 {
            return;
        }
        let theta = self.theta_natural(self.theta_slice(v));
        let hv = self.eval_h(v, &theta);
        let h = self.grid.h;
        for i in 0..self.grid.n_intervals {
            let (a, c, b) = (2 * i, 2 * i + 1, 2 * i + 2);
            let (za, zc, zb) = (self.node_z(v, a), self.node_z(v, c), self.node_z(v, b));
            for k in 0..n {
                let (ha, hc, hb) = (hv[a * n + k], hv[c * n + k], hv[b * n + k]);
                out[i * 2 * n + k] = zb[k] - za[k] - h / 6.0 * (ha + 4.0 * hc + hb);
                out[i * 2 * n + n + k] = zc[k] - 0.5 * (za[k] + zb[k]) - h / 8.0 * (ha - hb);
            }
        }
    }

    /// Accumulates `J(v)ᵀ w` into `out`, where `J` is the defect Jacobian.
    pub fn defects_jt_mul(&self, v: &[f64], w: &[f64], out: &mut [f64]) {
        let lay = &self.layout;
        let (m, n, q) = (lay.dim_x, lay.dim_z, lay.dim_theta);
        if n == 0 {
            return;
        }
        let theta = self.theta_natural(self.theta_slice(v));
        let h = self.grid.h;
        // ∂(defect·w)/∂h at each node
        let mut gh = vec![0.0; lay.n_nodes * n];
        for i in 0..self.grid.n_intervals {
            let (a, c, b) = (2 * i, 2 * i + 1, 2 * i + 2);
            for k in 0..n {
                let w1 = w[i * 2 * n + k];
                let w2 = w[i * 2 * n + n + k];
                out[lay.z_index(b, k)] += w1 - 0.5 * w2;
                out[lay.z_index(a, k)] += -w1 - 0.5 * w2;
                out[lay.z_index(c, k)] += w2;
                gh[a * n + k] += -h / 6.0 * w1 - h / 8.0 * w2;
                gh[c * n + k] += -4.0 * h / 6.0 * w1;
                gh[b * n + k] += -h / 6.0 * w1 + h / 8.0 * w2;
            }
        }
        let mut jac = Jacobian::new(n, m, n, q);
        let mut gtheta = vec![0.0; q];
        for j in 0..lay.n_nodes {
            let t = self.grid.node_time(j);
            self.model
                .drift_h_jacobian(t, self.node_x(v, j), self.node_z(v, j), &theta, &mut jac);
            for r in 0..n {
                let g = gh[j * n + r];
                if g == 0.0 {
                    continue;
                }
                for c in 0..m {
                    out[lay.x_index(j, c)] += g * jac.dx[r * m + c];
                }
                for c in 0..n {
                    out[lay.z_index(j, c)] += g * jac.dz[r * n + c];
                }
                for c in 0..q {
                    gtheta[c] += g * jac.dtheta[r * q + c];
                }
            }
        }
        for &i in &self.log_idx {
            gtheta[i] *= theta[i];
        }
        for c in 0..q {
            out[lay.theta_index(c)] += gtheta[c];
        }
    }

    /// Sparse defect Jacobian as `(row, col, value)` triplets, one column at
    /// a time through [`Self::defects_jt_mul`] on unit rows. Intended for
    /// inspection and tests, not for the solver.
    pub fn defect_jacobian_triplets(&self, v: &[f64]) -> Vec<(usize, usize, f64)> {
        let nc = self.n_constraints();
        let mut out = Vec::new();
        let mut w = vec![0.0; nc];
        let mut row = vec![0.0; self.layout.dim()];
        for r in 0..nc {
            w[r] = 1.0;
            row.fill(0.0);
            self.defects_jt_mul(v, &w, &mut row);
            w[r] = 0.0;
            out.extend(
                row.iter()
                    .enumerate()
                    .filter(|(_, &val)| val != 0.0)
                    .map(|(c, &val)| (r, c, val)),
            );
        }
        out
    }

    /// The estimate as a continuous-time path: quadratic `x` and cubic
    /// Hermite `z` within each interval.
    pub fn trajectory(&self, v: &[f64]) -> Trajectory {
        let dv = self.layout.unpack(v).expect("decision vector has the layout dimension");
        let theta = self.theta_natural(&dv.theta);
        let zdot = self.eval_h(v, &theta);
        Trajectory {
            times: self.grid.node_times(),
            dim_x: self.layout.dim_x,
            dim_z: self.layout.dim_z,
            x: dv.x,
            z: dv.z,
            theta,
            interpolant: Interpolant::HermiteSimpson { zdot },
        }
    }
}

impl<M: SdeModel> Nlp for CollocationProblem<M> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn n_constraints(&self) -> usize {
        CollocationProblem::n_constraints(self)
    }

    fn merit(&self, v: &[f64]) -> f64 {
        CollocationProblem::merit(self, v)
    }

    fn merit_gradient(&self, v: &[f64], grad: &mut [f64]) -> f64 {
        CollocationProblem::merit_gradient(self, v, grad)
    }

    /// Defects divided by `h_c`, i.e. rate residuals in units of `ż`.
    fn constraints(&self, v: &[f64], out: &mut [f64]) {
        self.defects(v, out);
        let s = 1.0 / self.grid.h;
        out.iter_mut().for_each(|e| *e *= s);
    }

    fn constraints_jt_mul(&self, v: &[f64], w: &[f64], out: &mut [f64]) {
        let s = 1.0 / self.grid.h;
        let ws: Vec<f64> = w.iter().map(|e| e * s).collect();
        self.defects_jt_mul(v, &ws, out)
    }
}

fn finite_or_neg_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        out[i] = (0..n).map(|j| a[i * n + j] * x[j]).sum();
    }
}

fn quad_form(a: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += x[i] * a[i * n + j] * x[j];
        }
    }
    s
}
