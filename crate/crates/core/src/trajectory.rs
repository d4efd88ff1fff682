//! Continuous-time representation of an estimated state path.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Interpolant {
    /// Collocation output: `times` alternate endpoint/midpoint nodes, `x` is
    /// the quadratic through the three nodes of an interval and `z` the cubic
    /// Hermite spline with node derivatives `zdot` (row-major, like `z`).
    HermiteSimpson { zdot: Vec<f64> },
    /// Plain samples: cubic Hermite with finite-difference node slopes.
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub dim_x: usize,
    pub dim_z: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    /// Natural-scale parameter estimate.
    pub theta: Vec<f64>,
    pub interpolant: Interpolant,
}

fn hermite(s: f64, h: f64, ya: f64, da: f64, yb: f64, db: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * ya + (s3 - 2.0 * s2 + s) * h * da + (-2.0 * s3 + 3.0 * s2) * yb + (s3 - s2) * h * db
}

impl Trajectory {
    pub fn t_start(&self) -> f64 {
        self.times.first().copied().unwrap_or(0.0)
    }

    pub fn t_end(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    fn slope(values: &[f64], times: &[f64], dim: usize, i: usize, c: usize) -> f64 {
        let n = times.len();
        let (lo, hi) = if i == 0 {
            (0, 1)
        } else if i + 1 == n {
            (n - 2, n - 1)
        } else {
            (i - 1, i + 1)
        };
        (values[hi * dim + c] - values[lo * dim + c]) / (times[hi] - times[lo])
    }

    /// Interpolated `(x, z)` at `t` (clamped to the covered window).
    pub fn eval(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.dim_x, self.dim_z);
        let mut x = vec![0.0; m];
        let mut z = vec![0.0; n];
        let t = t.clamp(self.t_start(), self.t_end());
        match &self.interpolant {
            Interpolant::HermiteSimpson { zdot } => {
                let n_int = (self.times.len() - 1) / 2;
                // endpoint k sits at index 2k
                let mut lo = 0usize;
                let mut hi = n_int;
                while hi - lo > 1 {
                    let mid = (lo + hi) / 2;
                    if self.times[2 * mid] <= t {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let (a, c, b) = (2 * lo, 2 * lo + 1, 2 * lo + 2);
                let h = self.times[b] - self.times[a];
                let s = (t - self.times[a]) / h;
                let l0 = 2.0 * (s - 0.5) * (s - 1.0);
                let l1 = -4.0 * s * (s - 1.0);
                let l2 = 2.0 * s * (s - 0.5);
                for k in 0..m {
                    x[k] = l0 * self.x[a * m + k] + l1 * self.x[c * m + k] + l2 * self.x[b * m + k];
                }
                for k in 0..n {
                    z[k] = hermite(
                        s,
                        h,
                        self.z[a * n + k],
                        zdot[a * n + k],
                        self.z[b * n + k],
                        zdot[b * n + k],
                    );
                }
            }
            Interpolant::Samples => {
                let i = match self.times.partition_point(|&ti| ti <= t) {
                    0 => 0,
                    p => (p - 1).min(self.times.len() - 2),
                };
                let h = self.times[i + 1] - self.times[i];
                let s = (t - self.times[i]) / h;
                for k in 0..m {
                    x[k] = hermite(
                        s,
                        h,
                        self.x[i * m + k],
                        Self::slope(&self.x, &self.times, m, i, k),
                        self.x[(i + 1) * m + k],
                        Self::slope(&self.x, &self.times, m, i + 1, k),
                    );
                }
                for k in 0..n {
                    z[k] = hermite(
                        s,
                        h,
                        self.z[i * n + k],
                        Self::slope(&self.z, &self.times, n, i, k),
                        self.z[(i + 1) * n + k],
                        Self::slope(&self.z, &self.times, n, i + 1, k),
                    );
                }
            }
        }
        (x, z)
    }

    /// Writes `t, x…, z…` at the stored nodes.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> crate::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim_x).map(|i| if self.dim_x == 1 { "x".into() } else { format!("x{i}") }));
        header.extend((0..self.dim_z).map(|i| if self.dim_z == 1 { "z".into() } else { format!("z{i}") }));
        w.write_record(&header)?;
        for (i, t) in self.times.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.x[i * self.dim_x..(i + 1) * self.dim_x].iter().map(f64::to_string));
            row.extend(self.z[i * self.dim_z..(i + 1) * self.dim_z].iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
