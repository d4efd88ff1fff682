//! Duffing Monte Carlo experiments: initial guesses, the ISE metric, single
//! runs and the aggregated Monte Carlo study.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{pem_estimate, smoothed_trajectory, ukf_filter, uks_smooth, PemOptions};
use crate::error::{check_len, Error, Result};
use crate::model::{DuffingModel, DuffingParams, DuffingPrior, MeasurementKind};
use crate::simulate::{
    derive_rng, sample_initial_state, sample_measurements_gaussian, sample_measurements_mixture, simulate_order15,
    whole_steps, SimPath, Stream,
};
use crate::solve::{solve, SolveStatus, SolverOptions};
use crate::spline::SmoothingSpline;
use crate::trajectory::Trajectory;
use crate::transcribe::{CollocationGrid, CollocationProblem, DecisionVector, EstimatorKind};

/// How the parameter part of an initial guess was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuessStatus {
    Regression,
    /// Rank-deficient regression; `(a, b, d)` set to zero.
    DegenerateRegression,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialGuess {
    /// Decision vector with `θ = [a, b, d, ln σ_y]`.
    pub decision: DecisionVector,
    pub status: GuessStatus,
    pub spline_lambda: f64,
}

/// Builds the Duffing starting point from the measurements alone: a
/// smoothing spline `z̃` through the data gives `z = z̃`, `x = z̃'`, and
/// `(a, b, d)` come from regressing `z̃''` on `-z̃³, -z̃, -z̃'` after removing
/// the forcing `γ cos t`.
pub fn initial_guess(y: &[f64], t_s: f64, grid: &CollocationGrid, gamma: f64) -> Result<InitialGuess> {
    check_len("measurements", grid.n_meas, y.len())?;
    if y.len() < 10 {
        return Err(Error::InvalidParameter(format!(
            "initial guess needs at least 10 measurements, got {}",
            y.len()
        )));
    }
    let t: Vec<f64> = (0..y.len()).map(|k| k as f64 * t_s).collect();
    let spline = SmoothingSpline::fit(&t, y, 2.0 * t_s)?;
    let times = grid.node_times();
    let x: Vec<f64> = times.iter().map(|&t| spline.derivative(t)).collect();
    let z: Vec<f64> = times.iter().map(|&t| spline.value(t)).collect();

    // normal equations of  z̃'' - γ cos t = -a z̃³ - b z̃ - d z̃'
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for (j, &tj) in times.iter().enumerate() {
        let row = [-z[j].powi(3), -z[j], -x[j]];
        let rhs = spline.second_derivative(tj) - gamma * tj.cos();
        for r in 0..3 {
            atb[r] += row[r] * rhs;
            for c in 0..3 {
                ata[r][c] += row[r] * row[c];
            }
        }
    }
    let ata_m = nalgebra::Matrix3::from_fn(|r, c| ata[r][c]);
    let (abd, status) = match ata_m.cholesky() {
        Some(ch) if rcond_ok(&ata_m) => {
            let s = ch.solve(&nalgebra::Vector3::from_column_slice(&atb));
            ([s[0], s[1], s[2]], GuessStatus::Regression)
        }
        _ => ([0.0; 3], GuessStatus::DegenerateRegression),
    };

    let resid: Vec<f64> = t.iter().zip(y).map(|(&tk, &yk)| yk - spline.value(tk)).collect();
    let sigma_y = sample_std(&resid).max(1e-8);
    Ok(InitialGuess {
        decision: DecisionVector {
            x,
            z,
            theta: vec![abd[0], abd[1], abd[2], sigma_y.ln()],
        },
        status,
        spline_lambda: spline.lambda,
    })
}

fn rcond_ok(m: &nalgebra::Matrix3<f64>) -> bool {
    let eig = m.symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
    hi > 0.0 && lo > 1e-12 * hi
}

/// Sample standard deviation (`n - 1` denominator).
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Integrated square error `∫ (X - x)² + (Z - z)² dt` by the trapezoid rule
/// on the truth's grid.
pub fn ise(truth: &SimPath, estimate: &Trajectory) -> Result<f64> {
    if truth.len() < 2 {
        return Err(Error::InvalidParameter("truth path needs at least two samples".into()));
    }
    check_len("x dimension", truth.dim_x, estimate.dim_x)?;
    check_len("z dimension", truth.dim_z, estimate.dim_z)?;
    let tol = 1e-9 * truth.t_end().abs().max(1.0);
    if (truth.times[0] - estimate.t_start()).abs() > tol || (truth.t_end() - estimate.t_end()).abs() > tol {
        return Err(Error::Misaligned(format!(
            "estimate covers [{}, {}] but the truth covers [{}, {}]",
            estimate.t_start(),
            estimate.t_end(),
            truth.times[0],
            truth.t_end()
        )));
    }
    let sq = |i: usize| {
        let (x, z) = estimate.eval(truth.times[i]);
        let ex: f64 = truth.x_at(i).iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
        let ez: f64 = truth.z_at(i).iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum();
        ex + ez
    };
    let mut total = 0.0;
    let mut prev = sq(0);
    for i in 1..truth.len() {
        let cur = sq(i);
        total += 0.5 * (truth.times[i] - truth.times[i - 1]) * (prev + cur);
        prev = cur;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    /// Gaussian measurement noise with the nominal `σ_y`.
    Gaussian,
    /// Gaussian mixture noise; JME/MEE use the Student-t likelihood.
    Outlier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Jme,
    Mee,
    Pem,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Jme => "jme",
            Estimator::Mee => "mee",
            Estimator::Pem => "pem",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jme" => Ok(Estimator::Jme),
            "mee" => Ok(Estimator::Mee),
            "pem" => Ok(Estimator::Pem),
            other => Err(Error::Config(format!("unknown estimator '{other}'"))),
        }
    }
}

/// Outlier-experiment measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureNoise {
    /// Outlier probability.
    pub p_o: f64,
    pub sigma_o: f64,
    pub sigma_r: f64,
}

impl Default for MixtureNoise {
    fn default() -> Self {
        Self {
            p_o: 0.25,
            sigma_o: 1.0,
            sigma_r: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub t_end: f64,
    pub t_s: f64,
    /// Simulation step.
    pub dt: f64,
    /// Collocation interval.
    pub h_c: f64,
    pub n_runs: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    pub nominal: DuffingParams,
    pub prior: DuffingPrior,
    pub mixture: MixtureNoise,
    pub solver: SolverOptions,
    pub pem: PemOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Gaussian,
            t_end: 50.0,
            t_s: 0.1,
            dt: 0.005,
            h_c: 0.05,
            n_runs: 20,
            seed: 0,
            estimators: vec![Estimator::Jme, Estimator::Mee, Estimator::Pem],
            nominal: DuffingParams::nominal(),
            prior: DuffingPrior::default(),
            mixture: MixtureNoise::default(),
            solver: SolverOptions::default(),
            pem: PemOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    /// 100 runs with T = 200 (gaussian) or T = 100 (outlier).
    pub fn paper_scale(mut self) -> Self {
        self.n_runs = 100;
        self.t_end = match self.kind {
            ExperimentKind::Gaussian => 200.0,
            ExperimentKind::Outlier => 100.0,
        };
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("t_end", self.t_end),
            ("t_s", self.t_s),
            ("dt", self.dt),
            ("h_c", self.h_c),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if whole_steps(self.t_end, self.t_s).is_none() {
            return bad(format!("t_end {} is not a multiple of t_s {}", self.t_end, self.t_s));
        }
        if whole_steps(self.t_s, self.dt).is_none() {
            return bad(format!("t_s {} is not a multiple of dt {}", self.t_s, self.dt));
        }
        if whole_steps(self.t_s, self.h_c).is_none() {
            return bad(format!("t_s {} is not a multiple of h_c {}", self.t_s, self.h_c));
        }
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1".into());
        }
        let mut seen = self.estimators.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.estimators.len() {
            return bad("estimator set has duplicates".into());
        }
        self.nominal.validate().map_err(|e| Error::Config(e.to_string()))?;
        let p = &self.prior;
        if !(p.sigma_theta > 0.0 && p.sigma_0 > 0.0 && p.shape > 0.0 && p.scale > 0.0) {
            return bad("prior scales must be positive".into());
        }
        if self.kind == ExperimentKind::Outlier {
            let m = &self.mixture;
            if !(0.0..=1.0).contains(&m.p_o) || !(m.sigma_o > 0.0) || !(m.sigma_r > 0.0) {
                return bad("invalid mixture noise settings".into());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    fn jme_likelihood(&self) -> MeasurementKind {
        match self.kind {
            ExperimentKind::Gaussian => MeasurementKind::Gaussian,
            ExperimentKind::Outlier => MeasurementKind::StudentT,
        }
    }

    /// Estimation model with the given likelihood and the configured
    /// nominal values and priors.
    pub fn model(&self, likelihood: MeasurementKind) -> Result<DuffingModel> {
        DuffingModel::new(&self.nominal, self.prior, likelihood)
    }
}

/// Simulated data of one run.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub run_index: u64,
    pub x0: f64,
    pub z0: f64,
    pub truth: SimPath,
    pub y: Vec<f64>,
}

/// Draws the initial state, the path and the measurements of run
/// `run_index` from their own streams.
pub fn simulate_run(config: &ExperimentConfig, run_index: u64) -> Result<Dataset> {
    config.validate()?;
    let model = config.model(MeasurementKind::Gaussian)?;
    let p = &config.nominal;
    let (x0, z0) = sample_initial_state(
        config.prior.sigma_0,
        &mut derive_rng(config.seed, run_index, Stream::InitialState),
    );
    let mut truth = simulate_order15(
        &model,
        &[x0],
        &[z0],
        &p.theta(),
        config.dt,
        config.t_end,
        &mut derive_rng(config.seed, run_index, Stream::ProcessNoise),
    )?;
    truth.seed = Some(config.seed);
    let mut rng = derive_rng(config.seed, run_index, Stream::MeasurementNoise);
    let y = match config.kind {
        ExperimentKind::Gaussian => sample_measurements_gaussian(&truth, config.t_s, p.sigma_y, &mut rng)?,
        ExperimentKind::Outlier => {
            let m = &config.mixture;
            sample_measurements_mixture(&truth, config.t_s, m.p_o, m.sigma_o, m.sigma_r, &mut rng)?
        }
    };
    Ok(Dataset {
        run_index,
        x0,
        z0,
        truth,
        y,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateStatus {
    Converged,
    /// The optimiser stopped on an iteration limit or a line-search
    /// failure; the reported values are its last iterate.
    NotConverged,
    Failed,
}

/// One estimator's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: Estimator,
    pub status: EstimateStatus,
    /// `[a, b, d, σ_y]`.
    pub theta: Option<[f64; 4]>,
    pub ise: Option<f64>,
    /// Merit (JME/MEE) or negative log-posterior (PEM) at the estimate.
    pub objective: Option<f64>,
    /// Merit at the initial guess (JME/MEE).
    pub objective_start: Option<f64>,
    pub constraint_violation: Option<f64>,
    pub iterations: usize,
    pub message: Option<String>,
    pub wall_time_s: f64,
}

impl EstimateRecord {
    fn failed(estimator: Estimator, msg: String, wall: f64) -> Self {
        Self {
            estimator,
            status: EstimateStatus::Failed,
            theta: None,
            ise: None,
            objective: None,
            objective_start: None,
            constraint_violation: None,
            iterations: 0,
            message: Some(msg),
            wall_time_s: wall,
        }
    }
}

/// Outputs of one Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub run_index: u64,
    pub seed: u64,
    pub x0: f64,
    pub z0: f64,
    pub guess_status: Option<GuessStatus>,
    pub estimates: Vec<EstimateRecord>,
}

impl McRecord {
    /// Every estimator produced a result.
    pub fn completed(&self) -> bool {
        self.estimates.iter().all(|e| e.status != EstimateStatus::Failed)
    }

    /// Copy with wall times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for e in &mut r.estimates {
            e.wall_time_s = 0.0;
        }
        r
    }

    pub fn estimate(&self, which: Estimator) -> Option<&EstimateRecord> {
        self.estimates.iter().find(|e| e.estimator == which)
    }
}

/// A solved estimator together with its state path.
#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub record: EstimateRecord,
    pub trajectory: Option<Trajectory>,
}

/// Runs one estimator on `data` and scores it against the truth when given.
pub fn run_estimator(
    config: &ExperimentConfig,
    which: Estimator,
    y: &[f64],
    guess: Option<&InitialGuess>,
    truth: Option<&SimPath>,
) -> EstimateOutput {
    let start = Instant::now();
    let result = match which {
        Estimator::Jme | Estimator::Mee => run_collocation(config, which, y, guess),
        Estimator::Pem => run_pem(config, y),
    };
    let wall = start.elapsed().as_secs_f64();
    match result {
        Ok((mut record, traj)) => {
            record.wall_time_s = wall;
            if let Some(truth) = truth {
                match ise(truth, &traj) {
                    Ok(v) if v.is_finite() => record.ise = Some(v),
                    Ok(_) => {
                        record.status = EstimateStatus::Failed;
                        record.message = Some("non-finite ISE".into());
                    }
                    Err(e) => {
                        record.status = EstimateStatus::Failed;
                        record.message = Some(e.to_string());
                    }
                }
            }
            EstimateOutput {
                record,
                trajectory: Some(traj),
            }
        }
        Err(e) => EstimateOutput {
            record: EstimateRecord::failed(which, e.to_string(), wall),
            trajectory: None,
        },
    }
}

fn run_collocation(
    config: &ExperimentConfig,
    which: Estimator,
    y: &[f64],
    guess: Option<&InitialGuess>,
) -> Result<(EstimateRecord, Trajectory)> {
    let kind = match which {
        Estimator::Jme => EstimatorKind::Jme,
        _ => EstimatorKind::Mee,
    };
    let grid = CollocationGrid::new(config.t_end, config.t_s, config.h_c)?;
    let owned;
    let guess = match guess {
        Some(g) => g,
        None => {
            owned = initial_guess(y, config.t_s, &grid, config.nominal.gamma)?;
            &owned
        }
    };
    let problem = CollocationProblem::build(config.model(config.jme_likelihood())?, grid, y.to_vec(), kind)?;
    let v0 = problem.layout().pack(&guess.decision)?;
    let start_merit = problem.merit(&v0);
    let sol = solve(&problem, &v0, &config.solver);
    let theta_opt = &sol.v[problem.layout().theta_index(0)..];
    let theta = problem.theta_natural(theta_opt);
    let finite = sol.merit.is_finite() && theta.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::Degenerate("solver ended at a non-finite point".into()));
    }
    let status = match sol.status {
        SolveStatus::Converged => EstimateStatus::Converged,
        _ => EstimateStatus::NotConverged,
    };
    let record = EstimateRecord {
        estimator: which,
        status,
        theta: Some([theta[0], theta[1], theta[2], theta[3]]),
        ise: None,
        objective: Some(sol.merit),
        objective_start: Some(start_merit),
        constraint_violation: Some(sol.constraint_violation),
        iterations: sol.iterations.inner,
        message: (status != EstimateStatus::Converged).then(|| format!("{:?}", sol.status)),
        wall_time_s: 0.0,
    };
    Ok((record, problem.trajectory(&sol.v)))
}

fn run_pem(config: &ExperimentConfig, y: &[f64]) -> Result<(EstimateRecord, Trajectory)> {
    let model = config.model(MeasurementKind::Gaussian)?;
    let res = pem_estimate(y, config.t_s, &model, &config.nominal.theta(), &config.pem)?;
    if !res.neglogpost.is_finite() {
        return Err(Error::Degenerate("PEM ended at a non-finite objective".into()));
    }
    let hist = ukf_filter(&model, &res.theta, y, config.t_s, &config.pem.ukf)?;
    let smoothed = uks_smooth(&hist)?;
    let traj = smoothed_trajectory(&model, &res.theta, &hist, &smoothed);
    let status = match res.status {
        crate::baseline::PemStatus::Converged => EstimateStatus::Converged,
        _ => EstimateStatus::NotConverged,
    };
    let t = &res.theta;
    let record = EstimateRecord {
        estimator: Estimator::Pem,
        status,
        theta: Some([t[0], t[1], t[2], t[3]]),
        ise: None,
        objective: Some(res.neglogpost),
        objective_start: None,
        constraint_violation: None,
        iterations: res.iterations,
        message: (status != EstimateStatus::Converged).then(|| format!("{:?}", res.status)),
        wall_time_s: 0.0,
    };
    Ok((record, traj))
}

/// Simulates run `run_index` and applies every configured estimator.
pub fn run_single(config: &ExperimentConfig, run_index: u64) -> Result<McRecord> {
    let data = simulate_run(config, run_index)?;
    let needs_guess = config.estimators.iter().any(|e| *e != Estimator::Pem);
    let guess = if needs_guess {
        let grid = CollocationGrid::new(config.t_end, config.t_s, config.h_c)?;
        Some(initial_guess(&data.y, config.t_s, &grid, config.nominal.gamma))
    } else {
        None
    };
    let guess_status = guess.as_ref().and_then(|g| g.as_ref().ok()).map(|g| g.status);
    let estimates = config
        .estimators
        .iter()
        .map(|&which| match (&guess, which) {
            (Some(Err(e)), Estimator::Jme | Estimator::Mee) => {
                EstimateRecord::failed(which, format!("initial guess: {e}"), 0.0)
            }
            _ => {
                let g = guess.as_ref().and_then(|g| g.as_ref().ok());
                run_estimator(config, which, &data.y, g, Some(&data.truth)).record
            }
        })
        .collect();
    Ok(McRecord {
        run_index,
        seed: config.seed,
        x0: data.x0,
        z0: data.z0,
        guess_status,
        estimates,
    })
}

/// `(min, Q1, median, Q3, max)` with linear interpolation between order
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub runs_ok: usize,
    pub runs_not_converged: usize,
    pub runs_failed: usize,
    /// Quartiles of `a`, `b`, `d`, `sigma_y` and `ise` over runs with a result.
    pub quartiles: BTreeMap<String, Quartiles>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummary {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub n_runs: usize,
    pub completed_runs: usize,
    pub estimators: BTreeMap<String, EstimatorSummary>,
}

impl McSummary {
    /// At least 90% of the runs produced every requested estimate.
    pub fn success(&self) -> bool {
        10 * self.completed_runs >= 9 * self.n_runs
    }

    pub fn median(&self, which: Estimator, field: &str) -> Option<f64> {
        self.estimators
            .get(which.name())?
            .quartiles
            .get(field)
            .map(|q| q.median)
    }
}

pub const SUMMARY_FIELDS: [&str; 5] = ["a", "b", "d", "sigma_y", "ise"];

pub fn summarize(config: &ExperimentConfig, records: &[McRecord]) -> McSummary {
    let mut estimators = BTreeMap::new();
    for &which in &config.estimators {
        let rows: Vec<&EstimateRecord> = records.iter().filter_map(|r| r.estimate(which)).collect();
        let count = |s| rows.iter().filter(|e| e.status == s).count();
        let mut quartiles = BTreeMap::new();
        for (i, field) in SUMMARY_FIELDS.iter().enumerate() {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|e| e.status != EstimateStatus::Failed)
                .filter_map(|e| if i < 4 { e.theta.map(|t| t[i]) } else { e.ise })
                .collect();
            if let Some(q) = Quartiles::of(&vals) {
                quartiles.insert(field.to_string(), q);
            }
        }
        estimators.insert(
            which.name().to_string(),
            EstimatorSummary {
                runs_ok: count(EstimateStatus::Converged),
                runs_not_converged: count(EstimateStatus::NotConverged),
                runs_failed: count(EstimateStatus::Failed),
                quartiles,
            },
        );
    }
    McSummary {
        config: config.clone(),
        config_hash: config.hash(),
        n_runs: records.len(),
        completed_runs: records.iter().filter(|r| r.completed()).count(),
        estimators,
    }
}

#[derive(Debug, Clone)]
pub struct McOutput {
    pub records: Vec<McRecord>,
    pub summary: McSummary,
}

/// Runs every Monte Carlo index in parallel and aggregates the results. A
/// run whose simulation fails is recorded with all estimators failed.
pub fn run_monte_carlo(config: &ExperimentConfig) -> Result<McOutput> {
    config.validate()?;
    let records: Vec<McRecord> = (0..config.n_runs as u64)
        .into_par_iter()
        .map(|i| {
            run_single(config, i).unwrap_or_else(|e| McRecord {
                run_index: i,
                seed: config.seed,
                x0: f64::NAN,
                z0: f64::NAN,
                guess_status: None,
                estimates: config
                    .estimators
                    .iter()
                    .map(|&w| EstimateRecord::failed(w, e.to_string(), 0.0))
                    .collect(),
            })
        })
        .collect();
    let summary = summarize(config, &records);
    Ok(McOutput { records, summary })
}

pub const RECORD_CSV_HEADER: [&str; 13] = [
    "run_index",
    "seed",
    "estimator",
    "status",
    "a",
    "b",
    "d",
    "sigma_y",
    "ise",
    "objective",
    "constraint_violation",
    "iterations",
    "wall_time_s",
];

/// One row per run per estimator; missing values are empty.
pub fn write_records_csv<W: Write>(records: &[McRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        for e in &r.estimates {
            let th = e.theta.map(|t| t.map(Some)).unwrap_or([None; 4]);
            let status = match e.status {
                EstimateStatus::Converged => "converged",
                EstimateStatus::NotConverged => "not_converged",
                EstimateStatus::Failed => "failed",
            };
            w.write_record([
                r.run_index.to_string(),
                r.seed.to_string(),
                e.estimator.name().to_string(),
                status.to_string(),
                opt(th[0]),
                opt(th[1]),
                opt(th[2]),
                opt(th[3]),
                opt(e.ise),
                opt(e.objective),
                opt(e.constraint_violation),
                e.iterations.to_string(),
                e.wall_time_s.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `runs.csv` and `summary.json` into `dir`.
pub fn write_outputs(output: &McOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_records_csv(&output.records, std::fs::File::create(dir.join("runs.csv"))?)?;
    let f = std::fs::File::create(dir.join("summary.json"))?;
    serde_json::to_writer_pretty(f, &output.summary)?;
    Ok(())
}
