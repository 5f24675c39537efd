//! Parameter estimation: multi-start bounded Levenberg-Marquardt for the
//! exchange and sphere-plus-ball models, non-negative dictionary fits for
//! the kernel model, and error summaries against ground truth.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::models::{
    cexi_signal, exchange_time, kappa_from_exchange_time, soma_kernel, verdict_signal, CexiParams, VerdictParams,
};
use crate::rng::derive_seed;
use crate::sequence::Protocol;
use crate::signal::PowderRow;
use crate::substrate::Vec3;

pub const DEFAULT_STARTS: usize = 10;
pub const MAX_ITERATIONS: usize = 500;
const COST_TOLERANCE: f64 = 1e-10;
/// Upper end of the κ range used to draw starting points (µm/s).
pub const KAPPA_START_MAX: f64 = 100.0;
pub const DICTIONARY_RADII: [f64; 7] = [0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
pub const DICTIONARY_DIFFUSIVITIES: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 2.5];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("no start converged")]
    NoConvergence,
    #[error("signal is constant")]
    DegenerateSignal,
    #[error("dictionary is singular or does not match the signal")]
    SingularDictionary,
    #[error("no ground truth for condition {0}")]
    MismatchedKeys(String),
    #[error("no data points")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitBounds {
    pub r: (f64, f64),
    pub icvf: (f64, f64),
    pub d_i: (f64, f64),
    pub d_e: (f64, f64),
    pub kappa: (f64, f64),
    /// Box used for the exchange time (ms), which is what is fitted.
    pub tau_ex: (f64, f64),
}

impl Default for FitBounds {
    fn default() -> Self {
        Self {
            r: (0.1, 20.0),
            icvf: (0.1, 0.9),
            d_i: (0.01, 3.0),
            d_e: (0.01, 3.0),
            kappa: (0.0, f64::INFINITY),
            tau_ex: (0.1, 1e5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitModel {
    Cexi,
    /// Sphere plus isotropic extracellular pool.
    Verdict,
}

impl fmt::Display for FitModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitModel::Cexi => "CEXI",
            FitModel::Verdict => "VERDICT",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitMode {
    AllDelta,
    PerDelta(f64),
}

impl fmt::Display for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitMode::AllDelta => f.write_str("allDelta"),
            FitMode::PerDelta(d) => write!(f, "perDelta:{d}"),
        }
    }
}

/// One normalised, powder-averaged data point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitPoint {
    pub delta_small: f64,
    pub delta_big: f64,
    pub b: f64,
    pub s: f64,
}

impl From<&PowderRow> for FitPoint {
    fn from(r: &PowderRow) -> Self {
        Self { delta_small: r.delta_small, delta_big: r.delta_big, b: r.b, s: r.s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimates {
    pub f_i: f64,
    pub r: f64,
    pub d_i: f64,
    pub d_e: f64,
    pub tau_ex: Option<f64>,
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: FitModel,
    pub mode: FitMode,
    pub estimates: Estimates,
    pub residual_sse: f64,
    pub n_restarts_used: usize,
    pub best_start_index: usize,
    pub converged: bool,
}

/// Maps the unit cube onto the parameter box; the exchange time is
/// log-scaled.
struct Parameterisation {
    model: FitModel,
    bounds: FitBounds,
}

impl Parameterisation {
    fn lin(u: f64, (lo, hi): (f64, f64)) -> f64 {
        lo + u * (hi - lo)
    }

    fn estimates(&self, u: &[f64]) -> Estimates {
        let b = &self.bounds;
        let f_i = Self::lin(u[0], b.icvf);
        let r = Self::lin(u[1], b.r);
        let d_i = Self::lin(u[2], b.d_i);
        let d_e = Self::lin(u[3], b.d_e);
        let tau_ex = (self.model == FitModel::Cexi)
            .then(|| (Self::lin(u[4], (b.tau_ex.0.ln(), b.tau_ex.1.ln()))).exp());
        let kappa = tau_ex.map(|t| kappa_from_exchange_time(r, f_i, t));
        Estimates { f_i, r, d_i, d_e, tau_ex, kappa }
    }

    fn predict(&self, e: &Estimates, p: &FitPoint) -> f64 {
        match self.model {
            FitModel::Cexi => {
                let params = CexiParams { f_i: e.f_i, r_s: e.r, d_is: e.d_i, d_ex: e.d_e, tau_ex: e.tau_ex.unwrap_or(f64::INFINITY) };
                cexi_signal(&params, p.b, p.delta_big, p.delta_small)
            }
            FitModel::Verdict => {
                let params = VerdictParams::reduced(e.f_i, e.r, e.d_i, e.d_e);
                verdict_signal(&params, p.b, &Vec3::z(), p.delta_small, p.delta_big)
            }
        }
    }

    fn start(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut u: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
        if self.model == FitModel::Cexi {
            let b = &self.bounds;
            let kappa = rng.gen::<f64>() * KAPPA_START_MAX;
            let tau = exchange_time(Self::lin(u[1], b.r), Self::lin(u[0], b.icvf), kappa).unwrap_or(b.tau_ex.1);
            let tau = tau.clamp(b.tau_ex.0, b.tau_ex.1);
            u.push((tau.ln() - b.tau_ex.0.ln()) / (b.tau_ex.1.ln() - b.tau_ex.0.ln()));
        }
        u
    }
}

struct LmOutcome {
    u: Vec<f64>,
    sse: f64,
    converged: bool,
}

/// Levenberg-Marquardt on the unit box with bound projection. Variables at a
/// bound whose gradient points outward are frozen for the step.
fn levenberg_marquardt(residuals: &dyn Fn(&[f64]) -> Vec<f64>, mut u: Vec<f64>) -> LmOutcome {
    let n = u.len();
    let sse = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    let mut r = residuals(&u);
    let mut cost = sse(&r);
    let mut lambda = 1e-3;
    for _ in 0..MAX_ITERATIONS {
        if cost < 1e-30 {
            return LmOutcome { u, sse: cost, converged: true };
        }
        let m = r.len();
        let mut jac = DMatrix::<f64>::zeros(m, n);
        for j in 0..n {
            let h = 1e-6;
            let (lo, hi) = ((u[j] - h).max(0.0), (u[j] + h).min(1.0));
            let mut a = u.clone();
            a[j] = lo;
            let mut b = u.clone();
            b[j] = hi;
            let (ra, rb) = (residuals(&a), residuals(&b));
            for i in 0..m {
                jac[(i, j)] = (rb[i] - ra[i]) / (hi - lo);
            }
        }
        let rv = DVector::from_vec(r.clone());
        let grad = jac.transpose() * &rv;
        let free: Vec<usize> = (0..n)
            .filter(|&j| !((u[j] <= 0.0 && grad[j] > 0.0) || (u[j] >= 1.0 && grad[j] < 0.0)))
            .collect();
        if free.iter().all(|&j| grad[j].abs() < 1e-15) {
            return LmOutcome { u, sse: cost, converged: true };
        }
        let jf = jac.select_columns(&free);
        let a = jf.transpose() * &jf;
        let g = jf.transpose() * &rv;
        loop {
            let mut damped = a.clone();
            for k in 0..free.len() {
                damped[(k, k)] += lambda * (a[(k, k)] + 1e-12);
            }
            let step = damped.lu().solve(&(-&g));
            let mut trial = u.clone();
            if let Some(step) = step {
                for (k, &j) in free.iter().enumerate() {
                    trial[j] = (u[j] + step[k]).clamp(0.0, 1.0);
                }
            }
            let rt = residuals(&trial);
            let ct = sse(&rt);
            if ct < cost {
                let relative = (cost - ct) / cost;
                u = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 3.0).max(1e-12);
                if relative < COST_TOLERANCE {
                    return LmOutcome { u, sse: cost, converged: true };
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e12 {
                // no descent direction left: a stationary point of the box problem
                return LmOutcome { u, sse: cost, converged: true };
            }
        }
    }
    LmOutcome { u, sse: cost, converged: false }
}

/// Multi-start bounded least squares of `model` on `points`.
///
/// Start `k` is drawn from its own stream derived from `(seed, k)`, so adding
/// starts never changes earlier ones and the best-of cost is monotone in
/// `n_starts`. Ties go to the lowest start index.
pub fn fit_nlls(
    model: FitModel,
    points: &[FitPoint],
    bounds: &FitBounds,
    n_starts: usize,
    seed: u64,
    mode: FitMode,
) -> Result<FitResult, FitError> {
    let points: Vec<FitPoint> = match mode {
        FitMode::AllDelta => points.to_vec(),
        FitMode::PerDelta(d) => points.iter().copied().filter(|p| (p.delta_big - d).abs() < 1e-9).collect(),
    };
    if points.is_empty() {
        return Err(FitError::Empty);
    }
    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.s), h.max(p.s)));
    if hi - lo < 1e-12 {
        return Err(FitError::DegenerateSignal);
    }
    let param = Parameterisation { model, bounds: *bounds };
    let residuals = |u: &[f64]| {
        let e = param.estimates(u);
        points.iter().map(|p| param.predict(&e, p) - p.s).collect::<Vec<f64>>()
    };
    let outcomes: Vec<LmOutcome> = (0..n_starts.max(1))
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
            levenberg_marquardt(&residuals, param.start(&mut rng))
        })
        .collect();
    let best = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.converged)
        .min_by(|a, b| a.1.sse.total_cmp(&b.1.sse).then(a.0.cmp(&b.0)))
        .ok_or(FitError::NoConvergence)?;
    Ok(FitResult {
        model,
        mode,
        estimates: param.estimates(&best.1.u),
        residual_sse: best.1.sse,
        n_restarts_used: outcomes.len(),
        best_start_index: best.0,
        converged: true,
    })
}

/// One fit per distinct Δ in `points`, in ascending Δ.
pub fn fit_per_delta(
    model: FitModel,
    points: &[FitPoint],
    bounds: &FitBounds,
    n_starts: usize,
    seed: u64,
) -> Result<Vec<FitResult>, FitError> {
    let mut deltas: Vec<f64> = points.iter().map(|p| p.delta_big).collect();
    deltas.sort_by(f64::total_cmp);
    deltas.dedup();
    deltas.into_iter().map(|d| fit_nlls(model, points, bounds, n_starts, seed, FitMode::PerDelta(d))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Atom {
    Sphere { r: f64, d: f64 },
    Extra { d: f64 },
}

/// Kernel matrix over the distinct (δ, Δ, b) of a protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub points: Vec<(f64, f64, f64)>,
    pub atoms: Vec<Atom>,
    pub matrix: DMatrix<f64>,
}

/// Restricted-sphere atoms on the radius × diffusivity grid plus free
/// extracellular atoms, rows ordered like the powder average.
pub fn build_dictionary(protocol: &Protocol) -> Dictionary {
    let mut points: Vec<(f64, f64, f64)> = Vec::new();
    for m in &protocol.measurements {
        let key = (m.delta_small, m.delta_big, m.b);
        if !points.contains(&key) {
            points.push(key);
        }
    }
    let mut atoms = Vec::new();
    for &r in &DICTIONARY_RADII {
        for &d in &DICTIONARY_DIFFUSIVITIES {
            atoms.push(Atom::Sphere { r, d });
        }
    }
    atoms.extend(DICTIONARY_DIFFUSIVITIES.iter().map(|&d| Atom::Extra { d }));
    let matrix = DMatrix::from_fn(points.len(), atoms.len(), |i, j| {
        let (ds, db, b) = points[i];
        match atoms[j] {
            Atom::Sphere { r, d } => soma_kernel(b, r, d, ds, db),
            Atom::Extra { d } => (-b * d).exp(),
        }
    });
    Dictionary { points, atoms, matrix }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryFit {
    pub weights: Vec<f64>,
    pub r_mean: f64,
    pub d_i_mean: f64,
    pub d_e_mean: f64,
    pub icvf: f64,
    pub residual: f64,
}

pub fn fit_dictionary(dict: &Dictionary, signal: &[f64]) -> Result<DictionaryFit, FitError> {
    fit_dictionary_regularised(dict, signal, 0.0)
}

/// NNLS with an optional Tikhonov weight on the atom weights.
pub fn fit_dictionary_regularised(dict: &Dictionary, signal: &[f64], lambda: f64) -> Result<DictionaryFit, FitError> {
    let (m, n) = dict.matrix.shape();
    if signal.len() != m || n == 0 || dict.matrix.iter().any(|x| !x.is_finite()) {
        return Err(FitError::SingularDictionary);
    }
    let (a, b) = if lambda > 0.0 {
        let mut a = DMatrix::zeros(m + n, n);
        a.view_mut((0, 0), (m, n)).copy_from(&dict.matrix);
        a.view_mut((m, 0), (n, n)).fill_diagonal(lambda.sqrt());
        let mut b = DVector::zeros(m + n);
        b.rows_mut(0, m).copy_from_slice(signal);
        (a, b)
    } else {
        (dict.matrix.clone(), DVector::from_column_slice(signal))
    };
    let weights = nnls(&a, &b).ok_or(FitError::SingularDictionary)?;
    let fitted = &dict.matrix * DVector::from_column_slice(&weights);
    let residual = (fitted - DVector::from_column_slice(signal)).norm();

    let (mut sw, mut sr, mut sd, mut ew, mut ed) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (w, atom) in weights.iter().zip(&dict.atoms) {
        match *atom {
            Atom::Sphere { r, d } => {
                sw += w;
                sr += w * r;
                sd += w * d;
            }
            Atom::Extra { d } => {
                ew += w;
                ed += w * d;
            }
        }
    }
    let ratio = |x: f64, y: f64| if y > 0.0 { x / y } else { 0.0 };
    Ok(DictionaryFit {
        r_mean: ratio(sr, sw),
        d_i_mean: ratio(sd, sw),
        d_e_mean: ratio(ed, ew),
        icvf: ratio(sw, sw + ew),
        weights,
        residual,
    })
}

/// Lawson-Hanson active-set non-negative least squares.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<Vec<f64>> {
    let n = a.ncols();
    let tol = 1e-13 * a.norm().max(1.0) * b.norm().max(1.0);
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let solve = |passive: &[bool]| -> Option<DVector<f64>> {
        let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = a.select_columns(&cols);
        let z = sub.svd(true, true).solve(b, 1e-14).ok()?;
        let mut full = DVector::zeros(n);
        for (k, &j) in cols.iter().enumerate() {
            full[j] = z[k];
        }
        Some(full)
    };
    for _ in 0..3 * n {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(t) = candidate else { break };
        passive[t] = true;
        loop {
            let z = solve(&passive)?;
            if (0..n).filter(|&j| passive[j]).all(|j| z[j] > 0.0) {
                x = z;
                break;
            }
            let alpha = (0..n)
                .filter(|&j| passive[j] && z[j] <= 0.0)
                .map(|j| x[j] / (x[j] - z[j]))
                .fold(f64::INFINITY, f64::min);
            x += (z - &x) * alpha;
            for j in 0..n {
                if passive[j] && x[j] <= tol {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    Some(x.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeRow {
    pub condition: String,
    pub n: usize,
    pub mae: f64,
    pub variance: f64,
}

/// Mean absolute error and estimate variance per condition.
pub fn evaluate_mae(
    estimates: &BTreeMap<String, Vec<f64>>,
    truth: &BTreeMap<String, f64>,
) -> Result<Vec<MaeRow>, FitError> {
    estimates
        .iter()
        .map(|(key, values)| {
            let t = *truth.get(key).ok_or_else(|| FitError::MismatchedKeys(key.clone()))?;
            let n = values.len();
            if n == 0 {
                return Err(FitError::Empty);
            }
            let mae = values.iter().map(|v| (v - t).abs()).sum::<f64>() / n as f64;
            let mean = values.iter().sum::<f64>() / n as f64;
            let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            Ok(MaeRow { condition: key.clone(), n, mae, variance })
        })
        .collect()
}

pub fn write_mae_csv<W: Write>(rows: &[MaeRow], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["condition", "n", "mae", "variance"])?;
    for r in rows {
        out.serialize((&r.condition, r.n, r.mae, r.variance))?;
    }
    out.flush()?;
    Ok(())
}
