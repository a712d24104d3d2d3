//! Simulation tier: Brownian (or two-point) paths, Cox default times,
//! regression-based backward schemes for the reflected equation on simulated
//! paths, and the Black–Scholes linear-driver example.
//!
//! The tier works in the Cox regime, where the reference and pricing measures
//! coincide. Random streams are keyed by `(seed, path)`, so results do not
//! depend on the thread count.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::filtration::LatticeModel;

/// `(t, x) -> value`.
pub type StateFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// `t -> value`.
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// `(t, x, y, z) -> f`.
pub type McDriverFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;

pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Paths per reduction chunk; fixed so sums never depend on scheduling.
const CHUNK: usize = 4096;

pub fn state_fn(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> StateFn {
    Arc::new(f)
}

pub fn time_fn(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> TimeFn {
    Arc::new(f)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Increments {
    /// Centered Gaussian with variance `dt`.
    Gaussian,
    /// `up` with probability `p`, else `down`.
    TwoPoint { up: f64, down: f64, p: f64 },
}

impl Increments {
    /// The two-point law of a lattice model.
    pub fn from_lattice(model: &LatticeModel) -> Self {
        Increments::TwoPoint {
            up: model.up_move(),
            down: model.down_move(),
            p: model.up_prob,
        }
    }

    fn variance(&self, dt: f64) -> f64 {
        match *self {
            Increments::Gaussian => dt,
            Increments::TwoPoint { up, down, p } => p * up * up + (1.0 - p) * down * down,
        }
    }
}

/// Geometric Brownian asset `dS = S(μ dt + σ dB)`.
#[derive(Clone)]
pub struct AssetModel {
    pub s0: f64,
    pub mu: TimeFn,
    pub sigma: TimeFn,
    pub sigma_min: f64,
}

impl std::fmt::Debug for AssetModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AssetModel")
            .field("s0", &self.s0)
            .field("sigma_min", &self.sigma_min)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub struct McModel {
    pub n_steps: usize,
    pub horizon: f64,
    pub increments: Increments,
    pub asset: Option<AssetModel>,
}

impl McModel {
    pub fn brownian(n_steps: usize, horizon: f64) -> Self {
        Self {
            n_steps,
            horizon,
            increments: Increments::Gaussian,
            asset: None,
        }
    }

    /// Two-point increments of a lattice model.
    pub fn from_lattice(model: &LatticeModel) -> Self {
        Self {
            n_steps: model.n_steps,
            horizon: model.horizon(),
            increments: Increments::from_lattice(model),
            asset: None,
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || !(self.horizon > 0.0) {
            return Err(Error::Model("need n_steps ≥ 1 and a positive horizon".into()));
        }
        if let Increments::TwoPoint { up, down, p } = self.increments {
            if !(p > 0.0 && p < 1.0) || !(up > down) {
                return Err(Error::Model("two-point increments need 0 < p < 1 and up > down".into()));
            }
        }
        if let Some(a) = &self.asset {
            if !(a.s0 > 0.0) {
                return Err(Error::Model("S0 must be positive".into()));
            }
            let dt = self.dt();
            for k in 0..self.n_steps {
                for t in [k as f64 * dt, (k as f64 + 0.5) * dt] {
                    let s = (a.sigma)(t);
                    if !(s >= a.sigma_min) || !(a.sigma_min > 0.0) {
                        return Err(Error::Model(format!(
                            "σ({t}) = {s} below σ_min = {}",
                            a.sigma_min
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Simulated paths. Matrices are path-major; `b` and `state` carry
/// `n_steps + 1` columns, `brownian` carries `n_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub brownian: Vec<f64>,
    pub b: Vec<f64>,
    /// `S` when an asset is simulated, else `B`.
    pub state: Vec<f64>,
    /// First grid step at or after default; `None` is survival past `T`.
    pub default_step: Vec<Option<usize>>,
    /// Probability weight of each path (uniform unless enumerated).
    pub weights: Vec<f64>,
    pub increment_variance: f64,
    pub seed: u64,
}

impl PathBatch {
    pub fn increment(&self, path: usize, k: usize) -> f64 {
        self.brownian[path * self.n_steps + k]
    }

    pub fn b_at(&self, path: usize, k: usize) -> f64 {
        self.b[path * (self.n_steps + 1) + k]
    }

    pub fn state_at(&self, path: usize, k: usize) -> f64 {
        self.state[path * (self.n_steps + 1) + k]
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Whether the path is alive at step `k` (default at `k` counts as dead).
    pub fn alive(&self, path: usize, k: usize) -> bool {
        self.default_step[path].is_none_or(|d| d > k)
    }

    /// Weighted fraction of paths alive at each step.
    pub fn survival_curve(&self) -> Vec<f64> {
        (0..=self.n_steps)
            .map(|k| {
                (0..self.n_paths)
                    .filter(|&i| self.alive(i, k))
                    .map(|i| self.weights[i])
                    .sum()
            })
            .collect()
    }
}

fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn fill_state(model: &McModel, incs: &[f64], b: &mut [f64], s: &mut [f64]) {
    let dt = model.dt();
    for k in 0..model.n_steps {
        b[k + 1] = b[k] + incs[k];
    }
    match &model.asset {
        None => s.copy_from_slice(b),
        Some(a) => {
            s[0] = a.s0;
            for k in 0..model.n_steps {
                let tm = (k as f64 + 0.5) * dt;
                let (mu, sig) = ((a.mu)(tm), (a.sigma)(tm));
                s[k + 1] = s[k] * ((mu - 0.5 * sig * sig) * dt + sig * incs[k]).exp();
            }
        }
    }
}

/// Independent paths; path `i` draws from stream `2i` of the seeded
/// generator.
pub fn simulate_paths(model: &McModel, n_paths: usize, seed: u64) -> Result<PathBatch> {
    model.validate()?;
    if n_paths == 0 {
        return Err(Error::Model("n_paths must be at least 1".into()));
    }
    let n = model.n_steps;
    let dt = model.dt();
    let sd = dt.sqrt();
    let mut brownian = vec![0.0; n_paths * n];
    let mut b = vec![0.0; n_paths * (n + 1)];
    let mut state = vec![0.0; n_paths * (n + 1)];
    brownian
        .par_chunks_mut(n)
        .zip(b.par_chunks_mut(n + 1))
        .zip(state.par_chunks_mut(n + 1))
        .enumerate()
        .for_each(|(i, ((incs, bp), sp))| {
            let mut rng = path_rng(seed, 2 * i as u64);
            for x in incs.iter_mut() {
                *x = match model.increments {
                    Increments::Gaussian => sd * rng.sample::<f64, _>(StandardNormal),
                    Increments::TwoPoint { up, down, p } => {
                        if rng.random::<f64>() < p {
                            up
                        } else {
                            down
                        }
                    }
                };
            }
            fill_state(model, incs, bp, sp);
        });
    Ok(PathBatch {
        n_paths,
        n_steps: n,
        dt,
        brownian,
        b,
        state,
        default_step: vec![None; n_paths],
        weights: vec![1.0 / n_paths as f64; n_paths],
        increment_variance: model.increments.variance(dt),
        seed,
    })
}

/// Every path of a two-point model, weighted by its probability.
pub fn tree_batch(model: &McModel) -> Result<PathBatch> {
    model.validate()?;
    let Increments::TwoPoint { up, down, p } = model.increments else {
        return Err(Error::Model("path enumeration needs two-point increments".into()));
    };
    let n = model.n_steps;
    if n > crate::filtration::MAX_STEPS {
        return Err(Error::Size(format!("{n} steps is too many to enumerate")));
    }
    let n_paths = 1usize << n;
    let mut brownian = vec![0.0; n_paths * n];
    let mut b = vec![0.0; n_paths * (n + 1)];
    let mut state = vec![0.0; n_paths * (n + 1)];
    let mut weights = vec![0.0; n_paths];
    for path in 0..n_paths {
        let incs = &mut brownian[path * n..(path + 1) * n];
        let mut w = 1.0;
        for (k, x) in incs.iter_mut().enumerate() {
            let is_up = path >> k & 1 == 1;
            *x = if is_up { up } else { down };
            w *= if is_up { p } else { 1.0 - p };
        }
        weights[path] = w;
        fill_state(
            model,
            incs,
            &mut b[path * (n + 1)..(path + 1) * (n + 1)],
            &mut state[path * (n + 1)..(path + 1) * (n + 1)],
        );
    }
    Ok(PathBatch {
        n_paths,
        n_steps: n,
        dt: model.dt(),
        brownian,
        b,
        state,
        default_step: vec![None; n_paths],
        weights,
        increment_variance: model.increments.variance(model.dt()),
        seed: 0,
    })
}

/// Default intensity `λ(t, B_t) ≥ 0`.
#[derive(Clone)]
pub struct CoxIntensity {
    pub lambda: StateFn,
}

impl std::fmt::Debug for CoxIntensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("CoxIntensity")
    }
}

impl CoxIntensity {
    pub fn new(lambda: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            lambda: Arc::new(lambda),
        }
    }

    pub fn constant(l: f64) -> Self {
        Self::new(move |_, _| l)
    }

    fn at(&self, t: f64, b: f64) -> f64 {
        (self.lambda)(t, b).max(0.0)
    }

    /// Probability of default during step `k → k+1` given survival to `k`.
    pub fn step_prob(&self, t: f64, b: f64, dt: f64) -> f64 {
        1.0 - (-self.at(t, b) * dt).exp()
    }

    /// `Λ_k = Σ_{j<k} λ(t_j, B_j) Δ` along a path.
    pub fn cumulative(&self, batch: &PathBatch, path: usize) -> Vec<f64> {
        let mut out = vec![0.0; batch.n_steps + 1];
        for k in 0..batch.n_steps {
            out[k + 1] = out[k] + self.at(batch.time(k), batch.b_at(path, k)) * batch.dt;
        }
        out
    }

    /// Path-wise survival `E[e^{-Λ_k}]` at each step.
    pub fn expected_survival(&self, batch: &PathBatch) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = (0..batch.n_paths)
            .into_par_iter()
            .map(|i| self.cumulative(batch, i).iter().map(|l| (-l).exp()).collect())
            .collect();
        (0..=batch.n_steps)
            .map(|k| rows.iter().zip(&batch.weights).map(|(r, w)| w * r[k]).sum())
            .collect()
    }
}

/// Default step is the first `k` with `Λ_k ≥ E`, `E` a unit exponential
/// drawn from stream `2i + 1`.
pub fn apply_cox_default(batch: &PathBatch, intensity: &CoxIntensity) -> PathBatch {
    let default_step = (0..batch.n_paths)
        .into_par_iter()
        .map(|i| {
            let e: f64 = path_rng(batch.seed, 2 * i as u64 + 1).sample(Exp1);
            let lam = intensity.cumulative(batch, i);
            (1..=batch.n_steps).find(|&k| lam[k] >= e)
        })
        .collect();
    PathBatch {
        default_step,
        ..batch.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegressionBasis {
    /// Powers `1, x, …, x^degree` of the standardized state.
    Polynomial(usize),
    /// Indicators of equal-width bins over the state range.
    Piecewise(usize),
    /// One indicator per distinct state level.
    Saturated,
}

impl RegressionBasis {
    fn validate(&self) -> Result<()> {
        match *self {
            RegressionBasis::Piecewise(0) => Err(Error::Regression("bins must be at least 1".into())),
            RegressionBasis::Polynomial(d) if d > 12 => {
                Err(Error::Regression(format!("degree {d} is too high")))
            }
            _ => Ok(()),
        }
    }
}

/// Cross-sectional conditional expectations at one step.
struct Regressor {
    kind: Kind,
}

enum Kind {
    Poly {
        mean: f64,
        scale: f64,
        degree: usize,
    },
    /// Equal-width bins on the state.
    Groups { lo: f64, width: f64, bins: usize },
    Levels { levels: Vec<f64> },
}

fn level_tol(x: f64) -> f64 {
    1e-9 * (1.0 + x.abs())
}

impl Regressor {
    fn new(basis: RegressionBasis, xs: &[f64], ws: &[f64]) -> Self {
        let kind = match basis {
            RegressionBasis::Polynomial(degree) => {
                let tot: f64 = ws.iter().sum();
                let mean = xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / tot;
                let var = xs.iter().zip(ws).map(|(x, w)| w * (x - mean).powi(2)).sum::<f64>() / tot;
                let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
                Kind::Poly {
                    mean,
                    scale,
                    degree,
                }
            }
            RegressionBasis::Piecewise(bins) => {
                let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
                Kind::Groups { lo, width, bins }
            }
            RegressionBasis::Saturated => {
                let mut sorted = xs.to_vec();
                sorted.sort_by(f64::total_cmp);
                let mut levels: Vec<f64> = Vec::new();
                for x in sorted {
                    if levels.last().is_none_or(|l| x - l > level_tol(*l)) {
                        levels.push(x);
                    }
                }
                Kind::Levels { levels }
            }
        };
        Self { kind }
    }

    fn group(&self, x: f64) -> usize {
        match &self.kind {
            Kind::Groups { lo, width, bins } => (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1),
            Kind::Levels { levels } => {
                let i = levels.partition_point(|l| *l < x - level_tol(*l));
                i.min(levels.len() - 1)
            }
            Kind::Poly { .. } => 0,
        }
    }

    fn features(&self, x: f64, out: &mut Vec<f64>) {
        out.clear();
        if let Kind::Poly {
            mean,
            scale,
            degree,
        } = self.kind
        {
            let z = (x - mean) / scale;
            let mut p = 1.0;
            for _ in 0..=degree {
                out.push(p);
                p *= z;
            }
        }
    }

    /// Fits several targets at once; returns a predictor per target.
    fn fit(&self, xs: &[f64], ws: &[f64], targets: &[&[f64]], ridge: f64) -> Result<Vec<Fit>> {
        match &self.kind {
            Kind::Poly { degree, .. } => {
                let d = degree + 1;
                let m = targets.len();
                // Deterministic chunked reduction of X'WX and X'WY.
                let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..xs.len())
                    .collect::<Vec<_>>()
                    .par_chunks(CHUNK)
                    .map(|idx| {
                        let mut a = vec![0.0; d * d];
                        let mut b = vec![0.0; d * m];
                        let mut f = Vec::with_capacity(d);
                        for &i in idx {
                            self.features(xs[i], &mut f);
                            for r in 0..d {
                                let wr = ws[i] * f[r];
                                for c in 0..d {
                                    a[r * d + c] += wr * f[c];
                                }
                                for (t, y) in targets.iter().enumerate() {
                                    b[t * d + r] += wr * y[i];
                                }
                            }
                        }
                        (a, b)
                    })
                    .collect();
                let mut a = vec![0.0; d * d];
                let mut b = vec![0.0; d * m];
                for (pa, pb) in partial {
                    a.iter_mut().zip(pa).for_each(|(x, y)| *x += y);
                    b.iter_mut().zip(pb).for_each(|(x, y)| *x += y);
                }
                let mut a = DMatrix::from_row_slice(d, d, &a);
                for r in 0..d {
                    a[(r, r)] += ridge;
                }
                let chol = a.cholesky().ok_or_else(|| {
                    Error::Regression(format!(
                        "rank-deficient design ({d} columns, {} points); enable ridge",
                        xs.len()
                    ))
                })?;
                Ok((0..m)
                    .map(|t| {
                        let rhs = DVector::from_column_slice(&b[t * d..(t + 1) * d]);
                        Fit::Coef(chol.solve(&rhs).iter().cloned().collect())
                    })
                    .collect())
            }
            Kind::Groups { bins, .. } => Ok(self.group_means(xs, ws, targets, *bins)),
            Kind::Levels { levels } => Ok(self.group_means(xs, ws, targets, levels.len())),
        }
    }

    /// Least squares on indicator columns: weighted group means.
    fn group_means(&self, xs: &[f64], ws: &[f64], targets: &[&[f64]], groups: usize) -> Vec<Fit> {
        let mut mass = vec![0.0; groups];
        let mut sums = vec![vec![0.0; groups]; targets.len()];
        for (i, &x) in xs.iter().enumerate() {
            let g = self.group(x);
            mass[g] += ws[i];
            for (t, y) in targets.iter().enumerate() {
                sums[t][g] += ws[i] * y[i];
            }
        }
        sums.into_iter()
            .map(|s| {
                Fit::Groups(
                    s.iter()
                        .zip(&mass)
                        .map(|(v, m)| if *m > 0.0 { v / m } else { 0.0 })
                        .collect(),
                )
            })
            .collect()
    }

    fn predict(&self, fit: &Fit, x: f64, buf: &mut Vec<f64>) -> f64 {
        match fit {
            Fit::Coef(c) => {
                self.features(x, buf);
                buf.iter().zip(c).map(|(f, c)| f * c).sum()
            }
            Fit::Groups(g) => g[self.group(x)],
        }
    }
}

enum Fit {
    Coef(Vec<f64>),
    Groups(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reflection {
    Clamp,
    /// Implicit penalization with parameter `n` on both barriers.
    Penalized(f64),
}

#[derive(Clone, Debug)]
pub enum DefaultTreatment {
    /// Use the batch's simulated default steps; regress over alive paths.
    Sampled,
    /// Average over the one-step default probability of a Cox intensity.
    Integrated(CoxIntensity),
}

/// Backward problem on simulated paths. Functions take `(t, x)` with `x`
/// the batch state; `terminal` also gives the recovery paid at default.
#[derive(Clone)]
pub struct McProblem {
    pub terminal: StateFn,
    pub driver: Option<McDriverFn>,
    pub lower: Option<StateFn>,
    pub upper: Option<StateFn>,
    pub reflection: Reflection,
    pub treatment: DefaultTreatment,
}

impl McProblem {
    pub fn bsde(terminal: StateFn) -> Self {
        Self {
            terminal,
            driver: None,
            lower: None,
            upper: None,
            reflection: Reflection::Clamp,
            treatment: DefaultTreatment::Sampled,
        }
    }

    pub fn with_driver(mut self, f: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.driver = Some(Arc::new(f));
        self
    }

    pub fn with_barriers(mut self, lower: Option<StateFn>, upper: Option<StateFn>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_reflection(mut self, r: Reflection) -> Self {
        self.reflection = r;
        self
    }

    pub fn with_treatment(mut self, t: DefaultTreatment) -> Self {
        self.treatment = t;
        self
    }

    fn reflect(&self, a: f64, t: f64, x: f64, dt: f64) -> f64 {
        let l = self.lower.as_ref().map_or(f64::NEG_INFINITY, |f| f(t, x));
        let u = self.upper.as_ref().map_or(f64::INFINITY, |f| f(t, x));
        match self.reflection {
            Reflection::Clamp => {
                if a < l {
                    l
                } else if a > u {
                    u
                } else {
                    a
                }
            }
            Reflection::Penalized(n) => {
                let nd = n * dt;
                if a < l {
                    (a + nd * l) / (1.0 + nd)
                } else if a > u {
                    (a + nd * u) / (1.0 + nd)
                } else {
                    a
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LsmcConfig {
    pub basis: RegressionBasis,
    pub ridge: f64,
    /// Bootstrap resamples for the standard error; 0 uses `sd/√n`.
    pub bootstrap_reps: usize,
    pub surface: bool,
}

impl LsmcConfig {
    pub fn new(basis: RegressionBasis) -> Self {
        Self {
            basis,
            ridge: DEFAULT_RIDGE,
            bootstrap_reps: 0,
            surface: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceRow {
    pub step: usize,
    pub y_mean: f64,
    pub std_error: f64,
    pub alive_paths: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MCEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub surface: Option<Vec<SurfaceRow>>,
}

impl MCEstimate {
    /// `|value - target|` in standard errors.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.value - target).abs();
        if self.std_error > 0.0 {
            d / self.std_error
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

fn weighted_stats(vals: &[f64], ws: &[f64]) -> (f64, f64) {
    let tot: f64 = ws.iter().sum();
    let mean = vals.iter().zip(ws).map(|(v, w)| v * w).sum::<f64>() / tot;
    let var = vals.iter().zip(ws).map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>() / tot;
    (mean, var.sqrt() / (vals.len() as f64).sqrt())
}

fn bootstrap_se(vals: &[f64], reps: usize, seed: u64) -> f64 {
    let n = vals.len();
    let means: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = path_rng(seed ^ 0xb007, r as u64);
            (0..n).map(|_| vals[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    let m = means.iter().sum::<f64>() / reps as f64;
    (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps.max(2) - 1) as f64).sqrt()
}

/// Backward regression scheme. At each step the regressed continuation
/// `a = Ĉ + f(Ĉ, Ẑ)Δ` is reflected; path values carry the realized
/// one-step-ahead value plus the driver and reflection adjustments.
pub fn lsmc_solve_drbsde(batch: &PathBatch, problem: &McProblem, config: &LsmcConfig) -> Result<MCEstimate> {
    config.basis.validate()?;
    if config.ridge < 0.0 {
        return Err(Error::Regression("ridge must be nonnegative".into()));
    }
    let n = batch.n_steps;
    let dt = batch.dt;
    let np = batch.n_paths;
    let integrated = match &problem.treatment {
        DefaultTreatment::Integrated(c) => Some(c),
        DefaultTreatment::Sampled => None,
    };
    let alive = |i: usize, k: usize| integrated.is_some() || batch.alive(i, k);
    let tn = batch.time(n);
    // Path values at the current step (meaningful on alive paths).
    let mut y: Vec<f64> = (0..np).map(|i| (problem.terminal)(tn, batch.state_at(i, n))).collect();
    let mut surface = Vec::new();
    if config.surface {
        surface.push(surface_row(batch, n, &y, &alive));
    }
    for k in (0..n).rev() {
        let t = batch.time(k);
        let t1 = batch.time(k + 1);
        let idx: Vec<usize> = (0..np).filter(|&i| alive(i, k)).collect();
        if idx.is_empty() {
            break;
        }
        // Target: value at k+1, or recovery when defaulting at k+1.
        let tilde: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let rec = (problem.terminal)(t1, batch.state_at(i, k + 1));
                match integrated {
                    Some(c) => {
                        let p = c.step_prob(t, batch.b_at(i, k), dt);
                        (1.0 - p) * y[i] + p * rec
                    }
                    None if batch.alive(i, k + 1) => y[i],
                    None => rec,
                }
            })
            .collect();
        let xs: Vec<f64> = idx.iter().map(|&i| batch.state_at(i, k)).collect();
        let ws: Vec<f64> = idx.iter().map(|&i| batch.weights[i]).collect();
        let ydb: Vec<f64> = idx
            .iter()
            .zip(&tilde)
            .map(|(&i, v)| v * batch.increment(i, k))
            .collect();
        let reg = Regressor::new(config.basis, &xs, &ws);
        let fits = reg.fit(&xs, &ws, &[&tilde, &ydb], config.ridge)?;
        let mut next = y.clone();
        let updates: Vec<(usize, f64)> = idx
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut buf = Vec::new();
                let x = xs[j];
                let c = reg.predict(&fits[0], x, &mut buf);
                let z = reg.predict(&fits[1], x, &mut buf) / batch.increment_variance;
                let drift = problem.driver.as_ref().map_or(0.0, |f| f(t, x, c, z)) * dt;
                let a = c + drift;
                let r = problem.reflect(a, t, x, dt);
                (i, tilde[j] + drift + (r - a))
            })
            .collect();
        for (i, v) in updates {
            next[i] = v;
        }
        y = next;
        if config.surface {
            surface.push(surface_row(batch, k, &y, &alive));
        }
    }
    let ws = &batch.weights;
    let (value, se) = weighted_stats(&y, ws);
    let std_error = if config.bootstrap_reps > 0 {
        bootstrap_se(&y, config.bootstrap_reps, batch.seed)
    } else {
        se
    };
    surface.reverse();
    Ok(MCEstimate {
        value,
        std_error,
        n_paths: np,
        surface: config.surface.then_some(surface),
    })
}

fn surface_row(batch: &PathBatch, k: usize, y: &[f64], alive: &dyn Fn(usize, usize) -> bool) -> SurfaceRow {
    let (vals, ws): (Vec<f64>, Vec<f64>) = (0..batch.n_paths)
        .filter(|&i| alive(i, k))
        .map(|i| (y[i], batch.weights[i]))
        .unzip();
    if vals.is_empty() {
        return SurfaceRow {
            step: k,
            y_mean: f64::NAN,
            std_error: f64::NAN,
            alive_paths: 0,
        };
    }
    let (y_mean, std_error) = weighted_stats(&vals, &ws);
    SurfaceRow {
        step: k,
        y_mean,
        std_error,
        alive_paths: vals.len(),
    }
}

/// Black–Scholes call price with total variance `∫σ²dt` and rate `r`.
pub fn bs_call_price(s0: f64, strike: f64, r: f64, total_variance: f64, horizon: f64) -> f64 {
    let disc = (-r * horizon).exp();
    if strike <= 0.0 {
        return s0;
    }
    let sd = total_variance.sqrt();
    let d1 = ((s0 / strike).ln() + r * horizon + 0.5 * total_variance) / sd;
    let d2 = d1 - sd;
    let nrm = Normal::standard();
    s0 * nrm.cdf(d1) - strike * disc * nrm.cdf(d2)
}

/// Inputs of the Black–Scholes example.
#[derive(Clone)]
pub struct BsConfig {
    pub r: TimeFn,
    pub mu: TimeFn,
    pub sigma: TimeFn,
    pub sigma_min: f64,
    pub strike: f64,
    pub s0: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub intensity: Option<CoxIntensity>,
    /// Paid at default; zero when absent.
    pub recovery: Option<StateFn>,
    pub barriers: Option<(StateFn, StateFn)>,
    pub basis: RegressionBasis,
}

impl BsConfig {
    /// Constant coefficients.
    pub fn constant(r: f64, mu: f64, sigma: f64, s0: f64, strike: f64, horizon: f64) -> Self {
        Self {
            r: time_fn(move |_| r),
            mu: time_fn(move |_| mu),
            sigma: time_fn(move |_| sigma),
            sigma_min: 1e-3,
            strike,
            s0,
            horizon,
            n_steps: 20,
            n_paths: 100_000,
            seed: 1,
            intensity: None,
            recovery: None,
            barriers: None,
            basis: RegressionBasis::Polynomial(3),
        }
    }
}

/// Simulates `S` and solves the linear-driver equation
/// `f(t, y, z) = -r_t y - θ_t z` with `θ = (μ - r)/σ` for `(S_T - K)⁺`.
pub fn black_scholes_example(config: &BsConfig) -> Result<MCEstimate> {
    let model = McModel {
        n_steps: config.n_steps,
        horizon: config.horizon,
        increments: Increments::Gaussian,
        asset: Some(AssetModel {
            s0: config.s0,
            mu: config.mu.clone(),
            sigma: config.sigma.clone(),
            sigma_min: config.sigma_min,
        }),
    };
    let mut batch = simulate_paths(&model, config.n_paths, config.seed)?;
    if let Some(c) = &config.intensity {
        batch = apply_cox_default(&batch, c);
    }
    let strike = config.strike;
    let horizon = config.horizon;
    let recovery = config.recovery.clone();
    let terminal = state_fn(move |t, s| {
        if t >= horizon - 1e-12 {
            (s - strike).max(0.0)
        } else {
            recovery.as_ref().map_or(0.0, |f| f(t, s))
        }
    });
    let (r, mu, sigma) = (config.r.clone(), config.mu.clone(), config.sigma.clone());
    let mut problem = McProblem::bsde(terminal).with_driver(move |t, _s, y, z| {
        let (rt, st) = (r(t), sigma(t));
        -rt * y - (mu(t) - rt) / st * z
    });
    if let Some((l, u)) = &config.barriers {
        problem = problem.with_barriers(Some(l.clone()), Some(u.clone()));
    }
    lsmc_solve_drbsde(&batch, &problem, &LsmcConfig::new(config.basis))
}
