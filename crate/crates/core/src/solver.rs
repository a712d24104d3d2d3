//! Backward-induction solvers on the enlarged tree: classical BSDE, doubly
//! reflected BSDE, penalized approximations, comparison checks and the
//! weighted norms of the a priori estimate.
//!
//! Scheme at an alive node `(k, prefix)` with `k < N`:
//! `P_k = E_Q[Y_{k+1} | G_k]`, `Z_k = E_Q[Y_{k+1} ΔB | G_k] / E_Q[ΔB² | G_k]`,
//! `a = P_k + f(t_k, P_k, Z_k) Δ`, `Y_k = clamp(a, L_k, U_k)`.
//! The clamp amounts are the increments `ΔK±_{k+1}` (predictable: decided at
//! step k, booked on the edge to k + 1). `M_0 = 0` and
//! `ΔM_{k+1} = Y_{k+1} - P_k - Z_k ΔB_{k+1}`. Defaulted nodes and the horizon
//! carry `Y = ξ` with all increments zero.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filtration::{
    atom_g_index, martingale_residual, orthogonality_residual, prefix_mask, split_g_index,
    AdaptedProcess, LatticeModel, Measure, TreeKind,
};

/// `f(k, prefix, y, z)` for drivers given as closures.
pub type DriverFn = Arc<dyn Fn(usize, usize, f64, f64) -> f64 + Send + Sync>;

/// Default lower bound on `α² = κ + γ²`.
pub const DEFAULT_EPSILON: f64 = 1.0;

/// Values probed by the Lipschitz certificate of general drivers.
pub const CERTIFICATE_GRID: [f64; 7] = [-10.0, -1.0, -0.1, 0.0, 0.1, 1.0, 10.0];

#[derive(Clone)]
pub enum DriverKind {
    Zero,
    /// `f = g_k`, independent of `(y, z)`.
    Generator(AdaptedProcess),
    /// `f = -r_k y - θ_k z + g_k`.
    Linear {
        r: AdaptedProcess,
        theta: AdaptedProcess,
        g: Option<AdaptedProcess>,
    },
    General(DriverFn),
}

impl std::fmt::Debug for DriverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DriverKind::Zero => write!(f, "Zero"),
            DriverKind::Generator(_) => write!(f, "Generator"),
            DriverKind::Linear { .. } => write!(f, "Linear"),
            DriverKind::General(_) => write!(f, "General"),
        }
    }
}

/// A driver with its stochastic Lipschitz moduli.
///
/// `lipschitz_kappa` / `lipschitz_gamma` are the declared moduli; `kappa` and
/// `gamma` are the floored versions with `κ + γ² ≥ ε` used for weights.
#[derive(Clone, Debug)]
pub struct DriverSpec {
    pub kind: DriverKind,
    pub lipschitz_kappa: AdaptedProcess,
    pub lipschitz_gamma: AdaptedProcess,
    pub kappa: AdaptedProcess,
    pub gamma: AdaptedProcess,
    pub epsilon: f64,
    pub alpha_sq: AdaptedProcess,
}

impl DriverSpec {
    fn assemble(
        kind: DriverKind,
        kappa: AdaptedProcess,
        gamma: AdaptedProcess,
        epsilon: f64,
    ) -> Self {
        let floored = kappa.zip_with(&gamma, |k, g| k.max(epsilon - g * g));
        let alpha_sq = floored.zip_with(&gamma, |k, g| k + g * g);
        Self {
            kind,
            lipschitz_kappa: kappa,
            lipschitz_gamma: gamma.clone(),
            kappa: floored,
            gamma,
            epsilon,
            alpha_sq,
        }
    }

    pub fn zero(n_steps: usize) -> Self {
        let z = AdaptedProcess::zeros(TreeKind::F, n_steps);
        Self::assemble(DriverKind::Zero, z.clone(), z, DEFAULT_EPSILON)
    }

    pub fn generator(g: AdaptedProcess) -> Self {
        let z = AdaptedProcess::zeros(TreeKind::F, g.n_steps());
        Self::assemble(DriverKind::Generator(g), z.clone(), z, DEFAULT_EPSILON)
    }

    pub fn linear(r: AdaptedProcess, theta: AdaptedProcess, g: Option<AdaptedProcess>) -> Self {
        let kappa = r.map(f64::abs);
        let gamma = theta.map(f64::abs);
        Self::assemble(DriverKind::Linear { r, theta, g }, kappa, gamma, DEFAULT_EPSILON)
    }

    pub fn linear_constant(n_steps: usize, r: f64, theta: f64) -> Self {
        Self::linear(
            AdaptedProcess::constant(TreeKind::F, n_steps, r),
            AdaptedProcess::constant(TreeKind::F, n_steps, theta),
            None,
        )
    }

    /// General driver; the declared moduli are certified on a sample grid.
    pub fn general(
        model: &LatticeModel,
        f: DriverFn,
        kappa: AdaptedProcess,
        gamma: AdaptedProcess,
    ) -> Result<Self> {
        let spec = Self::assemble(DriverKind::General(f), kappa, gamma, DEFAULT_EPSILON);
        spec.certify(model, &CERTIFICATE_GRID)?;
        Ok(spec)
    }

    pub fn with_epsilon(self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Driver(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self::assemble(self.kind, self.lipschitz_kappa, self.lipschitz_gamma, epsilon))
    }

    pub fn n_steps(&self) -> usize {
        self.alpha_sq.n_steps()
    }

    #[inline]
    pub fn eval(&self, k: usize, prefix: usize, y: f64, z: f64) -> f64 {
        match &self.kind {
            DriverKind::Zero => 0.0,
            DriverKind::Generator(g) => g.at(k, prefix),
            DriverKind::Linear { r, theta, g } => {
                let base = -r.at(k, prefix) * y - theta.at(k, prefix) * z;
                match g {
                    Some(g) => base + g.at(k, prefix),
                    None => base,
                }
            }
            DriverKind::General(f) => f(k, prefix, y, z),
        }
    }

    /// `Some(g_k)` when the driver does not depend on `(y, z)`.
    pub fn generator_value(&self, k: usize, prefix: usize) -> Option<f64> {
        match &self.kind {
            DriverKind::Zero => Some(0.0),
            DriverKind::Generator(g) => Some(g.at(k, prefix)),
            _ => None,
        }
    }

    pub fn is_yz_free(&self) -> bool {
        matches!(self.kind, DriverKind::Zero | DriverKind::Generator(_))
    }

    /// Samples `|f(y,z) - f(y',z')| ≤ κ|y-y'| + γ|z-z'|` over `grid²` pairs
    /// at every F-node before the horizon.
    pub fn certify(&self, model: &LatticeModel, grid: &[f64]) -> Result<()> {
        for k in 0..model.n_steps {
            for prefix in 0..1usize << k {
                let kap = self.lipschitz_kappa.at(k, prefix);
                let gam = self.lipschitz_gamma.at(k, prefix);
                if kap < 0.0 || gam < 0.0 {
                    return Err(Error::Driver(format!(
                        "negative Lipschitz modulus at step {k}, prefix {prefix}"
                    )));
                }
                for &y1 in grid {
                    for &z1 in grid {
                        let f1 = self.eval(k, prefix, y1, z1);
                        for &y2 in grid {
                            for &z2 in grid {
                                let f2 = self.eval(k, prefix, y2, z2);
                                let bound = kap * (y1 - y2).abs() + gam * (z1 - z2).abs();
                                if (f1 - f2).abs() > bound * (1.0 + 1e-12) + 1e-12 {
                                    return Err(Error::Driver(format!(
                                        "Lipschitz certificate fails at step {k}, prefix {prefix}: \
                                         |f({y1},{z1}) - f({y2},{z2})| = {} > {bound}",
                                        (f1 - f2).abs()
                                    )));
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Warnings for nodes where the explicit step is not contractive.
    pub fn stability_warnings(&self, model: &LatticeModel) -> Vec<String> {
        let mut worst = 0.0f64;
        for k in 0..model.n_steps {
            for prefix in 0..1usize << k {
                worst = worst.max(self.lipschitz_kappa.at(k, prefix) * model.dt);
            }
        }
        if worst >= 1.0 {
            vec![format!("stability: max Δκ = {worst} ≥ 1 for the explicit scheme")]
        } else {
            Vec::new()
        }
    }

    /// Whether the one-step operator is monotone in the successor values:
    /// `κΔ + γ Δ max|ΔB| / Var(ΔB) ≤ 1` at every node.
    pub fn is_monotone(&self, model: &LatticeModel) -> bool {
        let ratio = model.dt * model.max_abs_move() / model.step_variance();
        (0..model.n_steps).all(|k| {
            (0..1usize << k).all(|p| {
                self.lipschitz_kappa.at(k, p) * model.dt + self.lipschitz_gamma.at(k, p) * ratio
                    <= 1.0 + 1e-12
            })
        })
    }

    /// `𝒜_k = Σ_{j<k} α²_j Δ`.
    pub fn accumulated(&self, model: &LatticeModel) -> AdaptedProcess {
        let mut a = AdaptedProcess::zeros(TreeKind::F, model.n_steps);
        for k in 1..=model.n_steps {
            for prefix in 0..1usize << k {
                let parent = prefix & prefix_mask(k - 1);
                let v = a.at(k - 1, parent) + self.alpha_sq.at(k - 1, parent) * model.dt;
                a.set(k, prefix, v);
            }
        }
        a
    }
}

/// Terminal data: `survival` is read at the horizon on alive paths,
/// `recovery` at the default step. `ξ = ζ_{T∧τ}` uses the same process for both.
#[derive(Clone, Debug, PartialEq)]
pub struct Terminal {
    pub survival: AdaptedProcess,
    pub recovery: AdaptedProcess,
}

impl Terminal {
    pub fn from_zeta(zeta: AdaptedProcess) -> Self {
        Self {
            survival: zeta.clone(),
            recovery: zeta,
        }
    }

    pub fn split(survival: AdaptedProcess, recovery: AdaptedProcess) -> Self {
        Self { survival, recovery }
    }

    /// `ξ` at a stopping node: defaulted nodes use the recovery, alive
    /// nodes the survival value.
    pub fn value(&self, k: usize, prefix: usize, status: usize) -> f64 {
        if status == 0 {
            self.survival.at(k, prefix & prefix_mask(k))
        } else {
            self.recovery.at(status, prefix & prefix_mask(status))
        }
    }
}

/// Data of a doubly reflected BSDE on the enlarged tree.
#[derive(Clone, Debug)]
pub struct DRBSDEProblem {
    pub terminal: Terminal,
    pub driver: DriverSpec,
    pub lower_f: Option<AdaptedProcess>,
    pub upper_f: Option<AdaptedProcess>,
    lower: Option<AdaptedProcess>,
    upper: Option<AdaptedProcess>,
    pub beta: f64,
    pub measure: Arc<Measure>,
}

const SEPARATION_TOL: f64 = 1e-12;

impl DRBSDEProblem {
    /// Validates shapes and the barrier hypotheses; barriers are F-processes
    /// lifted to the G-tree and frozen at default.
    pub fn new(
        measure: Arc<Measure>,
        terminal: Terminal,
        driver: DriverSpec,
        lower_f: Option<AdaptedProcess>,
        upper_f: Option<AdaptedProcess>,
        beta: f64,
    ) -> Result<Self> {
        let n = measure.model().n_steps;
        let f_procs = [
            Some(&terminal.survival),
            Some(&terminal.recovery),
            lower_f.as_ref(),
            upper_f.as_ref(),
            Some(&driver.alpha_sq),
        ];
        for p in f_procs.into_iter().flatten() {
            if p.kind() != TreeKind::F || p.n_steps() != n {
                return Err(Error::Shape(format!(
                    "expected F-processes with {n} steps"
                )));
            }
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be nonnegative, got {beta}")));
        }
        let lower = lower_f.as_ref().map(AdaptedProcess::lift_stopped);
        let upper = upper_f.as_ref().map(AdaptedProcess::lift_stopped);
        let problem = Self {
            terminal,
            driver,
            lower_f,
            upper_f,
            lower,
            upper,
            beta,
            measure,
        };
        problem.validate()?;
        Ok(problem)
    }

    /// Problem without barriers.
    pub fn bsde(measure: Arc<Measure>, terminal: Terminal, driver: DriverSpec) -> Result<Self> {
        Self::new(measure, terminal, driver, None, None, 4.0)
    }

    pub fn model(&self) -> &LatticeModel {
        self.measure.model()
    }

    pub fn lower(&self) -> Option<&AdaptedProcess> {
        self.lower.as_ref()
    }

    pub fn upper(&self) -> Option<&AdaptedProcess> {
        self.upper.as_ref()
    }

    /// Same data with the barriers removed.
    pub fn without_barriers(&self) -> Self {
        Self {
            lower_f: None,
            upper_f: None,
            lower: None,
            upper: None,
            ..self.clone()
        }
    }

    /// Same data with the measure replaced.
    pub fn with_measure(&self, measure: Arc<Measure>) -> Self {
        Self {
            measure,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.model().n_steps;
        let m = &self.measure;
        for k in 0..=n {
            for (i, &mass) in m.g_masses(k).iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                let (prefix, status) = split_g_index(k, i);
                let l = self.lower.as_ref().map(|p| p.at(k, i));
                let u = self.upper.as_ref().map(|p| p.at(k, i));
                let stopping = status == k && k > 0 || (status == 0 && k == n);
                if status == 0 && k < n {
                    if let (Some(l), Some(u)) = (l, u) {
                        if !(u - l > SEPARATION_TOL) {
                            return Err(Error::Hypothesis {
                                name: "H3",
                                detail: format!(
                                    "barriers not separated at step {k}, prefix {prefix}: L = {l}, U = {u}"
                                ),
                            });
                        }
                    }
                }
                if stopping {
                    let xi = self.terminal.value(k, prefix, status);
                    if l.is_some_and(|l| xi < l) || u.is_some_and(|u| xi > u) {
                        return Err(Error::Hypothesis {
                            name: "H1",
                            detail: format!(
                                "terminal value {xi} outside [L, U] at step {k}, prefix {prefix}, status {status}"
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Output of a tree solve. On the G-tree all processes are G-processes; the
/// F-tree solver in `links` reuses the type with F-processes.
#[derive(Clone, Debug, PartialEq)]
pub struct DRBSDESolution {
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
    pub k_plus: AdaptedProcess,
    pub k_minus: AdaptedProcess,
    pub m: AdaptedProcess,
    /// `P_k = E_Q[Y_{k+1} | G_k]` (equal to `Y` where the solution is stopped).
    pub predictor: AdaptedProcess,
    /// `ΔK⁺_{k+1}` stored at node k.
    pub push_plus: AdaptedProcess,
    /// `ΔK⁻_{k+1}` stored at node k.
    pub push_minus: AdaptedProcess,
    pub warnings: Vec<String>,
}

impl DRBSDESolution {
    pub fn y0(&self) -> f64 {
        self.y.at(0, 0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NodeOrder {
    #[default]
    Forward,
    Reverse,
    Shuffled(u64),
    Parallel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolverConfig {
    /// Extra fixed-point sweeps `a ← P + f(a, Z) Δ`.
    pub implicit_iters: usize,
    pub order: NodeOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyMode {
    Lower,
    Upper,
    Double,
}

#[derive(Clone, Copy, Debug)]
enum Reflect {
    None,
    Clamp,
    Penalty { n: f64, mode: PenaltyMode },
}

#[derive(Clone, Copy, Debug)]
struct NodeOut {
    y: f64,
    z: f64,
    pred: f64,
    push_plus: f64,
    push_minus: f64,
}

fn node_step(
    problem: &DRBSDEProblem,
    reflect: Reflect,
    iters: usize,
    k: usize,
    index: usize,
    y_next: &[f64],
) -> Result<NodeOut> {
    let model = problem.model();
    let (prefix, status) = split_g_index(k, index);
    if status != 0 {
        let xi = problem.terminal.value(k, prefix, status);
        return Ok(NodeOut {
            y: xi,
            z: 0.0,
            pred: xi,
            push_plus: 0.0,
            push_minus: 0.0,
        });
    }
    let ch = problem.measure.children(k, prefix, 0);
    let pred = ch.mean(|c| y_next[c.index]);
    let z = ch.mean(|c| (y_next[c.index] - pred) * c.db) / ch.mean(|c| c.db * c.db);
    let dt = model.dt;
    let mut a = pred + problem.driver.eval(k, prefix, pred, z) * dt;
    for _ in 0..iters {
        a = pred + problem.driver.eval(k, prefix, a, z) * dt;
    }
    let lower = problem.lower.as_ref().map(|p| p.at(k, index));
    let upper = problem.upper.as_ref().map(|p| p.at(k, index));
    let (y, push_plus, push_minus) = match reflect {
        Reflect::None => (a, 0.0, 0.0),
        Reflect::Clamp => match (lower, upper) {
            (Some(l), _) if a < l => (l, l - a, 0.0),
            (_, Some(u)) if a > u => (u, 0.0, a - u),
            _ => (a, 0.0, 0.0),
        },
        Reflect::Penalty { n, mode } => {
            let nd = n * dt;
            let use_lower = matches!(mode, PenaltyMode::Lower | PenaltyMode::Double);
            let use_upper = matches!(mode, PenaltyMode::Upper | PenaltyMode::Double);
            let out = match (lower, upper) {
                (Some(l), _) if use_lower && a < l => {
                    let y = (a + nd * l) / (1.0 + nd);
                    (y, nd * (l - y), 0.0)
                }
                (_, Some(u)) if use_upper && a > u => {
                    let y = (a + nd * u) / (1.0 + nd);
                    (y, 0.0, nd * (y - u))
                }
                _ => (a, 0.0, 0.0),
            };
            if !(out.0.is_finite() && out.1.is_finite() && out.2.is_finite()) {
                return Err(Error::NumericRange {
                    step: k,
                    index,
                    detail: format!("penalty level {n} overflows"),
                });
            }
            out
        }
    };
    if !y.is_finite() {
        return Err(Error::NumericRange {
            step: k,
            index,
            detail: format!("non-finite value {y}"),
        });
    }
    Ok(NodeOut {
        y,
        z,
        pred,
        push_plus,
        push_minus,
    })
}

fn node_order(count: usize, order: NodeOrder, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..count).collect();
    match order {
        NodeOrder::Forward | NodeOrder::Parallel => {}
        NodeOrder::Reverse => idx.reverse(),
        NodeOrder::Shuffled(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9));
            idx.shuffle(&mut rng);
        }
    }
    idx
}

fn solve_with(
    problem: &DRBSDEProblem,
    reflect: Reflect,
    config: &SolverConfig,
) -> Result<DRBSDESolution> {
    let model = *problem.model();
    let n = model.n_steps;
    let measure = &problem.measure;
    let mut y = AdaptedProcess::zeros(TreeKind::G, n);
    let mut z = AdaptedProcess::zeros(TreeKind::G, n);
    let mut pred = AdaptedProcess::zeros(TreeKind::G, n);
    let mut pp = AdaptedProcess::zeros(TreeKind::G, n);
    let mut pm = AdaptedProcess::zeros(TreeKind::G, n);

    for i in 0..y.step(n).len() {
        let (prefix, status) = split_g_index(n, i);
        let xi = problem.terminal.value(n, prefix, status);
        y.set(n, i, xi);
        pred.set(n, i, xi);
    }

    for k in (0..n).rev() {
        let y_next = y.step(k + 1).to_vec();
        let masses = measure.g_masses(k);
        let order = node_order(masses.len(), config.order, k);
        let outs: Vec<(usize, NodeOut)> = if config.order == NodeOrder::Parallel {
            order
                .par_iter()
                .filter(|&&i| masses[i] > 0.0 || split_g_index(k, i).1 != 0)
                .map(|&i| node_step(problem, reflect, config.implicit_iters, k, i, &y_next).map(|o| (i, o)))
                .collect::<Result<Vec<_>>>()?
        } else {
            let mut v = Vec::with_capacity(order.len());
            for &i in &order {
                if masses[i] > 0.0 || split_g_index(k, i).1 != 0 {
                    v.push((i, node_step(problem, reflect, config.implicit_iters, k, i, &y_next)?));
                }
            }
            v
        };
        for (i, o) in outs {
            y.set(k, i, o.y);
            z.set(k, i, o.z);
            pred.set(k, i, o.pred);
            pp.set(k, i, o.push_plus);
            pm.set(k, i, o.push_minus);
        }
    }

    let mut k_plus = AdaptedProcess::zeros(TreeKind::G, n);
    let mut k_minus = AdaptedProcess::zeros(TreeKind::G, n);
    let mut m = AdaptedProcess::zeros(TreeKind::G, n);
    for k in 0..n {
        for (i, &mass) in measure.g_masses(k).iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let (prefix, status) = split_g_index(k, i);
            let ch = measure.children(k, prefix, status);
            for c in ch.iter() {
                k_plus.set(k + 1, c.index, k_plus.at(k, i) + pp.at(k, i));
                k_minus.set(k + 1, c.index, k_minus.at(k, i) + pm.at(k, i));
                let dm = if status == 0 {
                    y.at(k + 1, c.index) - pred.at(k, i) - z.at(k, i) * c.db
                } else {
                    0.0
                };
                m.set(k + 1, c.index, m.at(k, i) + dm);
            }
        }
    }

    let mut warnings = problem.driver.stability_warnings(&model);
    if let DriverKind::General(_) = problem.driver.kind {
        if let Err(e) = problem.driver.certify(&model, &CERTIFICATE_GRID) {
            return Err(e);
        }
    }
    if !problem.driver.is_monotone(&model) {
        warnings.push("comparison: one-step operator is not monotone on this grid".into());
    }
    Ok(DRBSDESolution {
        y,
        z,
        k_plus,
        k_minus,
        m,
        predictor: pred,
        push_plus: pp,
        push_minus: pm,
        warnings,
    })
}

/// Classical BSDE; barriers, if any, are ignored.
pub fn solve_bsde(problem: &DRBSDEProblem) -> Result<DRBSDESolution> {
    solve_with(problem, Reflect::None, &SolverConfig::default())
}

pub fn solve_drbsde(problem: &DRBSDEProblem) -> Result<DRBSDESolution> {
    solve_drbsde_with(problem, &SolverConfig::default())
}

pub fn solve_drbsde_with(problem: &DRBSDEProblem, config: &SolverConfig) -> Result<DRBSDESolution> {
    solve_with(problem, Reflect::Clamp, config)
}

/// Penalized recursion. The penalty is taken implicitly, the driver
/// explicitly: with `a = P + f Δ`, `y = (a + nΔL) / (1 + nΔ)` when `a < L`.
/// `k_plus` / `k_minus` hold `K^{n,±} = Σ n (·)⁺ Δ`.
pub fn solve_penalized(
    problem: &DRBSDEProblem,
    n: f64,
    mode: PenaltyMode,
) -> Result<DRBSDESolution> {
    if !(n >= 0.0) {
        return Err(Error::Config(format!("penalty level must be nonnegative, got {n}")));
    }
    if !n.is_finite() || !(n * problem.model().dt).is_finite() {
        return Err(Error::NumericRange {
            step: 0,
            index: 0,
            detail: format!("penalty level {n} is out of range"),
        });
    }
    solve_with(problem, Reflect::Penalty { n, mode }, &SolverConfig::default())
}

/// Largest deviations from the defining properties of a solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolutionCheck {
    pub skorokhod_plus: f64,
    pub skorokhod_minus: f64,
    pub barrier_violation: f64,
    pub balance: f64,
    pub terminal: f64,
    pub k_nondecreasing: bool,
    pub m_martingale: f64,
    pub orthogonality: f64,
}

pub fn check_solution(sol: &DRBSDESolution, problem: &DRBSDEProblem) -> SolutionCheck {
    let n = problem.model().n_steps;
    let dt = problem.model().dt;
    let measure = &problem.measure;
    let mut out = SolutionCheck {
        skorokhod_plus: 0.0,
        skorokhod_minus: 0.0,
        barrier_violation: 0.0,
        balance: 0.0,
        terminal: 0.0,
        k_nondecreasing: true,
        m_martingale: martingale_residual(&sol.m, measure),
        orthogonality: orthogonality_residual(&sol.m, measure),
    };
    for k in 0..=n {
        for (i, &mass) in measure.g_masses(k).iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let (prefix, status) = split_g_index(k, i);
            let y = sol.y.at(k, i);
            if status != 0 || k == n {
                out.terminal = out
                    .terminal
                    .max((y - problem.terminal.value(k, prefix, status)).abs());
                continue;
            }
            let pp = sol.push_plus.at(k, i);
            let pm = sol.push_minus.at(k, i);
            if pp < 0.0 || pm < 0.0 {
                out.k_nondecreasing = false;
            }
            if let Some(l) = problem.lower() {
                let l = l.at(k, i);
                out.skorokhod_plus = out.skorokhod_plus.max((pp * (y - l)).abs());
                out.barrier_violation = out.barrier_violation.max(l - y);
            }
            if let Some(u) = problem.upper() {
                let u = u.at(k, i);
                out.skorokhod_minus = out.skorokhod_minus.max((pm * (u - y)).abs());
                out.barrier_violation = out.barrier_violation.max(y - u);
            }
            let p = sol.predictor.at(k, i);
            let f = problem.driver.eval(k, prefix, p, sol.z.at(k, i));
            out.balance = out.balance.max((y - (p + f * dt + pp - pm)).abs());
        }
    }
    out
}

/// Result of [`check_comparison`].
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub hypotheses_hold: bool,
    pub hypothesis_issues: Vec<String>,
    /// `(step, node, Y¹ - Y²)` for every violating node.
    pub violations: Vec<(usize, usize, f64)>,
    pub max_violation: f64,
    pub nodes_checked: usize,
    /// Whether `K^{2,+} - K^{1,+}` and `K^{1,-} - K^{2,-}` never decrease.
    pub k_difference_increasing: bool,
}

const COMPARISON_TOL: f64 = 1e-12;

/// Checks `Y¹ ≤ Y²` node-wise and records which hypotheses hold.
pub fn check_comparison(
    sol1: &DRBSDESolution,
    sol2: &DRBSDESolution,
    data1: &DRBSDEProblem,
    data2: &DRBSDEProblem,
) -> ComparisonReport {
    let model = *data1.model();
    let n = model.n_steps;
    let measure = &data1.measure;
    let mut issues = Vec::new();
    if data2.measure.weights() != measure.weights() {
        issues.push("measures differ".to_string());
    }
    if !data2.driver.is_monotone(&model) {
        issues.push("second driver gives a non-monotone one-step operator".to_string());
    }
    match (data1.lower(), data2.lower()) {
        (Some(_), None) => issues.push("L¹ present but L² absent".to_string()),
        (Some(a), Some(b)) if !le_on_support(a, b, measure) => {
            issues.push("L¹ ≤ L² fails".to_string())
        }
        _ => {}
    }
    match (data1.upper(), data2.upper()) {
        (None, Some(_)) => issues.push("U² present but U¹ absent".to_string()),
        (Some(a), Some(b)) if !le_on_support(a, b, measure) => {
            issues.push("U¹ ≤ U² fails".to_string())
        }
        _ => {}
    }
    let mut xi_ok = true;
    let mut f_ok = true;
    let mut violations = Vec::new();
    let mut max_violation = 0.0f64;
    let mut nodes = 0;
    let mut k_diff = true;
    let scale = 1.0f64.max(sol1.y.max_abs()).max(sol2.y.max_abs());
    for k in 0..=n {
        for (i, &mass) in measure.g_masses(k).iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let (prefix, status) = split_g_index(k, i);
            nodes += 1;
            let stopping = (status != 0 && status == k) || (status == 0 && k == n);
            if stopping
                && data1.terminal.value(k, prefix, status)
                    > data2.terminal.value(k, prefix, status)
            {
                xi_ok = false;
            }
            if status == 0 && k < n {
                let p = sol1.predictor.at(k, i);
                let z = sol1.z.at(k, i);
                if data1.driver.eval(k, prefix, p, z)
                    > data2.driver.eval(k, prefix, p, z) + COMPARISON_TOL * scale
                {
                    f_ok = false;
                }
                if sol2.push_plus.at(k, i) < sol1.push_plus.at(k, i)
                    || sol1.push_minus.at(k, i) < sol2.push_minus.at(k, i)
                {
                    k_diff = false;
                }
            }
            let d = sol1.y.at(k, i) - sol2.y.at(k, i);
            if d > COMPARISON_TOL * scale {
                violations.push((k, i, d));
            }
            max_violation = max_violation.max(d);
        }
    }
    if !xi_ok {
        issues.push("ξ¹ ≤ ξ² fails".to_string());
    }
    if !f_ok {
        issues.push("f¹ ≤ f² fails along the first solution".to_string());
    }
    ComparisonReport {
        hypotheses_hold: issues.is_empty(),
        hypothesis_issues: issues,
        violations,
        max_violation: max_violation.max(0.0),
        nodes_checked: nodes,
        k_difference_increasing: k_diff,
    }
}

fn le_on_support(a: &AdaptedProcess, b: &AdaptedProcess, measure: &Measure) -> bool {
    (0..=a.n_steps()).all(|k| {
        measure
            .g_masses(k)
            .iter()
            .enumerate()
            .all(|(i, &w)| w == 0.0 || a.at(k, i) <= b.at(k, i))
    })
}

/// Squared weighted norms of a solution (or of a difference of solutions).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NormReport {
    /// `E_Q[max_{k ≤ T∧τ} e^{β𝒜_k} Y_k²]`
    pub y_s2: f64,
    /// `E_Q[Σ_{k < T∧τ} e^{β𝒜_k} α²_k Y_k² Δ]`
    pub y_alpha: f64,
    /// `E_Q[Σ_{k < T∧τ} e^{β𝒜_k} Z_k² Δ]`
    pub z_h2: f64,
    /// `E_Q[Σ_{k < T∧τ} e^{β𝒜_{k+1}} ΔM²_{k+1}]`
    pub m_m2: f64,
    /// `E_Q[(K⁺_{T∧τ})²]`
    pub k_plus_sq: f64,
    /// `E_Q[(K⁻_{T∧τ})²]`
    pub k_minus_sq: f64,
}

impl NormReport {
    /// Left side of the a priori estimate.
    pub fn estimate_lhs(&self) -> f64 {
        self.y_s2 + self.y_alpha + self.z_h2 + self.m_m2
    }
}

struct NormInputs<'a> {
    y: &'a AdaptedProcess,
    z: &'a AdaptedProcess,
    m: &'a AdaptedProcess,
    k_plus: &'a AdaptedProcess,
    k_minus: &'a AdaptedProcess,
}

fn norms_of(inp: NormInputs<'_>, problem: &DRBSDEProblem) -> NormReport {
    let model = *problem.model();
    let n = model.n_steps;
    let dt = model.dt;
    let acc = problem.driver.accumulated(&model);
    let beta = problem.beta;
    let mut out = NormReport::default();
    for path in 0..model.n_paths() {
        for o in 0..=n {
            let w = problem.measure.weight(path, o);
            if w == 0.0 {
                continue;
            }
            let stop = if o == 0 { n } else { o };
            let mut sup = 0.0f64;
            let mut ya = 0.0;
            let mut zh = 0.0;
            let mut mm = 0.0;
            for k in 0..=stop {
                let pf = path & prefix_mask(k);
                let wt = (beta * acc.at(k, pf)).exp();
                let gi = atom_g_index(k, path, o);
                let y = inp.y.at(k, gi);
                sup = sup.max(wt * y * y);
                if k < stop {
                    ya += wt * problem.driver.alpha_sq.at(k, pf) * y * y * dt;
                    let z = inp.z.at(k, gi);
                    zh += wt * z * z * dt;
                    let gn = atom_g_index(k + 1, path, o);
                    let dm = inp.m.at(k + 1, gn) - inp.m.at(k, gi);
                    let wn = (beta * acc.at(k + 1, path & prefix_mask(k + 1))).exp();
                    mm += wn * dm * dm;
                }
            }
            let ge = atom_g_index(stop, path, o);
            out.y_s2 += w * sup;
            out.y_alpha += w * ya;
            out.z_h2 += w * zh;
            out.m_m2 += w * mm;
            out.k_plus_sq += w * inp.k_plus.at(stop, ge).powi(2);
            out.k_minus_sq += w * inp.k_minus.at(stop, ge).powi(2);
        }
    }
    out
}

/// Weighted norms with `β` and `α` taken from the problem.
pub fn weighted_norms(sol: &DRBSDESolution, problem: &DRBSDEProblem) -> NormReport {
    norms_of(
        NormInputs {
            y: &sol.y,
            z: &sol.z,
            m: &sol.m,
            k_plus: &sol.k_plus,
            k_minus: &sol.k_minus,
        },
        problem,
    )
}

/// Both sides of the a priori estimate for two data sets and the ratio
/// `c = lhs / rhs`. Weights use the first data set's `α` and `β`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AprioriReport {
    pub lhs: f64,
    pub rhs: f64,
    pub c: f64,
    pub xi_term: f64,
    pub driver_term: f64,
    pub barrier_term: f64,
    pub norms: NormReport,
}

pub fn apriori_estimate(
    sol1: &DRBSDESolution,
    data1: &DRBSDEProblem,
    sol2: &DRBSDESolution,
    data2: &DRBSDEProblem,
) -> AprioriReport {
    let sub = |a: &AdaptedProcess, b: &AdaptedProcess| a.zip_with(b, |x, y| x - y);
    let (dy, dz, dm, dkp, dkm) = (
        sub(&sol1.y, &sol2.y),
        sub(&sol1.z, &sol2.z),
        sub(&sol1.m, &sol2.m),
        sub(&sol1.k_plus, &sol2.k_plus),
        sub(&sol1.k_minus, &sol2.k_minus),
    );
    let norms = norms_of(
        NormInputs {
            y: &dy,
            z: &dz,
            m: &dm,
            k_plus: &dkp,
            k_minus: &dkm,
        },
        data1,
    );
    let model = *data1.model();
    let n = model.n_steps;
    let dt = model.dt;
    let acc = data1.driver.accumulated(&model);
    let beta = data1.beta;
    let (mut xi_term, mut driver_term, mut barrier_term) = (0.0, 0.0, 0.0);
    for path in 0..model.n_paths() {
        for o in 0..=n {
            let w = data1.measure.weight(path, o);
            if w == 0.0 {
                continue;
            }
            let stop = if o == 0 { n } else { o };
            let ge = atom_g_index(stop, path, o);
            let (pe, se) = split_g_index(stop, ge);
            let dxi = data1.terminal.value(stop, pe, se) - data2.terminal.value(stop, pe, se);
            xi_term += w * (beta * acc.at(stop, path & prefix_mask(stop))).exp() * dxi * dxi;
            for k in 0..stop {
                let pf = path & prefix_mask(k);
                let wt = (beta * acc.at(k, pf)).exp();
                let gi = atom_g_index(k, path, o);
                let p2 = sol2.predictor.at(k, gi);
                let z2 = sol2.z.at(k, gi);
                let df = data1.driver.eval(k, pf, p2, z2) - data2.driver.eval(k, pf, p2, z2);
                driver_term += w * wt * df * df / data1.driver.alpha_sq.at(k, pf) * dt;
                if let (Some(l1), Some(l2)) = (data1.lower(), data2.lower()) {
                    let dl = l1.at(k, gi) - l2.at(k, gi);
                    let dk = sol1.push_plus.at(k, gi) - sol2.push_plus.at(k, gi);
                    barrier_term += w * wt * dl * dk;
                }
                if let (Some(u1), Some(u2)) = (data1.upper(), data2.upper()) {
                    let du = u1.at(k, gi) - u2.at(k, gi);
                    let dk = sol1.push_minus.at(k, gi) - sol2.push_minus.at(k, gi);
                    barrier_term += w * wt * du * dk;
                }
            }
        }
    }
    let lhs = norms.estimate_lhs();
    let rhs = xi_term + driver_term + barrier_term;
    let c = if lhs == 0.0 {
        0.0
    } else if rhs > 0.0 {
        lhs / rhs
    } else {
        f64::INFINITY
    };
    AprioriReport {
        lhs,
        rhs,
        c,
        xi_term,
        driver_term,
        barrier_term,
        norms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtration::{build_azema, reweight_to_q, DefaultLaw};

    fn measure(model: &LatticeModel, law: &DefaultLaw) -> Arc<Measure> {
        let b = build_azema(model, law).unwrap();
        Arc::new(reweight_to_q(&b).unwrap())
    }

    fn constant(model: &LatticeModel, c: f64) -> AdaptedProcess {
        AdaptedProcess::constant(TreeKind::F, model.n_steps, c)
    }

    #[test]
    fn zero_driver_constant_terminal() {
        let model = LatticeModel::new(3, 0.5).unwrap();
        let q = measure(&model, &DefaultLaw::none(&model));
        let p = DRBSDEProblem::bsde(q, Terminal::from_zeta(constant(&model, 2.5)), DriverSpec::zero(3))
            .unwrap();
        let s = solve_bsde(&p).unwrap();
        assert!(s.y.step(0).iter().chain(s.y.step(2)).all(|v| *v == 2.5));
        assert_eq!(s.z.max_abs(), 0.0);
        assert_eq!(s.m.max_abs(), 0.0);
    }

    #[test]
    fn linear_discount_two_steps() {
        let model = LatticeModel::new(2, 0.5).unwrap();
        let q = measure(&model, &DefaultLaw::none(&model));
        let p = DRBSDEProblem::bsde(
            q,
            Terminal::from_zeta(constant(&model, 1.0)),
            DriverSpec::linear_constant(2, 0.1, 0.0),
        )
        .unwrap();
        let s = solve_bsde(&p).unwrap();
        assert!((s.y0() - 0.9025).abs() < 1e-15);
    }

    #[test]
    fn separated_barriers_required() {
        let model = LatticeModel::new(2, 0.5).unwrap();
        let q = measure(&model, &DefaultLaw::none(&model));
        let err = DRBSDEProblem::new(
            q,
            Terminal::from_zeta(constant(&model, 0.0)),
            DriverSpec::zero(2),
            Some(constant(&model, 0.0)),
            Some(constant(&model, 0.0)),
            4.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Hypothesis { name: "H3", .. }));
    }

    #[test]
    fn terminal_outside_barriers_rejected() {
        let model = LatticeModel::new(2, 0.5).unwrap();
        let q = measure(&model, &DefaultLaw::none(&model));
        let err = DRBSDEProblem::new(
            q,
            Terminal::from_zeta(constant(&model, 2.0)),
            DriverSpec::zero(2),
            Some(constant(&model, -1.0)),
            Some(constant(&model, 1.0)),
            4.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Hypothesis { name: "H1", .. }));
    }

    #[test]
    fn trivial_reflected_problem() {
        let model = LatticeModel::new(3, 0.5).unwrap();
        let q = measure(&model, &DefaultLaw::none(&model));
        let p = DRBSDEProblem::new(
            q,
            Terminal::from_zeta(constant(&model, 0.0)),
            DriverSpec::zero(3),
            Some(constant(&model, -1.0)),
            Some(constant(&model, 1.0)),
            4.0,
        )
        .unwrap();
        let s = solve_drbsde(&p).unwrap();
        assert_eq!(s.y.max_abs(), 0.0);
        assert_eq!(s.k_plus.max_abs() + s.k_minus.max_abs(), 0.0);
    }

    #[test]
    fn penalty_zero_matches_bsde_and_lower_mode_increases() {
        let model = LatticeModel::new(3, 0.5).unwrap();
        let law = DefaultLaw::deterministic(&model, &[0.1, 0.1, 0.1]).unwrap();
        let q = measure(&model, &law);
        let zeta = AdaptedProcess::from_state_fn(&model, |_, b| b);
        let p = DRBSDEProblem::new(
            q,
            Terminal::from_zeta(zeta),
            DriverSpec::zero(3),
            Some(AdaptedProcess::from_state_fn(&model, |_, b| b.min(0.3) - 0.2)),
            Some(AdaptedProcess::from_state_fn(&model, |_, b| b.max(-0.3) + 0.2)),
            4.0,
        )
        .unwrap();
        let bsde = solve_bsde(&p).unwrap();
        let pen0 = solve_penalized(&p, 0.0, PenaltyMode::Double).unwrap();
        assert_eq!(bsde.y, pen0.y);
        let mut prev = solve_penalized(&p, 1.0, PenaltyMode::Lower).unwrap();
        for n in [10.0, 100.0, 1000.0] {
            let cur = solve_penalized(&p, n, PenaltyMode::Lower).unwrap();
            for k in 0..=3 {
                for (a, b) in prev.y.step(k).iter().zip(cur.y.step(k)) {
                    assert!(b >= a);
                }
            }
            prev = cur;
        }
    }

    #[test]
    fn norms_of_unit_solution() {
        let model = LatticeModel::new(2, 0.5).unwrap();
        let q = measure(&model, &DefaultLaw::none(&model));
        let mut p = DRBSDEProblem::bsde(q, Terminal::from_zeta(constant(&model, 1.0)), DriverSpec::zero(2))
            .unwrap();
        p.beta = 0.0;
        let s = solve_bsde(&p).unwrap();
        let r = weighted_norms(&s, &p);
        assert!((r.y_s2 - 1.0).abs() < 1e-15);
        assert_eq!(r.z_h2, 0.0);
    }

    #[test]
    fn general_driver_certificate() {
        let model = LatticeModel::new(2, 0.5).unwrap();
        let f: DriverFn = Arc::new(|_, _, y: f64, z: f64| -0.5 * y.sin() + 0.3 * z.abs());
        assert!(DriverSpec::general(&model, f.clone(), constant(&model, 0.5), constant(&model, 0.3)).is_ok());
        assert!(matches!(
            DriverSpec::general(&model, f, constant(&model, 0.1), constant(&model, 0.3)),
            Err(Error::Driver(_))
        ));
    }

    #[test]
    fn alpha_floor_and_accumulator() {
        let model = LatticeModel::new(3, 0.25).unwrap();
        let d = DriverSpec::linear_constant(3, 0.2, 0.5);
        assert!((d.alpha_sq.at(0, 0) - 1.0).abs() < 1e-15);
        let d = DriverSpec::linear_constant(3, 2.0, 0.5);
        assert!((d.alpha_sq.at(0, 0) - 2.25).abs() < 1e-15);
        let a = d.accumulated(&model);
        assert_eq!(a.at(0, 0), 0.0);
        assert!((a.at(3, 5) - 3.0 * 2.25 * 0.25).abs() < 1e-14);
    }
}
