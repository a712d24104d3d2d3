//! Exact discrete-probability engine: the binomial path lattice, grid-valued
//! default laws, the progressively enlarged tree, the Azéma bundle and the
//! equivalent measure `Q` built from `Ψ = 1/𝓔` stopped at default.
//!
//! Layout conventions used throughout the crate:
//! - a path is a bit mask, bit `i` holding the move of step `i + 1` (1 = up);
//! - the F-node at step `k` is the prefix `path & ((1 << k) - 1)`;
//! - G-nodes at step `k` are indexed `prefix * (k + 1) + status`, where status
//!   0 means alive (τ > t_k) and status `j` in `1..=k` means τ = t_j;
//! - atoms are `(path, outcome)` with outcome 0 for survival past the horizon
//!   and `j` for default at t_j, stored at `path * (N + 1) + outcome`.

use crate::error::{Error, Result};

/// Largest tree depth accepted by [`build_model`].
pub const MAX_STEPS: usize = 20;

const MASS_TOL: f64 = 1e-12;

#[inline]
pub fn prefix_mask(k: usize) -> usize {
    (1usize << k) - 1
}

#[inline]
pub fn g_index(k: usize, prefix: usize, status: usize) -> usize {
    prefix * (k + 1) + status
}

#[inline]
pub fn g_node_count(k: usize) -> usize {
    (k + 1) << k
}

/// Inverse of [`g_index`]: `(prefix, status)`.
#[inline]
pub fn split_g_index(k: usize, index: usize) -> (usize, usize) {
    (index / (k + 1), index % (k + 1))
}

/// Status of the G-node at step `k` crossed by atom `(path, outcome)`.
#[inline]
pub fn status_at(k: usize, outcome: usize) -> usize {
    if outcome >= 1 && outcome <= k {
        outcome
    } else {
        0
    }
}

/// G-node index at step `k` crossed by atom `(path, outcome)`.
#[inline]
pub fn atom_g_index(k: usize, path: usize, outcome: usize) -> usize {
    g_index(k, path & prefix_mask(k), status_at(k, outcome))
}

/// Raw lattice parameters; `None` picks the defaults (√Δ and 1/2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeConfig {
    pub n_steps: usize,
    pub dt: f64,
    pub increment: Option<f64>,
    pub up_prob: Option<f64>,
}

/// Non-recombining binomial tree driving the base filtration.
///
/// The down move is `-increment * p / (1 - p)` so the walk is a martingale
/// under the reference measure for every `up_prob`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeModel {
    pub n_steps: usize,
    pub dt: f64,
    pub increment: f64,
    pub up_prob: f64,
}

pub fn build_model(config: &LatticeConfig) -> Result<LatticeModel> {
    let LatticeConfig {
        n_steps,
        dt,
        increment,
        up_prob,
    } = *config;
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    if n_steps > MAX_STEPS {
        return Err(Error::Config(format!(
            "n_steps = {n_steps} exceeds the supported maximum {MAX_STEPS}"
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let increment = increment.unwrap_or(dt.sqrt());
    if !(increment.is_finite() && increment > 0.0) {
        return Err(Error::Config(format!(
            "increment must be positive, got {increment}"
        )));
    }
    let up_prob = up_prob.unwrap_or(0.5);
    if !(up_prob > 0.0 && up_prob < 1.0) {
        return Err(Error::Config(format!(
            "up_prob must lie in (0, 1), got {up_prob}"
        )));
    }
    Ok(LatticeModel {
        n_steps,
        dt,
        increment,
        up_prob,
    })
}

impl LatticeModel {
    /// Symmetric walk with increment √Δ.
    pub fn new(n_steps: usize, dt: f64) -> Result<Self> {
        build_model(&LatticeConfig {
            n_steps,
            dt,
            increment: None,
            up_prob: None,
        })
    }

    pub fn n_paths(&self) -> usize {
        1usize << self.n_steps
    }

    pub fn n_atoms(&self) -> usize {
        self.n_paths() * (self.n_steps + 1)
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn up_move(&self) -> f64 {
        self.increment
    }

    pub fn down_move(&self) -> f64 {
        -self.increment * self.up_prob / (1.0 - self.up_prob)
    }

    pub fn step_move(&self, up: bool) -> f64 {
        if up {
            self.up_move()
        } else {
            self.down_move()
        }
    }

    /// Increment of step `step` (1-based) along `path`.
    pub fn increment_at(&self, path: usize, step: usize) -> f64 {
        self.step_move((path >> (step - 1)) & 1 == 1)
    }

    /// Walk value B_k on the prefix.
    pub fn walk(&self, prefix: usize, k: usize) -> f64 {
        let ups = (prefix & prefix_mask(k)).count_ones() as f64;
        ups * self.up_move() + (k as f64 - ups) * self.down_move()
    }

    /// Reference probability of the prefix at step `k`.
    pub fn prefix_prob(&self, prefix: usize, k: usize) -> f64 {
        let ups = (prefix & prefix_mask(k)).count_ones() as i32;
        self.up_prob.powi(ups) * (1.0 - self.up_prob).powi(k as i32 - ups)
    }

    /// Conditional variance of one increment.
    pub fn step_variance(&self) -> f64 {
        let p = self.up_prob;
        p * self.up_move().powi(2) + (1.0 - p) * self.down_move().powi(2)
    }

    /// Largest absolute increment.
    pub fn max_abs_move(&self) -> f64 {
        self.up_move().abs().max(self.down_move().abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeKind {
    F,
    G,
}

/// Node-indexed values on the F-tree or the G-tree.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    kind: TreeKind,
    values: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn zeros(kind: TreeKind, n_steps: usize) -> Self {
        Self::constant(kind, n_steps, 0.0)
    }

    pub fn constant(kind: TreeKind, n_steps: usize, c: f64) -> Self {
        let values = (0..=n_steps)
            .map(|k| {
                let len = match kind {
                    TreeKind::F => 1usize << k,
                    TreeKind::G => g_node_count(k),
                };
                vec![c; len]
            })
            .collect();
        Self { kind, values }
    }

    /// F-process from `f(k, prefix)`.
    pub fn from_fn_f(n_steps: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = (0..=n_steps)
            .map(|k| (0..1usize << k).map(|p| f(k, p)).collect())
            .collect();
        Self {
            kind: TreeKind::F,
            values,
        }
    }

    /// G-process from `f(k, prefix, status)`.
    pub fn from_fn_g(n_steps: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let values = (0..=n_steps)
            .map(|k| {
                (0..g_node_count(k))
                    .map(|i| {
                        let (p, s) = split_g_index(k, i);
                        f(k, p, s)
                    })
                    .collect()
            })
            .collect();
        Self {
            kind: TreeKind::G,
            values,
        }
    }

    /// F-process whose value depends only on `(t_k, B_k)`.
    pub fn from_state_fn(model: &LatticeModel, f: impl Fn(f64, f64) -> f64) -> Self {
        Self::from_fn_f(model.n_steps, |k, p| f(model.time(k), model.walk(p, k)))
    }

    pub fn kind(&self) -> TreeKind {
        self.kind
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn step_mut(&mut self, k: usize) -> &mut Vec<f64> {
        &mut self.values[k]
    }

    pub fn at(&self, k: usize, index: usize) -> f64 {
        self.values[k][index]
    }

    pub fn set(&mut self, k: usize, index: usize, v: f64) {
        self.values[k][index] = v;
    }

    /// Value of an F-process, or of a G-process at the alive node.
    pub fn f(&self, k: usize, prefix: usize) -> f64 {
        match self.kind {
            TreeKind::F => self.values[k][prefix],
            TreeKind::G => self.values[k][g_index(k, prefix, 0)],
        }
    }

    pub fn g(&self, k: usize, prefix: usize, status: usize) -> f64 {
        debug_assert_eq!(self.kind, TreeKind::G);
        self.values[k][g_index(k, prefix, status)]
    }

    /// Value seen by atom `(path, outcome)` at step `k`.
    pub fn along(&self, k: usize, path: usize, outcome: usize) -> f64 {
        match self.kind {
            TreeKind::F => self.values[k][path & prefix_mask(k)],
            TreeKind::G => self.values[k][atom_g_index(k, path, outcome)],
        }
    }

    /// Lift an F-process to the G-tree, frozen at the default step.
    pub fn lift_stopped(&self) -> AdaptedProcess {
        assert_eq!(self.kind, TreeKind::F, "lift_stopped expects an F-process");
        AdaptedProcess::from_fn_g(self.n_steps(), |k, p, s| {
            if s == 0 {
                self.values[k][p]
            } else {
                self.values[s][p & prefix_mask(s)]
            }
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> AdaptedProcess {
        AdaptedProcess {
            kind: self.kind,
            values: self
                .values
                .iter()
                .map(|row| row.iter().map(|&v| f(v)).collect())
                .collect(),
        }
    }

    pub fn zip_with(&self, other: &AdaptedProcess, f: impl Fn(f64, f64) -> f64) -> AdaptedProcess {
        assert_eq!(self.kind, other.kind);
        assert_eq!(self.n_steps(), other.n_steps());
        AdaptedProcess {
            kind: self.kind,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        }
    }

    /// Largest absolute value over all nodes.
    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Conditional law of the default time given the full path.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultLaw {
    n_steps: usize,
    mass: Vec<f64>,
}

/// Which walk value feeds a path-dependent hazard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    /// B at the start of the step: the law is F-adapted (immersion holds).
    Current,
    /// B at the horizon: the law looks ahead (immersion fails).
    Terminal,
}

/// Affine-in-B intensity `max(base + slope * B, 0)` turned into a per-step
/// conditional default probability `min(1 - exp(-λΔ), max_prob)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazardRule {
    pub base: f64,
    pub slope: f64,
    pub observe: Observation,
    pub max_prob: f64,
}

impl HazardRule {
    pub fn new(base: f64, slope: f64, observe: Observation) -> Self {
        Self {
            base,
            slope,
            observe,
            max_prob: 0.9,
        }
    }
}

impl DefaultLaw {
    /// No default before the horizon.
    pub fn none(model: &LatticeModel) -> Self {
        let n = model.n_steps;
        let mut mass = vec![0.0; model.n_atoms()];
        for path in 0..model.n_paths() {
            mass[path * (n + 1)] = 1.0;
        }
        Self { n_steps: n, mass }
    }

    /// Same masses `h_1..h_N` on every path; `h_∞` takes the remainder.
    pub fn deterministic(model: &LatticeModel, h: &[f64]) -> Result<Self> {
        if h.len() != model.n_steps {
            return Err(Error::Config(format!(
                "deterministic law needs {} masses, got {}",
                model.n_steps,
                h.len()
            )));
        }
        let tail = 1.0 - h.iter().sum::<f64>();
        let mut row = h.to_vec();
        row.push(tail);
        Self::from_fn(model, |_| row.clone())
    }

    /// Rows `[h_1, …, h_N, h_∞]` per terminal path.
    pub fn from_table(model: &LatticeModel, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != model.n_paths() {
            return Err(Error::Config(format!(
                "default table needs {} rows, got {}",
                model.n_paths(),
                rows.len()
            )));
        }
        Self::from_fn(model, |path| rows[path].clone())
    }

    /// `f(path)` returns `[h_1, …, h_N, h_∞]`.
    pub fn from_fn(model: &LatticeModel, f: impl Fn(usize) -> Vec<f64>) -> Result<Self> {
        let n = model.n_steps;
        let mut mass = vec![0.0; model.n_atoms()];
        for path in 0..model.n_paths() {
            let row = f(path);
            if row.len() != n + 1 {
                return Err(Error::Config(format!(
                    "path {path}: expected {} masses, got {}",
                    n + 1,
                    row.len()
                )));
            }
            mass[path * (n + 1)] = row[n];
            mass[path * (n + 1) + 1..path * (n + 1) + n + 1].copy_from_slice(&row[..n]);
        }
        let law = Self { n_steps: n, mass };
        law.validate()?;
        Ok(law)
    }

    /// Builds `h_j = p_j Π_{i<j} (1 - p_i)` from conditional step
    /// probabilities `p(path, j)`.
    pub fn from_step_probs(
        model: &LatticeModel,
        p: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let n = model.n_steps;
        Self::from_fn(model, |path| {
            let mut row = Vec::with_capacity(n + 1);
            let mut survive = 1.0;
            for j in 1..=n {
                let pj = p(path, j);
                row.push(survive * pj);
                survive *= 1.0 - pj;
            }
            row.push(survive);
            row
        })
    }

    pub fn hazard(model: &LatticeModel, rule: &HazardRule) -> Result<Self> {
        if !(rule.max_prob > 0.0 && rule.max_prob < 1.0) {
            return Err(Error::Config(format!(
                "hazard max_prob must lie in (0, 1), got {}",
                rule.max_prob
            )));
        }
        let n = model.n_steps;
        Self::from_step_probs(model, |path, j| {
            let b = match rule.observe {
                Observation::Current => model.walk(path, j - 1),
                Observation::Terminal => model.walk(path, n),
            };
            let lambda = (rule.base + rule.slope * b).max(0.0);
            (1.0 - (-lambda * model.dt).exp()).min(rule.max_prob)
        })
    }

    /// Lattice analogue of the Cox construction: survival over step `j` is
    /// `exp(-λ(t_{j-1}, B_{j-1}) Δ)`.
    pub fn cox(model: &LatticeModel, intensity: impl Fn(f64, f64) -> f64) -> Result<Self> {
        Self::from_step_probs(model, |path, j| {
            let lambda = intensity(model.time(j - 1), model.walk(path, j - 1));
            1.0 - (-lambda.max(0.0) * model.dt).exp()
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Mass of outcome `j` (0 = beyond the horizon) on `path`.
    pub fn atom_mass(&self, path: usize, outcome: usize) -> f64 {
        self.mass[path * (self.n_steps + 1) + outcome]
    }

    pub fn h(&self, path: usize, j: usize) -> f64 {
        assert!(j >= 1 && j <= self.n_steps);
        self.atom_mass(path, j)
    }

    pub fn h_inf(&self, path: usize) -> f64 {
        self.atom_mass(path, 0)
    }

    /// Whether some path carries default mass before the horizon.
    pub fn has_default(&self) -> bool {
        (0..self.mass.len() / (self.n_steps + 1)).any(|path| self.h_inf(path) < 1.0)
    }

    /// Same row on every path.
    pub fn is_deterministic(&self) -> bool {
        let w = self.n_steps + 1;
        let first = &self.mass[..w];
        self.mass
            .chunks(w)
            .all(|row| row.iter().zip(first).all(|(a, b)| (a - b).abs() <= 1e-15))
    }

    /// Whether each `h_j` depends only on the first `j` moves.
    pub fn is_immersion_like(&self) -> bool {
        let n = self.n_steps;
        (0..1usize << n).all(|path| {
            (1..=n).all(|j| {
                let rep = path & prefix_mask(j);
                (self.h(path, j) - self.h(rep, j)).abs() <= 1e-15
            })
        })
    }

    fn validate(&self) -> Result<()> {
        let w = self.n_steps + 1;
        for (path, row) in self.mass.chunks(w).enumerate() {
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::Config(format!(
                    "path {path}: default mass {v} is negative or not finite"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > MASS_TOL {
                return Err(Error::Config(format!(
                    "path {path}: default masses sum to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// The Azéma pair and every process derived from it. F-processes unless noted.
#[derive(Debug, Clone)]
pub struct AzemaBundle {
    pub model: LatticeModel,
    pub law: DefaultLaw,
    pub g: AdaptedProcess,
    pub g_tilde: AdaptedProcess,
    pub q: AdaptedProcess,
    pub d_opt: AdaptedProcess,
    pub m: AdaptedProcess,
    pub e: AdaptedProcess,
    pub e_tilde: AdaptedProcess,
    /// G-process `1/𝓔` frozen at the default step.
    pub psi: AdaptedProcess,
}

pub fn build_azema(model: &LatticeModel, law: &DefaultLaw) -> Result<AzemaBundle> {
    let n = model.n_steps;
    if law.n_steps() != n {
        return Err(Error::Shape(format!(
            "law has {} steps, model has {n}",
            law.n_steps()
        )));
    }
    let w = n + 1;
    let p = model.up_prob;
    // cond[k][prefix * w + o] = E[h_o | F_k]
    let mut cond: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    cond[n] = law.mass.clone();
    for k in (0..n).rev() {
        let next = &cond[k + 1];
        let mut cur = vec![0.0; (1usize << k) * w];
        for prefix in 0..1usize << k {
            let up = prefix | (1 << k);
            for o in 0..w {
                cur[prefix * w + o] = (1.0 - p) * next[prefix * w + o] + p * next[up * w + o];
            }
        }
        cond[k] = cur;
    }

    let mut g = AdaptedProcess::zeros(TreeKind::F, n);
    let mut q = AdaptedProcess::zeros(TreeKind::F, n);
    for k in 0..=n {
        for prefix in 0..1usize << k {
            let row = &cond[k][prefix * w..(prefix + 1) * w];
            let survival = row[0] + row[k + 1..].iter().sum::<f64>();
            if !(survival > 0.0) {
                return Err(Error::PositiveSurvival {
                    step: k,
                    prefix,
                    value: survival,
                });
            }
            g.set(k, prefix, survival);
            if k >= 1 {
                q.set(k, prefix, row[k]);
            }
        }
    }
    let g_tilde = g.zip_with(&q, |a, b| a + b);

    let mut d_opt = AdaptedProcess::zeros(TreeKind::F, n);
    let mut e = AdaptedProcess::constant(TreeKind::F, n, 1.0);
    let mut e_tilde = AdaptedProcess::constant(TreeKind::F, n, 1.0);
    for k in 1..=n {
        for prefix in 0..1usize << k {
            let parent = prefix & prefix_mask(k - 1);
            d_opt.set(k, prefix, d_opt.at(k - 1, parent) + q.at(k, prefix));
            let gt = g_tilde.at(k, prefix);
            e.set(k, prefix, e.at(k - 1, parent) * gt / g.at(k - 1, parent));
            e_tilde.set(k, prefix, e_tilde.at(k - 1, parent) * g.at(k, prefix) / gt);
        }
    }
    let m = d_opt.zip_with(&g, |a, b| a + b);
    let psi = e.map(|v| 1.0 / v).lift_stopped();

    Ok(AzemaBundle {
        model: *model,
        law: law.clone(),
        g,
        g_tilde,
        q,
        d_opt,
        m,
        e,
        e_tilde,
        psi,
    })
}

/// Largest deviations from the structural identities of an [`AzemaBundle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AzemaCheck {
    pub g_tilde_sum: f64,
    pub m_martingale: f64,
    pub product: f64,
    pub e_tilde_min: f64,
    pub e_tilde_max: f64,
    pub e_min: f64,
    pub psi_min: f64,
    pub psi_martingale: f64,
    pub g0_error: f64,
}

impl AzemaCheck {
    /// All identities within `tol` and all positivity bounds strict.
    pub fn passes(&self, tol: f64) -> bool {
        self.g_tilde_sum <= tol
            && self.m_martingale <= tol
            && self.product <= tol
            && self.psi_martingale <= tol
            && self.g0_error <= tol
            && self.e_tilde_min > 0.0
            && self.e_tilde_max <= 1.0 + tol
            && self.e_min > 0.0
            && self.psi_min > 0.0
    }
}

impl AzemaBundle {
    /// Reference measure `P` on atoms.
    pub fn reference_measure(&self) -> Measure {
        let model = self.model;
        let n = model.n_steps;
        let mut weights = vec![0.0; model.n_atoms()];
        for path in 0..model.n_paths() {
            let pp = model.prefix_prob(path, n);
            for o in 0..=n {
                weights[path * (n + 1) + o] = pp * self.law.atom_mass(path, o);
            }
        }
        Measure::from_weights_unchecked(model, weights)
    }

    /// `ΔV^F_k = 𝓔̃_{k-1} - 𝓔̃_k` (zero at k = 0).
    pub fn delta_v(&self, k: usize, prefix: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.e_tilde.at(k - 1, prefix & prefix_mask(k - 1)) - self.e_tilde.at(k, prefix)
        }
    }

    /// Checks every identity of the bundle; `psi_martingale` uses `p`.
    pub fn check(&self, p: &Measure) -> AzemaCheck {
        let model = self.model;
        let n = model.n_steps;
        let pu = model.up_prob;
        let mut out = AzemaCheck {
            g_tilde_sum: 0.0,
            m_martingale: 0.0,
            product: 0.0,
            e_tilde_min: f64::INFINITY,
            e_tilde_max: f64::NEG_INFINITY,
            e_min: f64::INFINITY,
            psi_min: f64::INFINITY,
            psi_martingale: martingale_residual(&self.psi, p),
            g0_error: (self.g.at(0, 0) - 1.0).abs(),
        };
        for k in 0..=n {
            for prefix in 0..1usize << k {
                let g = self.g.at(k, prefix);
                out.g_tilde_sum = out
                    .g_tilde_sum
                    .max((self.g_tilde.at(k, prefix) - g - self.q.at(k, prefix)).abs());
                out.product = out
                    .product
                    .max((g - self.e.at(k, prefix) * self.e_tilde.at(k, prefix)).abs());
                out.e_tilde_min = out.e_tilde_min.min(self.e_tilde.at(k, prefix));
                out.e_tilde_max = out.e_tilde_max.max(self.e_tilde.at(k, prefix));
                out.e_min = out.e_min.min(self.e.at(k, prefix));
                if k < n {
                    let up = prefix | (1 << k);
                    let next = (1.0 - pu) * self.m.at(k + 1, prefix) + pu * self.m.at(k + 1, up);
                    out.m_martingale = out.m_martingale.max((next - self.m.at(k, prefix)).abs());
                }
            }
        }
        for k in 0..=n {
            for (i, &v) in self.psi.step(k).iter().enumerate() {
                if p.g_mass(k, i) > 0.0 {
                    out.psi_min = out.psi_min.min(v);
                }
            }
        }
        out
    }
}

/// A probability on atoms together with its G-node masses.
#[derive(Debug, Clone, PartialEq)]
pub struct Measure {
    model: LatticeModel,
    weights: Vec<f64>,
    node_mass: Vec<Vec<f64>>,
}

/// One successor of a G-node: its index at the next step and the stopped
/// walk increment along the edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Child {
    pub index: usize,
    pub prefix: usize,
    pub status: usize,
    pub weight: f64,
    pub db: f64,
}

/// Positive-mass successors of a G-node (at most four).
#[derive(Debug, Clone, Copy)]
pub struct Children {
    items: [Child; 4],
    len: usize,
    pub total: f64,
}

impl Children {
    pub fn iter(&self) -> impl Iterator<Item = &Child> {
        self.items[..self.len].iter()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Conditional mean of `f(child)`.
    pub fn mean(&self, f: impl Fn(&Child) -> f64) -> f64 {
        self.iter().map(|c| c.weight * f(c)).sum::<f64>() / self.total
    }
}

impl Measure {
    /// Builds a measure; weights must be nonnegative and sum to one.
    pub fn from_weights(model: LatticeModel, weights: Vec<f64>) -> Result<Self> {
        Self::from_weights_tol(model, weights, MASS_TOL)
    }

    fn from_weights_tol(model: LatticeModel, weights: Vec<f64>, tol: f64) -> Result<Self> {
        if weights.len() != model.n_atoms() {
            return Err(Error::Shape(format!(
                "expected {} atom weights, got {}",
                model.n_atoms(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Config(format!("atom weight {w} is negative or not finite")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > tol {
            return Err(Error::Consistency(format!(
                "measure has total mass {total}, expected 1"
            )));
        }
        Ok(Self::from_weights_unchecked(model, weights))
    }

    fn from_weights_unchecked(model: LatticeModel, weights: Vec<f64>) -> Self {
        let n = model.n_steps;
        let mut node_mass: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
        // At the horizon, G-node (path, s) is exactly atom (path, s).
        node_mass[n] = weights.clone();
        for k in (0..n).rev() {
            let next = &node_mass[k + 1];
            let mut cur = vec![0.0; g_node_count(k)];
            for prefix in 0..1usize << k {
                for bit in 0..2usize {
                    let c = prefix | (bit << k);
                    cur[g_index(k, prefix, 0)] +=
                        next[g_index(k + 1, c, 0)] + next[g_index(k + 1, c, k + 1)];
                    for s in 1..=k {
                        cur[g_index(k, prefix, s)] += next[g_index(k + 1, c, s)];
                    }
                }
            }
            node_mass[k] = cur;
        }
        Self {
            model,
            weights,
            node_mass,
        }
    }

    pub fn model(&self) -> &LatticeModel {
        &self.model
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, path: usize, outcome: usize) -> f64 {
        self.weights[path * (self.model.n_steps + 1) + outcome]
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn g_mass(&self, k: usize, index: usize) -> f64 {
        self.node_mass[k][index]
    }

    pub fn g_masses(&self, k: usize) -> &[f64] {
        &self.node_mass[k]
    }

    pub fn f_mass(&self, k: usize, prefix: usize) -> f64 {
        self.node_mass[k][g_index(k, prefix, 0)..g_index(k, prefix + 1, 0)]
            .iter()
            .sum()
    }

    /// Same null sets as `other`.
    pub fn is_equivalent_to(&self, other: &Measure) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| (*a > 0.0) == (*b > 0.0))
    }

    /// Positive-mass successors of G-node `(k, prefix, status)`, `k < N`.
    pub fn children(&self, k: usize, prefix: usize, status: usize) -> Children {
        let empty = Child {
            index: 0,
            prefix: 0,
            status: 0,
            weight: 0.0,
            db: 0.0,
        };
        let mut out = Children {
            items: [empty; 4],
            len: 0,
            total: 0.0,
        };
        let next = &self.node_mass[k + 1];
        for bit in 0..2usize {
            let c = prefix | (bit << k);
            let mv = self.model.step_move(bit == 1);
            let targets: [(usize, f64); 2] = if status == 0 {
                [(0, mv), (k + 1, mv)]
            } else {
                [(status, 0.0), (usize::MAX, 0.0)]
            };
            for (s, db) in targets {
                if s == usize::MAX {
                    continue;
                }
                let index = g_index(k + 1, c, s);
                let weight = next[index];
                if weight > 0.0 {
                    out.items[out.len] = Child {
                        index,
                        prefix: c,
                        status: s,
                        weight,
                        db,
                    };
                    out.len += 1;
                    out.total += weight;
                }
            }
        }
        out
    }

    /// `E[x]` over all atoms.
    pub fn expect(&self, x: &RandomVariable) -> f64 {
        self.weights
            .iter()
            .zip(&x.values)
            .map(|(w, v)| if *w > 0.0 { w * v } else { 0.0 })
            .sum()
    }
}

/// The equivalent measure `dQ = Ψ dP`, Ψ read at the atom's stopping step.
pub fn reweight_to_q(bundle: &AzemaBundle) -> Result<Measure> {
    let model = bundle.model;
    let n = model.n_steps;
    let mut weights = vec![0.0; model.n_atoms()];
    for path in 0..model.n_paths() {
        let pp = model.prefix_prob(path, n);
        for o in 0..=n {
            let stop = if o == 0 { n } else { o };
            let e = bundle.e.at(stop, path & prefix_mask(stop));
            weights[path * (n + 1) + o] = pp * bundle.law.atom_mass(path, o) / e;
        }
    }
    Measure::from_weights_tol(model, weights, 1e-10)
}

/// A real function on atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomVariable {
    pub values: Vec<f64>,
}

impl RandomVariable {
    pub fn constant(model: &LatticeModel, c: f64) -> Self {
        Self {
            values: vec![c; model.n_atoms()],
        }
    }

    /// From `f(path, outcome)`.
    pub fn from_fn(model: &LatticeModel, f: impl Fn(usize, usize) -> f64) -> Self {
        let n = model.n_steps;
        let mut values = Vec::with_capacity(model.n_atoms());
        for path in 0..model.n_paths() {
            for o in 0..=n {
                values.push(f(path, o));
            }
        }
        Self { values }
    }

    /// Value of a process at the atom's stopping step (default step or N).
    pub fn stopped_value(process: &AdaptedProcess) -> Self {
        let n = process.n_steps();
        let mut values = Vec::with_capacity((n + 1) << n);
        for path in 0..1usize << n {
            for o in 0..=n {
                let stop = if o == 0 { n } else { o };
                values.push(process.along(stop, path, o));
            }
        }
        Self { values }
    }

    pub fn get(&self, n_steps: usize, path: usize, outcome: usize) -> f64 {
        self.values[path * (n_steps + 1) + outcome]
    }
}

/// Node values of a conditional expectation at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub kind: TreeKind,
    pub step: usize,
    pub values: Vec<f64>,
    pub mass: Vec<f64>,
}

impl Projection {
    /// Value at a node; zero-mass nodes are undefined.
    pub fn get(&self, index: usize) -> Result<f64> {
        if self.mass[index] > 0.0 {
            Ok(self.values[index])
        } else {
            Err(Error::UndefinedNode {
                step: self.step,
                index,
            })
        }
    }
}

/// `E[x | F_k]` or `E[x | G_k]` by direct summation over compatible atoms.
pub fn conditional_expectation(
    x: &RandomVariable,
    step: usize,
    kind: TreeKind,
    measure: &Measure,
) -> Result<Projection> {
    let model = measure.model();
    let n = model.n_steps;
    if step > n {
        return Err(Error::Shape(format!("step {step} beyond horizon {n}")));
    }
    if x.values.len() != model.n_atoms() {
        return Err(Error::Shape(format!(
            "random variable has {} atoms, model has {}",
            x.values.len(),
            model.n_atoms()
        )));
    }
    let len = match kind {
        TreeKind::F => 1usize << step,
        TreeKind::G => g_node_count(step),
    };
    let mut num = vec![0.0; len];
    let mut mass = vec![0.0; len];
    for path in 0..model.n_paths() {
        for o in 0..=n {
            let w = measure.weight(path, o);
            if w == 0.0 {
                continue;
            }
            let idx = match kind {
                TreeKind::F => path & prefix_mask(step),
                TreeKind::G => atom_g_index(step, path, o),
            };
            num[idx] += w * x.get(n, path, o);
            mass[idx] += w;
        }
    }
    let values = num
        .iter()
        .zip(&mass)
        .map(|(a, m)| if *m > 0.0 { a / m } else { 0.0 })
        .collect();
    Ok(Projection {
        kind,
        step,
        values,
        mass,
    })
}

/// The whole conditional-expectation process; zero-mass nodes hold 0.
pub fn conditional_expectation_process(
    x: &RandomVariable,
    kind: TreeKind,
    measure: &Measure,
) -> Result<AdaptedProcess> {
    let n = measure.model().n_steps;
    let mut out = AdaptedProcess::zeros(kind, n);
    for k in 0..=n {
        let proj = conditional_expectation(x, k, kind, measure)?;
        *out.step_mut(k) = proj.values;
    }
    Ok(out)
}

/// `E[X_k | F_k]` of a G-process at every F-node.
pub fn project_to_f(x: &AdaptedProcess, measure: &Measure) -> AdaptedProcess {
    assert_eq!(x.kind(), TreeKind::G);
    let n = x.n_steps();
    AdaptedProcess::from_fn_f(n, |k, prefix| {
        let lo = g_index(k, prefix, 0);
        let mut num = 0.0;
        let mut mass = 0.0;
        for s in 0..=k {
            let w = measure.g_mass(k, lo + s);
            if w > 0.0 {
                num += w * x.at(k, lo + s);
                mass += w;
            }
        }
        if mass > 0.0 {
            num / mass
        } else {
            0.0
        }
    })
}

/// Largest `|E[X_{k+1} | G_k] - X_k|` over positive-mass G-nodes.
pub fn martingale_residual(x: &AdaptedProcess, measure: &Measure) -> f64 {
    assert_eq!(x.kind(), TreeKind::G);
    let n = measure.model().n_steps;
    let mut worst = 0.0f64;
    for k in 0..n {
        for (i, &mass) in measure.g_masses(k).iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let (prefix, status) = split_g_index(k, i);
            let ch = measure.children(k, prefix, status);
            let next = ch.mean(|c| x.at(k + 1, c.index));
            worst = worst.max((next - x.at(k, i)).abs());
        }
    }
    worst
}

/// Largest `|E_P[X_{k+1} | F_k] - X_k|` for an F-process.
pub fn f_martingale_residual(x: &AdaptedProcess, model: &LatticeModel) -> f64 {
    assert_eq!(x.kind(), TreeKind::F);
    let p = model.up_prob;
    let mut worst = 0.0f64;
    for k in 0..model.n_steps {
        for prefix in 0..1usize << k {
            let next = (1.0 - p) * x.at(k + 1, prefix) + p * x.at(k + 1, prefix | (1 << k));
            worst = worst.max((next - x.at(k, prefix)).abs());
        }
    }
    worst
}

/// Largest `|E[ΔB^τ_{k+1} | G_k]|` over positive-mass G-nodes.
pub fn girsanov_residual(measure: &Measure) -> f64 {
    let n = measure.model().n_steps;
    let mut worst = 0.0f64;
    for k in 0..n {
        for (i, &mass) in measure.g_masses(k).iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let (prefix, status) = split_g_index(k, i);
            let ch = measure.children(k, prefix, status);
            worst = worst.max(ch.mean(|c| c.db).abs());
        }
    }
    worst
}

const MARTINGALE_TOL: f64 = 1e-10;

/// Discrete form of the operator mapping an (F, P)-martingale to a
/// (G, P)-martingale stopped at default:
/// `Δ𝒯_k = ΔM_k 1_{τ ≥ t_k} (1 - Δm_k / G̃_k)`.
pub fn operator_t(m_proc: &AdaptedProcess, bundle: &AzemaBundle) -> Result<AdaptedProcess> {
    let model = &bundle.model;
    let n = model.n_steps;
    if m_proc.kind() != TreeKind::F || m_proc.n_steps() != n {
        return Err(Error::Shape("operator_t expects an F-process on the model".into()));
    }
    let scale = 1.0f64.max(m_proc.max_abs());
    let resid = f_martingale_residual(m_proc, model);
    if resid > MARTINGALE_TOL * scale {
        return Err(Error::Precondition(format!(
            "input is not an (F, P)-martingale (residual {resid:e})"
        )));
    }
    let mut t = AdaptedProcess::zeros(TreeKind::G, n);
    t.set(0, 0, m_proc.at(0, 0));
    for k in 0..n {
        for prefix in 0..1usize << k {
            for bit in 0..2usize {
                let c = prefix | (bit << k);
                let dm_big = m_proc.at(k + 1, c) - m_proc.at(k, prefix);
                let dm_small = bundle.g_tilde.at(k + 1, c) - bundle.g.at(k, prefix);
                let inc = dm_big - dm_big * dm_small / bundle.g_tilde.at(k + 1, c);
                let base = t.g(k, prefix, 0);
                t.set(k + 1, g_index(k + 1, c, 0), base + inc);
                t.set(k + 1, g_index(k + 1, c, k + 1), base + inc);
                for s in 1..=k {
                    let v = t.g(k, prefix, s);
                    t.set(k + 1, g_index(k + 1, c, s), v);
                }
            }
        }
    }
    Ok(t)
}

/// Orthogonal decomposition `ΔX = Z ΔB^τ + ΔM` of a stopped martingale.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// Integrand stored at the node where it is known (step k for ΔX_{k+1}).
    pub z: AdaptedProcess,
    pub m_orth: AdaptedProcess,
}

pub fn martingale_decompose(x: &AdaptedProcess, measure: &Measure) -> Result<Decomposition> {
    let model = *measure.model();
    let n = model.n_steps;
    if x.kind() != TreeKind::G || x.n_steps() != n {
        return Err(Error::Shape("martingale_decompose expects a G-process on the model".into()));
    }
    let scale = 1.0f64.max(x.max_abs());
    let mut z = AdaptedProcess::zeros(TreeKind::G, n);
    let mut m = AdaptedProcess::zeros(TreeKind::G, n);
    for k in 0..n {
        for (i, &mass) in measure.g_masses(k).iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let (prefix, status) = split_g_index(k, i);
            let ch = measure.children(k, prefix, status);
            let xk = x.at(k, i);
            let drift = ch.mean(|c| x.at(k + 1, c.index)) - xk;
            if drift.abs() > MARTINGALE_TOL * scale {
                return Err(Error::Precondition(format!(
                    "not a martingale at step {k}, node {i} (drift {drift:e})"
                )));
            }
            let zk = if status == 0 {
                ch.mean(|c| (x.at(k + 1, c.index) - xk) * c.db) / ch.mean(|c| c.db * c.db)
            } else {
                for c in ch.iter() {
                    if (x.at(k + 1, c.index) - xk).abs() > MARTINGALE_TOL * scale {
                        return Err(Error::Precondition(format!(
                            "process moves after default at step {}, node {}",
                            k + 1,
                            c.index
                        )));
                    }
                }
                0.0
            };
            z.set(k, i, zk);
            let mk = m.at(k, i);
            for c in ch.iter() {
                m.set(k + 1, c.index, mk + x.at(k + 1, c.index) - xk - zk * c.db);
            }
        }
    }
    Ok(Decomposition { z, m_orth: m })
}

/// Largest `|E_Q[ΔM ΔB^τ | G_k]|` of a G-process against the walk.
pub fn orthogonality_residual(m_proc: &AdaptedProcess, measure: &Measure) -> f64 {
    let n = measure.model().n_steps;
    let mut worst = 0.0f64;
    for k in 0..n {
        for (i, &mass) in measure.g_masses(k).iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let (prefix, status) = split_g_index(k, i);
            let ch = measure.children(k, prefix, status);
            let mk = m_proc.at(k, i);
            worst = worst.max(ch.mean(|c| (m_proc.at(k + 1, c.index) - mk) * c.db).abs());
        }
    }
    worst
}
