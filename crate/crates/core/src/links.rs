//! Data transforms and numerical checks relating the G-tree problem under `Q`
//! to F-tree problems under `P`.
//!
//! First link: with a driver free of `(y, z)`, the F-tree problem with data
//! `ξ^F = 𝓔̃_N ζ_N`, `g^F = 𝓔̃ g`, barriers `𝓔̃ L`, `𝓔̃ U` and the extra term
//! `ζ ΔV^F` (`V^F = 1 - 𝓔̃`) satisfies `Y^F = 𝓔̃ Y` before default.
//!
//! Second link: with a deterministic default law (`Q = P`, τ independent of
//! the walk) the F-projection of the G-solution solves a reflected recursion
//! on the F-tree with the projected data.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filtration::{
    g_index, prefix_mask, project_to_f, reweight_to_q, AdaptedProcess,
    AzemaBundle, LatticeModel, Measure, TreeKind,
};
use crate::solver::{DRBSDEProblem, DRBSDESolution, DriverKind};

/// Transformed data of the first link. All processes live on the F-tree.
#[derive(Clone, Debug, PartialEq)]
pub struct FLinkData {
    /// `𝓔̃_N ζ_N` per terminal path.
    pub xi_f: Vec<f64>,
    pub g_f: AdaptedProcess,
    pub lower_f: Option<AdaptedProcess>,
    pub upper_f: Option<AdaptedProcess>,
    /// `V^F = 1 - 𝓔̃`.
    pub v_f: AdaptedProcess,
    /// `ζ_k ΔV^F_k` at step k (zero at step 0).
    pub zeta_dv: AdaptedProcess,
}

pub fn transform_first_link(problem: &DRBSDEProblem, bundle: &AzemaBundle) -> Result<FLinkData> {
    let model = bundle.model;
    let n = model.n_steps;
    if problem.model() != &model {
        return Err(Error::Shape("problem and bundle use different models".into()));
    }
    if !problem.driver.is_yz_free() {
        return Err(Error::Hypothesis {
            name: "first-link",
            detail: "driver depends on (y, z)".into(),
        });
    }
    let et = &bundle.e_tilde;
    let g = AdaptedProcess::from_fn_f(n, |k, p| problem.driver.generator_value(k, p).unwrap_or(0.0));
    let g_f = g.zip_with(et, |a, b| a * b);
    let scale = |x: &Option<AdaptedProcess>| x.as_ref().map(|x| x.zip_with(et, |a, b| a * b));
    let xi_f = (0..model.n_paths())
        .map(|path| et.at(n, path) * problem.terminal.survival.at(n, path))
        .collect();
    let v_f = et.map(|e| 1.0 - e);
    let zeta_dv = AdaptedProcess::from_fn_f(n, |k, p| {
        problem.terminal.recovery.at(k, p) * bundle.delta_v(k, p)
    });
    Ok(FLinkData {
        xi_f,
        g_f,
        lower_f: scale(&problem.lower_f),
        upper_f: scale(&problem.upper_f),
        v_f,
        zeta_dv,
    })
}

/// Reflected recursion on the F-tree under the reference measure:
/// `Y^F_k = clamp(E[Y^F_{k+1} + ζ_{k+1} ΔV^F_{k+1} | F_k] + g^F_k Δ, L^F_k, U^F_k)`.
pub fn solve_f_drbsde(fdata: &FLinkData, model: &LatticeModel) -> Result<DRBSDESolution> {
    let n = model.n_steps;
    if fdata.xi_f.len() != model.n_paths() || fdata.g_f.n_steps() != n {
        return Err(Error::Shape("link data does not match the model".into()));
    }
    let p = model.up_prob;
    let dt = model.dt;
    let var = model.step_variance();
    let mut y = AdaptedProcess::zeros(TreeKind::F, n);
    let mut z = AdaptedProcess::zeros(TreeKind::F, n);
    let mut pred = AdaptedProcess::zeros(TreeKind::F, n);
    let mut pp = AdaptedProcess::zeros(TreeKind::F, n);
    let mut pm = AdaptedProcess::zeros(TreeKind::F, n);
    for path in 0..model.n_paths() {
        let xi = fdata.xi_f[path];
        let l = fdata.lower_f.as_ref().map(|x| x.at(n, path));
        let u = fdata.upper_f.as_ref().map(|x| x.at(n, path));
        if l.is_some_and(|l| xi < l) || u.is_some_and(|u| xi > u) {
            return Err(Error::Hypothesis {
                name: "H1",
                detail: format!("transformed terminal {xi} outside barriers on path {path}"),
            });
        }
        y.set(n, path, xi);
        pred.set(n, path, xi);
    }
    for k in (0..n).rev() {
        for prefix in 0..1usize << k {
            let up = prefix | (1 << k);
            let w_down = y.at(k + 1, prefix) + fdata.zeta_dv.at(k + 1, prefix);
            let w_up = y.at(k + 1, up) + fdata.zeta_dv.at(k + 1, up);
            let mean = (1.0 - p) * w_down + p * w_up;
            let zk = ((1.0 - p) * (w_down - mean) * model.down_move()
                + p * (w_up - mean) * model.up_move())
                / var;
            let a = mean + fdata.g_f.at(k, prefix) * dt;
            let l = fdata.lower_f.as_ref().map(|x| x.at(k, prefix));
            let u = fdata.upper_f.as_ref().map(|x| x.at(k, prefix));
            let (yk, kp, km) = match (l, u) {
                (Some(l), _) if a < l => (l, l - a, 0.0),
                (_, Some(u)) if a > u => (u, 0.0, a - u),
                _ => (a, 0.0, 0.0),
            };
            y.set(k, prefix, yk);
            z.set(k, prefix, zk);
            pred.set(k, prefix, mean);
            pp.set(k, prefix, kp);
            pm.set(k, prefix, km);
        }
    }
    let mut k_plus = AdaptedProcess::zeros(TreeKind::F, n);
    let mut k_minus = AdaptedProcess::zeros(TreeKind::F, n);
    let mut m = AdaptedProcess::zeros(TreeKind::F, n);
    for k in 0..n {
        for prefix in 0..1usize << k {
            for bit in 0..2usize {
                let c = prefix | (bit << k);
                k_plus.set(k + 1, c, k_plus.at(k, prefix) + pp.at(k, prefix));
                k_minus.set(k + 1, c, k_minus.at(k, prefix) + pm.at(k, prefix));
                let w = y.at(k + 1, c) + fdata.zeta_dv.at(k + 1, c);
                let dm = w - pred.at(k, prefix) - z.at(k, prefix) * model.step_move(bit == 1);
                m.set(k + 1, c, m.at(k, prefix) + dm);
            }
        }
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
        warnings: Vec::new(),
    })
}

/// Errors of the first-link identities on one tree.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkReport {
    /// max over alive nodes of `|Y_k 𝓔̃_k - Y^F_k|`.
    pub max_abs_error: f64,
    /// `(step, prefix, error)` per alive node.
    pub per_node_errors: Vec<(usize, usize, f64)>,
    /// max of `|ΔK^±_{k+1} - ΔK^{F,±}_{k+1} / 𝓔̃_k|`.
    pub k_transport_error: f64,
    /// max of `|ΔM_{k+1} - (ζ_{k+1} - Y_{k+1}) ΔN^G_{k+1}|` over edges.
    pub jump_identity_error: f64,
    /// `(Δ, error, node_count)` rows when produced by a refinement sweep.
    pub convergence_table: Vec<(f64, f64, usize)>,
}

pub fn verify_first_link(
    g_sol: &DRBSDESolution,
    f_sol: &DRBSDESolution,
    bundle: &AzemaBundle,
) -> Result<LinkReport> {
    let model = bundle.model;
    let n = model.n_steps;
    if g_sol.y.kind() != TreeKind::G
        || f_sol.y.kind() != TreeKind::F
        || g_sol.y.n_steps() != n
        || f_sol.y.n_steps() != n
    {
        return Err(Error::Shape("solutions do not match the bundle's model".into()));
    }
    let et = &bundle.e_tilde;
    let mut per_node = Vec::new();
    let mut max_err = 0.0f64;
    let mut k_err = 0.0f64;
    let mut jump_err = 0.0f64;
    for k in 0..=n {
        for prefix in 0..1usize << k {
            let i = g_index(k, prefix, 0);
            let e = (g_sol.y.at(k, i) * et.at(k, prefix) - f_sol.y.at(k, prefix)).abs();
            per_node.push((k, prefix, e));
            max_err = max_err.max(e);
            if k == n {
                continue;
            }
            let e_k = et.at(k, prefix);
            k_err = k_err
                .max((g_sol.push_plus.at(k, i) - f_sol.push_plus.at(k, prefix) / e_k).abs())
                .max((g_sol.push_minus.at(k, i) - f_sol.push_minus.at(k, prefix) / e_k).abs());
            let m_k = g_sol.m.at(k, i);
            for bit in 0..2usize {
                let c = prefix | (bit << k);
                let pi = bundle.q.at(k + 1, c) / bundle.g_tilde.at(k + 1, c);
                let alive = g_index(k + 1, c, 0);
                let dead = g_index(k + 1, c, k + 1);
                let gap = g_sol.y.at(k + 1, dead) - g_sol.y.at(k + 1, alive);
                jump_err = jump_err.max((g_sol.m.at(k + 1, alive) - m_k + gap * pi).abs());
                if pi > 0.0 {
                    jump_err = jump_err
                        .max((g_sol.m.at(k + 1, dead) - m_k - gap * (1.0 - pi)).abs());
                }
            }
        }
    }
    Ok(LinkReport {
        max_abs_error: max_err,
        per_node_errors: per_node,
        k_transport_error: k_err,
        jump_identity_error: jump_err,
        convergence_table: Vec::new(),
    })
}

/// Solves both sides of the first link for one problem and compares them.
/// The problem's measure must be the `Q` of `bundle`.
pub fn run_first_link(problem: &DRBSDEProblem, bundle: &AzemaBundle) -> Result<LinkReport> {
    let g_sol = crate::solver::solve_drbsde(problem)?;
    let fdata = transform_first_link(problem, bundle)?;
    let f_sol = solve_f_drbsde(&fdata, &bundle.model)?;
    verify_first_link(&g_sol, &f_sol, bundle)
}

/// One row of a refinement sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementRow {
    pub n_steps: usize,
    pub dt: f64,
    pub max_error: f64,
    pub k_transport_error: f64,
    pub jump_identity_error: f64,
    pub node_count: usize,
}

/// Runs the first link on every level; `build(N)` returns the problem and
/// bundle for an `N`-step tree over a fixed horizon.
pub fn first_link_refinement<F>(levels: &[usize], build: F) -> Result<Vec<RefinementRow>>
where
    F: Fn(usize) -> Result<(DRBSDEProblem, AzemaBundle)> + Sync,
{
    levels
        .par_iter()
        .map(|&n| {
            let (problem, bundle) = build(n)?;
            let r = run_first_link(&problem, &bundle)?;
            Ok(RefinementRow {
                n_steps: n,
                dt: bundle.model.dt,
                max_error: r.max_abs_error,
                k_transport_error: r.k_transport_error,
                jump_identity_error: r.jump_identity_error,
                node_count: r.per_node_errors.len(),
            })
        })
        .collect()
}

/// Whether each level's error is at most `slack` times the previous one,
/// errors below `floor` counting as zero.
pub fn refinement_decreasing(rows: &[RefinementRow], slack: f64, floor: f64) -> bool {
    let clip = |e: f64| if e < floor { 0.0 } else { e };
    rows.windows(2)
        .all(|w| clip(w[1].max_error) <= slack * clip(w[0].max_error))
}

/// Both sides of `E_Q[X_{T∧τ}] = E_P[𝓔̃_N X_N + Σ_k X_k ΔV^F_k]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferReport {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_error: f64,
    /// `E_P[max_k X_k]`, an upper bound for nonnegative `X`.
    pub bound: f64,
    pub bound_holds: bool,
}

/// Evaluates the transfer identity for an F-adapted `x`.
pub fn transfer_identity(x: &AdaptedProcess, bundle: &AzemaBundle, q: &Measure) -> TransferReport {
    let model = bundle.model;
    let n = model.n_steps;
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut bound = 0.0;
    for path in 0..model.n_paths() {
        for o in 0..=n {
            let w = q.weight(path, o);
            if w > 0.0 {
                let stop = if o == 0 { n } else { o };
                lhs += w * x.at(stop, path & prefix_mask(stop));
            }
        }
        let pp = model.prefix_prob(path, n);
        let mut acc = bundle.e_tilde.at(n, path) * x.at(n, path);
        let mut sup = f64::NEG_INFINITY;
        for k in 0..=n {
            let pf = path & prefix_mask(k);
            acc += x.at(k, pf) * bundle.delta_v(k, pf);
            sup = sup.max(x.at(k, pf));
        }
        rhs += pp * acc;
        bound += pp * sup;
    }
    TransferReport {
        lhs,
        rhs,
        abs_error: (lhs - rhs).abs(),
        bound,
        bound_holds: lhs <= bound * (1.0 + 1e-12) + 1e-15,
    }
}

/// Inputs of [`verify_integrability_transfer`].
#[derive(Clone, Copy, Debug)]
pub struct TransferInputs<'a> {
    pub zeta: &'a AdaptedProcess,
    pub g: Option<&'a AdaptedProcess>,
    pub lower: Option<&'a AdaptedProcess>,
    pub upper: Option<&'a AdaptedProcess>,
    pub beta: f64,
    pub alpha_sq: &'a AdaptedProcess,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferSuite {
    /// `X = e^{β𝒜} ζ²`
    pub zeta: TransferReport,
    /// `X_k = Σ_{j<k} e^{β𝒜_j} (g_j / α_j)² Δ`
    pub driver: Option<TransferReport>,
    /// `X_k = max_{j≤k} e^{2β𝒜_j} (L_j⁺)²`
    pub lower: Option<TransferReport>,
    /// `X_k = max_{j≤k} e^{2β𝒜_j} (U_j⁻)²`
    pub upper: Option<TransferReport>,
}

impl TransferSuite {
    pub fn max_error(&self) -> f64 {
        [Some(self.zeta), self.driver, self.lower, self.upper]
            .iter()
            .flatten()
            .map(|r| r.abs_error)
            .fold(0.0, f64::max)
    }
}

pub fn verify_integrability_transfer(
    inputs: &TransferInputs<'_>,
    bundle: &AzemaBundle,
) -> Result<TransferSuite> {
    let model = bundle.model;
    let n = model.n_steps;
    let dt = model.dt;
    let q = reweight_to_q(bundle)?;
    let mut acc = AdaptedProcess::zeros(TreeKind::F, n);
    for k in 1..=n {
        for p in 0..1usize << k {
            let parent = p & prefix_mask(k - 1);
            acc.set(k, p, acc.at(k - 1, parent) + inputs.alpha_sq.at(k - 1, parent) * dt);
        }
    }
    let beta = inputs.beta;
    let x_zeta = AdaptedProcess::from_fn_f(n, |k, p| {
        (beta * acc.at(k, p)).exp() * inputs.zeta.at(k, p).powi(2)
    });
    let running = |g: &AdaptedProcess| {
        let mut x = AdaptedProcess::zeros(TreeKind::F, n);
        for k in 1..=n {
            for p in 0..1usize << k {
                let j = p & prefix_mask(k - 1);
                let term = (beta * acc.at(k - 1, j)).exp() * g.at(k - 1, j).powi(2)
                    / inputs.alpha_sq.at(k - 1, j)
                    * dt;
                x.set(k, p, x.at(k - 1, j) + term);
            }
        }
        x
    };
    let running_max = |part: &dyn Fn(f64) -> f64, b: &AdaptedProcess| {
        let mut x = AdaptedProcess::zeros(TreeKind::F, n);
        for k in 0..=n {
            for p in 0..1usize << k {
                let here = (2.0 * beta * acc.at(k, p)).exp() * part(b.at(k, p)).powi(2);
                let prev = if k == 0 {
                    0.0
                } else {
                    x.at(k - 1, p & prefix_mask(k - 1))
                };
                x.set(k, p, prev.max(here));
            }
        }
        x
    };
    let plus = |v: f64| v.max(0.0);
    let minus = |v: f64| (-v).max(0.0);
    Ok(TransferSuite {
        zeta: transfer_identity(&x_zeta, bundle, &q),
        driver: inputs.g.map(|g| transfer_identity(&running(g), bundle, &q)),
        lower: inputs
            .lower
            .map(|l| transfer_identity(&running_max(&plus, l), bundle, &q)),
        upper: inputs
            .upper
            .map(|u| transfer_identity(&running_max(&minus, u), bundle, &q)),
    })
}

/// Upper bound imposed on `ϖ = Σ κ Δ` for linear drivers in the second link.
pub const VARPI_MAX: f64 = 5.0;

/// Projected processes and residuals of the second link.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondLinkReport {
    pub y_hat: AdaptedProcess,
    pub z_hat: AdaptedProcess,
    /// Integrand of the projected orthogonal part `E[M_k | F_k]`.
    pub theta: AdaptedProcess,
    pub k_plus_hat: AdaptedProcess,
    pub k_minus_hat: AdaptedProcess,
    /// Projected driver term `E[f 1_{τ > t_k} | F_k]` computed from F data.
    pub driver_hat: AdaptedProcess,
    pub balance_error: f64,
    pub edge_error: f64,
    pub lower_violation: f64,
    pub upper_violation: f64,
    /// `ΔK̂⁺ · E[(Y - L) 1_{τ > t_k} | F_k]`
    pub skorokhod_plus: f64,
    pub skorokhod_minus: f64,
    /// Diagnostic: `ΔK̂⁺ (Ŷ - L̂)` with the full projected gap.
    pub full_gap_skorokhod_plus: f64,
    pub full_gap_skorokhod_minus: f64,
    pub varpi_max: f64,
}

impl SecondLinkReport {
    /// Largest residual among balance, ordering and projected Skorokhod.
    pub fn max_error(&self) -> f64 {
        self.balance_error
            .max(self.edge_error)
            .max(self.lower_violation)
            .max(self.upper_violation)
            .max(self.skorokhod_plus)
            .max(self.skorokhod_minus)
    }
}

pub fn project_second_link(
    g_sol: &DRBSDESolution,
    bundle: &AzemaBundle,
    problem: &DRBSDEProblem,
) -> Result<SecondLinkReport> {
    let model = bundle.model;
    let n = model.n_steps;
    let dt = model.dt;
    if !bundle.law.is_deterministic() {
        return Err(Error::Hypothesis {
            name: "independence",
            detail: "second link needs a deterministic default law".into(),
        });
    }
    let driver = &problem.driver;
    let mut varpi_max = 0.0f64;
    match &driver.kind {
        DriverKind::Zero | DriverKind::Generator(_) => {}
        DriverKind::Linear { r, .. } => {
            for path in 0..model.n_paths() {
                let s: f64 = (0..n).map(|k| r.at(k, path & prefix_mask(k)).abs() * dt).sum();
                varpi_max = varpi_max.max(s);
            }
            if varpi_max > VARPI_MAX {
                return Err(Error::Hypothesis {
                    name: "bounded-varpi",
                    detail: format!("Σ κ Δ = {varpi_max} exceeds {VARPI_MAX}"),
                });
            }
        }
        DriverKind::General(_) => {
            return Err(Error::Hypothesis {
                name: "second-link",
                detail: "driver must be free of (y, z) or linear".into(),
            })
        }
    }
    let measure = &problem.measure;
    let y_hat = project_to_f(&g_sol.y, measure);
    let z_hat = project_to_f(&g_sol.z, measure);
    let m_hat = project_to_f(&g_sol.m, measure);
    let pp_hat = project_to_f(&g_sol.push_plus, measure);
    let pm_hat = project_to_f(&g_sol.push_minus, measure);
    let lower_hat = problem.lower().map(|l| project_to_f(l, measure));
    let upper_hat = problem.upper().map(|u| project_to_f(u, measure));

    let f_mass = |k: usize, p: usize| measure.f_mass(k, p);
    let alive_share = |k: usize, p: usize| measure.g_mass(k, g_index(k, p, 0)) / f_mass(k, p);
    // E[ξ 1_{τ ≤ t_k} | F_k] from the terminal data.
    let defaulted_xi = |k: usize, p: usize| {
        let mut acc = 0.0;
        for s in 1..=k {
            let w = measure.g_mass(k, g_index(k, p, s));
            if w > 0.0 {
                acc += w * problem.terminal.value(k, p, s);
            }
        }
        acc / f_mass(k, p)
    };
    let cond_next = |x: &AdaptedProcess, k: usize, p: usize| {
        let up = p | (1 << k);
        let (wd, wu) = (f_mass(k + 1, p), f_mass(k + 1, up));
        (wd * x.at(k + 1, p) + wu * x.at(k + 1, up)) / (wd + wu)
    };

    let mut driver_hat = AdaptedProcess::zeros(TreeKind::F, n);
    let mut theta = AdaptedProcess::zeros(TreeKind::F, n);
    let mut k_plus_hat = AdaptedProcess::zeros(TreeKind::F, n);
    let mut k_minus_hat = AdaptedProcess::zeros(TreeKind::F, n);
    let mut balance = 0.0f64;
    let mut edge = 0.0f64;
    let mut lo_v = 0.0f64;
    let mut up_v = 0.0f64;
    let mut sk_p = 0.0f64;
    let mut sk_m = 0.0f64;
    let mut full_p = 0.0f64;
    let mut full_m = 0.0f64;
    for k in 0..=n {
        for p in 0..1usize << k {
            let yh = y_hat.at(k, p);
            if let Some(l) = &lower_hat {
                lo_v = lo_v.max(l.at(k, p) - yh);
            }
            if let Some(u) = &upper_hat {
                up_v = up_v.max(yh - u.at(k, p));
            }
            if k == n {
                continue;
            }
            let share = alive_share(k, p);
            let next = cond_next(&y_hat, k, p);
            let dh = match &driver.kind {
                DriverKind::Linear { r, theta: th, g } => {
                    let alive_pred = next - defaulted_xi(k, p);
                    let gk = g.as_ref().map_or(0.0, |g| g.at(k, p));
                    -r.at(k, p) * alive_pred - th.at(k, p) * z_hat.at(k, p) + share * gk
                }
                _ => share * driver.generator_value(k, p).unwrap_or(0.0),
            };
            driver_hat.set(k, p, dh);
            let kp = pp_hat.at(k, p);
            let km = pm_hat.at(k, p);
            balance = balance.max((yh - (next + dh * dt + kp - km)).abs());

            let up = p | (1 << k);
            let (wd, wu) = (f_mass(k + 1, p), f_mass(k + 1, up));
            let (dd, du) = (model.down_move(), model.up_move());
            let dm_d = m_hat.at(k + 1, p) - m_hat.at(k, p);
            let dm_u = m_hat.at(k + 1, up) - m_hat.at(k, p);
            let var = (wd * dd * dd + wu * du * du) / (wd + wu);
            let th = (wd * dm_d * dd + wu * dm_u * du) / (wd + wu) / var;
            theta.set(k, p, th);
            let integrand = z_hat.at(k, p) + th;
            edge = edge
                .max((y_hat.at(k + 1, p) - next - integrand * dd).abs())
                .max((y_hat.at(k + 1, up) - next - integrand * du).abs());

            let alive = g_index(k, p, 0);
            let y_alive = g_sol.y.at(k, alive);
            if let (Some(l), Some(lh)) = (problem.lower(), &lower_hat) {
                sk_p = sk_p.max((kp * share * (y_alive - l.at(k, alive))).abs());
                full_p = full_p.max((kp * (yh - lh.at(k, p))).abs());
            }
            if let (Some(u), Some(uh)) = (problem.upper(), &upper_hat) {
                sk_m = sk_m.max((km * share * (u.at(k, alive) - y_alive)).abs());
                full_m = full_m.max((km * (uh.at(k, p) - yh)).abs());
            }
            for c in [p, up] {
                k_plus_hat.set(k + 1, c, k_plus_hat.at(k, p) + kp);
                k_minus_hat.set(k + 1, c, k_minus_hat.at(k, p) + km);
            }
        }
    }
    // Sanity: the projected orthogonal part stays a martingale.
    for k in 0..n {
        for p in 0..1usize << k {
            let e = (cond_next(&m_hat, k, p) - m_hat.at(k, p)).abs();
            edge = edge.max(e);
        }
    }
    Ok(SecondLinkReport {
        y_hat,
        z_hat,
        theta,
        k_plus_hat,
        k_minus_hat,
        driver_hat,
        balance_error: balance,
        edge_error: edge,
        lower_violation: lo_v.max(0.0),
        upper_violation: up_v.max(0.0),
        skorokhod_plus: sk_p,
        skorokhod_minus: sk_m,
        full_gap_skorokhod_plus: full_p,
        full_gap_skorokhod_minus: full_m,
        varpi_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtration::{build_azema, DefaultLaw};
    use crate::solver::{solve_drbsde, DriverSpec, Terminal};
    use std::sync::Arc;

    fn setup(model: &LatticeModel, law: &DefaultLaw) -> (AzemaBundle, Arc<Measure>) {
        let b = build_azema(model, law).unwrap();
        let q = Arc::new(reweight_to_q(&b).unwrap());
        (b, q)
    }

    #[test]
    fn no_default_transform_is_identity() {
        let model = LatticeModel::new(3, 0.5).unwrap();
        let (b, q) = setup(&model, &DefaultLaw::none(&model));
        let zeta = AdaptedProcess::from_state_fn(&model, |_, x| x);
        let p = DRBSDEProblem::bsde(q, Terminal::from_zeta(zeta.clone()), DriverSpec::zero(3)).unwrap();
        let d = transform_first_link(&p, &b).unwrap();
        assert_eq!(d.v_f.max_abs(), 0.0);
        for path in 0..8 {
            assert_eq!(d.xi_f[path], zeta.at(3, path));
        }
    }

    #[test]
    fn single_step_transform() {
        let model = LatticeModel::new(1, 1.0).unwrap();
        let law = DefaultLaw::deterministic(&model, &[0.5]).unwrap();
        let (b, q) = setup(&model, &law);
        let zeta = AdaptedProcess::constant(TreeKind::F, 1, 3.0);
        let p = DRBSDEProblem::bsde(q, Terminal::from_zeta(zeta), DriverSpec::zero(1)).unwrap();
        let d = transform_first_link(&p, &b).unwrap();
        assert_eq!(d.xi_f, vec![1.5, 1.5]);
        assert_eq!(b.delta_v(1, 0), 0.5);
        assert_eq!(d.zeta_dv.at(1, 1), 1.5);
    }

    #[test]
    fn linear_driver_rejected_by_first_link() {
        let model = LatticeModel::new(2, 0.5).unwrap();
        let (b, q) = setup(&model, &DefaultLaw::none(&model));
        let zeta = AdaptedProcess::constant(TreeKind::F, 2, 1.0);
        let p = DRBSDEProblem::bsde(q, Terminal::from_zeta(zeta), DriverSpec::linear_constant(2, 0.1, 0.0))
            .unwrap();
        assert!(matches!(
            transform_first_link(&p, &b),
            Err(Error::Hypothesis { name: "first-link", .. })
        ));
    }

    #[test]
    fn unit_terminal_telescopes() {
        let model = LatticeModel::new(3, 0.5).unwrap();
        let law = DefaultLaw::deterministic(&model, &[0.1, 0.2, 0.3]).unwrap();
        let (b, q) = setup(&model, &law);
        let zeta = AdaptedProcess::constant(TreeKind::F, 3, 1.0);
        let p = DRBSDEProblem::bsde(q, Terminal::from_zeta(zeta), DriverSpec::zero(3)).unwrap();
        let d = transform_first_link(&p, &b).unwrap();
        let s = solve_f_drbsde(&d, &model).unwrap();
        assert!((s.y.at(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn transfer_with_unit_integrand() {
        let model = LatticeModel::new(3, 0.5).unwrap();
        let law = DefaultLaw::hazard(
            &model,
            &crate::filtration::HazardRule::new(0.4, 0.5, crate::filtration::Observation::Terminal),
        )
        .unwrap();
        let (b, _) = setup(&model, &law);
        let one = AdaptedProcess::constant(TreeKind::F, 3, 1.0);
        let suite = verify_integrability_transfer(
            &TransferInputs {
                zeta: &one,
                g: None,
                lower: None,
                upper: None,
                beta: 0.0,
                alpha_sq: &one,
            },
            &b,
        )
        .unwrap();
        assert!((suite.zeta.lhs - 1.0).abs() < 1e-14);
        assert!((suite.zeta.rhs - 1.0).abs() < 1e-14);
    }

    #[test]
    fn second_link_needs_deterministic_law() {
        let model = LatticeModel::new(2, 0.5).unwrap();
        let law = DefaultLaw::from_table(
            &model,
            &[
                vec![0.1, 0.1, 0.8],
                vec![0.2, 0.1, 0.7],
                vec![0.1, 0.3, 0.6],
                vec![0.0, 0.1, 0.9],
            ],
        )
        .unwrap();
        let (b, q) = setup(&model, &law);
        let zeta = AdaptedProcess::constant(TreeKind::F, 2, 1.0);
        let p = DRBSDEProblem::bsde(q, Terminal::from_zeta(zeta), DriverSpec::zero(2)).unwrap();
        let s = solve_drbsde(&p).unwrap();
        assert!(matches!(
            project_second_link(&s, &b, &p),
            Err(Error::Hypothesis { name: "independence", .. })
        ));
    }
}
