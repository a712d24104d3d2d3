//! Executes one scenario: solves, checks, and renders CSV artifacts and a
//! summary. Nothing here depends on wall-clock time, so artifacts are
//! byte-identical across runs.

use std::fmt::Write as _;

use drbsde_core::dynkin::{brute_force_value, perturb_early, saddle_from_solution, verify_saddle, Theta};
use drbsde_core::filtration::split_g_index;
use drbsde_core::links::{first_link_refinement, project_second_link, refinement_decreasing};
use drbsde_core::montecarlo::{
    apply_cox_default, bs_call_price, black_scholes_example, lsmc_solve_drbsde, simulate_paths, state_fn, time_fn,
    tree_batch, BsConfig, CoxIntensity, DefaultTreatment, LsmcConfig, McModel, McProblem, RegressionBasis,
};
use drbsde_core::solver::{
    check_solution, solve_drbsde, solve_penalized, DRBSDESolution, PenaltyMode,
};

use crate::assemble::{self, Lattice};
use crate::error::CliError;
use crate::scenario::{BasisSpec, DefaultSpec, DriverForm, IncrementSpec, PenaltyModeSpec, RunKind, Scenario};

/// Floats in artifacts carry 12 significant digits.
pub fn fmt_f(x: f64) -> String {
    format!("{x:.11e}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub measured: f64,
    pub tol: f64,
}

impl Check {
    fn le(name: &'static str, measured: f64, tol: f64) -> Self {
        Self {
            name,
            pass: measured <= tol,
            measured,
            tol,
        }
    }

    fn flag(name: &'static str, ok: bool) -> Self {
        Self {
            name,
            pass: ok,
            measured: if ok { 0.0 } else { 1.0 },
            tol: 0.0,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} measured={} tol={}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            fmt_f(self.measured),
            fmt_f(self.tol)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub scenario: String,
    pub kind: RunKind,
    pub headline: (&'static str, f64),
    pub checks: Vec<Check>,
    /// `(file name, contents)`
    pub files: Vec<(String, String)>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario: {}", self.scenario);
        let _ = writeln!(s, "run: {}", self.kind);
        let _ = writeln!(s, "{} = {}", self.headline.0, fmt_f(self.headline.1));
        for c in &self.checks {
            let _ = writeln!(s, "{}", c.line());
        }
        s
    }
}

struct Csv(String);

impl Csv {
    fn new(header: &str) -> Self {
        Csv(format!("{header}\n"))
    }

    fn row(&mut self, cells: &[String]) {
        self.0.push_str(&cells.join(","));
        self.0.push('\n');
    }
}

pub fn run_scenario(s: &Scenario) -> Result<RunReport, CliError> {
    assemble::validate(s)?;
    let mut report = RunReport {
        scenario: s.name.clone(),
        kind: s.run,
        headline: ("value", f64::NAN),
        checks: Vec::new(),
        files: Vec::new(),
    };
    match s.run {
        RunKind::TreeSolve => tree_solve(s, &mut report)?,
        RunKind::Penalize => penalize(s, &mut report)?,
        RunKind::LinkCheck => link_check(s, &mut report)?,
        RunKind::DynkinOracle => dynkin_oracle(s, &mut report)?,
        RunKind::SaddleVerify => saddle(s, &mut report)?,
        RunKind::McSolve => mc_solve(s, &mut report)?,
        RunKind::ExampleBs => example_bs(s, &mut report)?,
    }
    let summary = report.summary();
    report.files.push((format!("{}_summary.txt", s.name), summary));
    Ok(report)
}

fn solution_csv(lat: &Lattice, sol: &DRBSDESolution) -> String {
    let mut csv = Csv::new("step,prefix,status,y,z,k_plus,k_minus,m");
    for k in 0..=lat.model.n_steps {
        for (i, &w) in lat.q.g_masses(k).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let (prefix, status) = split_g_index(k, i);
            csv.row(&[
                k.to_string(),
                prefix.to_string(),
                status.to_string(),
                fmt_f(sol.y.at(k, i)),
                fmt_f(sol.z.at(k, i)),
                fmt_f(sol.k_plus.at(k, i)),
                fmt_f(sol.k_minus.at(k, i)),
                fmt_f(sol.m.at(k, i)),
            ]);
        }
    }
    csv.0
}

fn tree_solve(s: &Scenario, r: &mut RunReport) -> Result<(), CliError> {
    let lat = assemble::base_lattice(s)?;
    let p = assemble::problem(s, &lat)?;
    let sol = solve_drbsde(&p).map_err(CliError::core("solve"))?;
    let again = solve_drbsde(&p).map_err(CliError::core("solve"))?;
    let c = check_solution(&sol, &p);
    let scale = 1.0 + sol.y.max_abs();
    let t = &s.tol;
    r.headline = ("y0", sol.y0());
    r.checks = vec![
        Check::le("skorokhod-plus", c.skorokhod_plus, t.skorokhod),
        Check::le("skorokhod-minus", c.skorokhod_minus, t.skorokhod),
        Check::le("barrier-order", c.barrier_violation.max(0.0), 0.0),
        Check::le("balance", c.balance, t.balance * scale),
        Check::le("terminal", c.terminal, t.balance * scale),
        Check::flag("k-nondecreasing", c.k_nondecreasing),
        Check::le("m-martingale", c.m_martingale, t.balance * scale),
        Check::flag("deterministic-rerun", again == sol),
    ];
    r.files.push((format!("{}_solution.csv", s.name), solution_csv(&lat, &sol)));
    Ok(())
}

fn penalize(s: &Scenario, r: &mut RunReport) -> Result<(), CliError> {
    let lat = assemble::base_lattice(s)?;
    let p = assemble::problem(s, &lat)?;
    let exact = solve_drbsde(&p).map_err(CliError::core("solve"))?;
    let mode = match s.penalize.mode {
        PenaltyModeSpec::Lower => PenaltyMode::Lower,
        PenaltyModeSpec::Upper => PenaltyMode::Upper,
        PenaltyModeSpec::Double => PenaltyMode::Double,
    };
    let mut csv = Csv::new("n,max_error,y0");
    let mut errs = Vec::new();
    for &n in &s.penalize.levels {
        let sol = solve_penalized(&p, n, mode).map_err(CliError::core(format!("penalize.levels ({n})")))?;
        let e = sol.y.zip_with(&exact.y, |a, b| (a - b).abs()).max_abs();
        csv.row(&[fmt_f(n), fmt_f(e), fmt_f(sol.y0())]);
        errs.push(e);
    }
    let last = *errs.last().unwrap_or(&f64::NAN);
    r.headline = ("final_error", last);
    r.checks = vec![
        Check::flag("penalization-monotone", errs.windows(2).all(|w| w[1] <= w[0])),
        Check::le("penalization-final", last, s.tol.penalty),
    ];
    r.files.push((format!("{}_penalize.csv", s.name), csv.0));
    Ok(())
}

fn link_check(s: &Scenario, r: &mut RunReport) -> Result<(), CliError> {
    let horizon = s.model.n_steps as f64 * s.model.dt;
    let refinable = matches!(s.default, DefaultSpec::None | DefaultSpec::Hazard { .. } | DefaultSpec::Cox(_));
    let levels = if refinable {
        s.links.levels.clone()
    } else {
        vec![s.model.n_steps]
    };
    let rows = first_link_refinement(&levels, |n| {
        let lat = assemble::lattice(s, n, horizon / n as f64).map_err(to_core)?;
        let p = assemble::problem(s, &lat).map_err(to_core)?;
        Ok((p, lat.bundle))
    })
    .map_err(CliError::core("first link"))?;
    let mut csv = Csv::new("n_steps,dt,max_error,k_transport_error,jump_identity_error,node_count");
    for row in &rows {
        csv.row(&[
            row.n_steps.to_string(),
            fmt_f(row.dt),
            fmt_f(row.max_error),
            fmt_f(row.k_transport_error),
            fmt_f(row.jump_identity_error),
            row.node_count.to_string(),
        ]);
    }
    let last = rows.last().map_or(f64::NAN, |x| x.max_error);
    let t = &s.tol;
    r.headline = ("final_error", last);
    r.checks = vec![
        Check::flag("first-link-refinement", refinement_decreasing(&rows, t.link_slack, 1e-12)),
        Check::le("first-link-final", last, t.link_final),
        Check::le(
            "first-link-jump-identity",
            rows.iter().map(|x| x.jump_identity_error).fold(0.0, f64::max),
            t.link,
        ),
    ];
    r.files.push((format!("{}_first_link.csv", s.name), csv.0));

    let lat = assemble::base_lattice(s)?;
    if lat.law.is_deterministic() {
        let p = assemble::problem(s, &lat)?;
        let sol = solve_drbsde(&p).map_err(CliError::core("solve"))?;
        let rep = project_second_link(&sol, &lat.bundle, &p).map_err(CliError::core("second link"))?;
        r.checks.extend([
            Check::le("second-link-balance", rep.balance_error.max(rep.edge_error), t.link),
            Check::le("second-link-barrier-order", rep.lower_violation.max(rep.upper_violation).max(0.0), t.link),
            Check::le("second-link-skorokhod-plus", rep.skorokhod_plus, t.link),
            Check::le("second-link-skorokhod-minus", rep.skorokhod_minus, t.link),
        ]);
        let mut csv = Csv::new("step,prefix,y_hat,z_hat,k_plus_hat,k_minus_hat");
        for k in 0..=lat.model.n_steps {
            for prefix in 0..1usize << k {
                csv.row(&[
                    k.to_string(),
                    prefix.to_string(),
                    fmt_f(rep.y_hat.at(k, prefix)),
                    fmt_f(rep.z_hat.at(k, prefix)),
                    fmt_f(rep.k_plus_hat.at(k, prefix)),
                    fmt_f(rep.k_minus_hat.at(k, prefix)),
                ]);
            }
        }
        r.files.push((format!("{}_second_link.csv", s.name), csv.0));
    }
    Ok(())
}

fn to_core(e: CliError) -> drbsde_core::Error {
    match e {
        CliError::Core { source, .. } => source,
        other => drbsde_core::Error::Config(other.to_string()),
    }
}

fn theta(s: &Scenario) -> Theta {
    Theta::Step(s.game.as_ref().map_or(0, |g| g.theta))
}

fn dynkin_oracle(s: &Scenario, r: &mut RunReport) -> Result<(), CliError> {
    let lat = assemble::base_lattice(s)?;
    let spec = assemble::game(s, &lat)?;
    let rep = brute_force_value(&spec, &theta(s)).map_err(CliError::core("dynkin-oracle"))?;
    let mut csv = Csv::new("step,prefix,status,upper,lower,y,rules_per_player");
    for v in &rep.nodes {
        csv.row(&[
            v.node.step.to_string(),
            v.node.prefix.to_string(),
            v.node.status.to_string(),
            fmt_f(v.upper),
            fmt_f(v.lower),
            fmt_f(v.y),
            v.rules_per_player.to_string(),
        ]);
    }
    let (ul, vy) = rep.max_gap();
    r.headline = ("value", rep.upper);
    r.checks = vec![
        Check::le("game-upper-equals-lower", ul, s.tol.game),
        Check::le("game-value-equals-y", vy, s.tol.game),
    ];
    r.files.push((format!("{}_game.csv", s.name), csv.0));
    Ok(())
}

fn saddle(s: &Scenario, r: &mut RunReport) -> Result<(), CliError> {
    let lat = assemble::base_lattice(s)?;
    let spec = assemble::game(s, &lat)?;
    let th = theta(s);
    let p = spec.problem().map_err(CliError::core("game"))?;
    let sol = solve_drbsde(&p).map_err(CliError::core("solve"))?;
    let pair = saddle_from_solution(&sol, &spec, &th);
    let rep = verify_saddle(&pair, &spec, &th).map_err(CliError::core("saddle-verify"))?;
    let t = &s.tol;
    r.headline = ("pair_value", rep.pair_value);
    r.checks = vec![
        Check::le("saddle-left-inequality", rep.max_left_excess, t.saddle),
        Check::le("saddle-right-inequality", rep.max_right_excess, t.saddle),
        Check::le("saddle-value", rep.value_gap, t.saddle),
        Check::le("strong-martingale-band", rep.band_max_error, t.saddle),
    ];
    if s.game.as_ref().is_some_and(|g| g.negative_control) {
        let early = perturb_early(&pair.0, &spec, &th).map_err(CliError::core("negative control"))?;
        if early != pair.0 {
            let bad = verify_saddle(&(early, pair.1.clone()), &spec, &th).map_err(CliError::core("negative control"))?;
            r.checks.push(Check::flag("saddle-negative-control", !bad.passes(t.saddle)));
        }
    }
    let mut csv = Csv::new("player,step,prefix");
    for (player, rule) in [(1, &pair.0), (2, &pair.1)] {
        for (k, prefix) in rule.nodes() {
            csv.row(&[player.to_string(), k.to_string(), prefix.to_string()]);
        }
    }
    r.files.push((format!("{}_saddle.csv", s.name), csv.0));
    Ok(())
}

fn mc_solve(s: &Scenario, r: &mut RunReport) -> Result<(), CliError> {
    let model = match s.mc.increments {
        IncrementSpec::TwoPoint => McModel::from_lattice(&assemble::base_lattice(s)?.model),
        IncrementSpec::Gaussian => McModel::brownian(s.model.n_steps, s.model.n_steps as f64 * s.model.dt),
    };
    let mut batch = if s.mc.enumerate {
        tree_batch(&model).map_err(CliError::core("mc.enumerate"))?
    } else {
        simulate_paths(&model, s.mc.paths, s.seed).map_err(CliError::core("mc"))?
    };
    let intensity = match &s.default {
        DefaultSpec::Cox(rule) => {
            let rule = rule.clone();
            Some(CoxIntensity::new(move |t, b| rule.eval(t, b)))
        }
        _ => None,
    };
    let treatment = match (&intensity, s.mc.integrated) {
        (Some(c), true) => DefaultTreatment::Integrated(c.clone()),
        (Some(c), false) => {
            batch = apply_cox_default(&batch, c);
            DefaultTreatment::Sampled
        }
        (None, _) => DefaultTreatment::Sampled,
    };
    let rule = |x: &crate::scenario::Rule| {
        let x = x.clone();
        state_fn(move |t, v| x.eval(t, v))
    };
    let mut problem = McProblem::bsde(rule(&s.terminal))
        .with_barriers(s.lower.as_ref().map(rule), s.upper.as_ref().map(rule))
        .with_treatment(treatment);
    match s.driver.clone() {
        DriverForm::Zero => {}
        DriverForm::Generator(g) => problem = problem.with_driver(move |t, x, _, _| g.eval(t, x)),
        DriverForm::Linear { r: rate, theta, g } => {
            problem = problem.with_driver(move |t, x, y, z| -rate * y - theta * z + g.as_ref().map_or(0.0, |g| g.eval(t, x)))
        }
    }
    let basis = match s.mc.basis {
        BasisSpec::Polynomial(d) => RegressionBasis::Polynomial(d),
        BasisSpec::Piecewise(b) => RegressionBasis::Piecewise(b),
        BasisSpec::Saturated => RegressionBasis::Saturated,
    };
    let cfg = LsmcConfig {
        basis,
        ridge: s.mc.ridge,
        bootstrap_reps: s.mc.bootstrap,
        surface: true,
    };
    let est = lsmc_solve_drbsde(&batch, &problem, &cfg).map_err(CliError::core("mc"))?;
    let mut csv = Csv::new("step,y_mean,std_error,alive_paths");
    for row in est.surface.iter().flatten() {
        csv.row(&[row.step.to_string(), fmt_f(row.y_mean), fmt_f(row.std_error), row.alive_paths.to_string()]);
    }
    r.headline = ("y0", est.value);
    r.checks = vec![Check::flag("mc-estimate-finite", est.value.is_finite() && est.std_error >= 0.0)];
    if s.mc.compare_tree {
        let lat = assemble::base_lattice(s)?;
        let p = assemble::problem(s, &lat)?;
        let exact = solve_drbsde(&p).map_err(CliError::core("solve"))?.y0();
        if s.mc.enumerate {
            r.checks.push(Check::le("mc-tree-agreement", (est.value - exact).abs(), s.tol.tree));
        } else {
            r.checks.push(Check::le("mc-tree-agreement", est.z_score(exact), s.tol.std_errors));
        }
    }
    let mut head = Csv::new("value,std_error,n_paths");
    head.row(&[fmt_f(est.value), fmt_f(est.std_error), est.n_paths.to_string()]);
    r.files.push((format!("{}_mc.csv", s.name), head.0));
    r.files.push((format!("{}_mc_surface.csv", s.name), csv.0));
    Ok(())
}

fn example_bs(s: &Scenario, r: &mut RunReport) -> Result<(), CliError> {
    let b = &s.bs;
    let half = b.horizon / 2.0;
    let (sig, late) = (b.sigma, b.sigma_late.unwrap_or(b.sigma));
    let mut cfg = BsConfig::constant(b.r, b.mu, b.sigma, b.s0, b.strike, b.horizon);
    cfg.sigma = time_fn(move |t| if t > half { late } else { sig });
    cfg.sigma_min = b.sigma_min;
    cfg.n_steps = b.steps;
    cfg.n_paths = b.paths;
    cfg.seed = s.seed;
    cfg.basis = RegressionBasis::Polynomial(b.degree);
    if b.intensity > 0.0 {
        cfg.intensity = Some(CoxIntensity::constant(b.intensity));
        let rec = b.recovery;
        cfg.recovery = Some(state_fn(move |_, _| rec));
    }
    let rule = |x: &crate::scenario::Rule| {
        let x = x.clone();
        state_fn(move |t, v| x.eval(t, v))
    };
    if let (Some(l), Some(u)) = (&s.lower, &s.upper) {
        cfg.barriers = Some((rule(l), rule(u)));
    }
    let est = black_scholes_example(&cfg).map_err(CliError::core("bs"))?;
    let total_var = half * sig * sig + (b.horizon - half) * late * late;
    let closed = if s.lower.is_none() && s.upper.is_none() && b.recovery == 0.0 {
        let theta_zero = (b.mu - b.r).abs() < 1e-15;
        theta_zero.then(|| bs_call_price(b.s0, b.strike, b.r, total_var, b.horizon) * (-b.intensity * b.horizon).exp())
    } else {
        None
    };
    let mut csv = Csv::new("value,std_error,n_paths,closed_form,z_score");
    csv.row(&[
        fmt_f(est.value),
        fmt_f(est.std_error),
        est.n_paths.to_string(),
        closed.map_or("".into(), fmt_f),
        closed.map_or("".into(), |c| fmt_f(est.z_score(c))),
    ]);
    r.headline = ("value", est.value);
    r.checks = vec![Check::flag("mc-estimate-finite", est.value.is_finite())];
    if let Some(c) = closed {
        r.checks.push(Check::le("bs-closed-form", est.z_score(c), s.tol.std_errors));
    }
    r.files.push((format!("{}_bs.csv", s.name), csv.0));
    Ok(())
}
