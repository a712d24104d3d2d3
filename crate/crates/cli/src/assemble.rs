//! Turns a [`Scenario`] into core objects, attaching field paths to the
//! errors the core raises.

use std::sync::Arc;

use drbsde_core::dynkin::GameSpec;
use drbsde_core::filtration::{
    build_azema, build_model, reweight_to_q, AdaptedProcess, AzemaBundle, DefaultLaw, HazardRule, LatticeConfig,
    LatticeModel, Measure, Observation, TreeKind,
};
use drbsde_core::solver::{DRBSDEProblem, DriverSpec, Terminal};
use drbsde_core::Error;

use crate::error::CliError;
use crate::scenario::{DefaultSpec, DriverForm, IncrementSpec, Observe, Rule, RunKind, Scenario};

pub struct Lattice {
    pub model: LatticeModel,
    pub law: DefaultLaw,
    pub bundle: AzemaBundle,
    pub q: Arc<Measure>,
}

pub fn lattice(s: &Scenario, n_steps: usize, dt: f64) -> Result<Lattice, CliError> {
    let model = build_model(&LatticeConfig {
        n_steps,
        dt,
        increment: s.model.increment,
        up_prob: s.model.up_prob,
    })
    .map_err(CliError::core("model"))?;
    let law = default_law(s, &model)?;
    let bundle = build_azema(&model, &law).map_err(CliError::core("default"))?;
    let q = Arc::new(reweight_to_q(&bundle).map_err(CliError::core("default"))?);
    Ok(Lattice { model, law, bundle, q })
}

pub fn base_lattice(s: &Scenario) -> Result<Lattice, CliError> {
    lattice(s, s.model.n_steps, s.model.dt)
}

fn default_law(s: &Scenario, model: &LatticeModel) -> Result<DefaultLaw, CliError> {
    let ctx = format!("default ({})", s.default.kind());
    match &s.default {
        DefaultSpec::None => Ok(DefaultLaw::none(model)),
        DefaultSpec::Deterministic(h) => DefaultLaw::deterministic(model, h).map_err(CliError::core(ctx)),
        DefaultSpec::Hazard {
            base,
            slope,
            observe,
            max_prob,
        } => {
            let rule = HazardRule {
                base: *base,
                slope: *slope,
                observe: match observe {
                    Observe::Current => Observation::Current,
                    Observe::Terminal => Observation::Terminal,
                },
                max_prob: *max_prob,
            };
            DefaultLaw::hazard(model, &rule).map_err(CliError::core(ctx))
        }
        DefaultSpec::Table(rows) => DefaultLaw::from_table(model, rows).map_err(CliError::core(ctx)),
        DefaultSpec::Cox(rule) => {
            let rule = rule.clone();
            DefaultLaw::cox(model, move |t, b| rule.eval(t, b)).map_err(CliError::core(ctx))
        }
    }
}

pub fn process(model: &LatticeModel, rule: &Rule) -> AdaptedProcess {
    AdaptedProcess::from_state_fn(model, |t, x| rule.eval(t, x))
}

pub fn driver(s: &Scenario, model: &LatticeModel) -> DriverSpec {
    let n = model.n_steps;
    match &s.driver {
        DriverForm::Zero => DriverSpec::zero(n),
        DriverForm::Generator(g) => DriverSpec::generator(process(model, g)),
        DriverForm::Linear { r, theta, g } => DriverSpec::linear(
            AdaptedProcess::constant(TreeKind::F, n, *r),
            AdaptedProcess::constant(TreeKind::F, n, *theta),
            g.as_ref().map(|g| process(model, g)),
        ),
    }
}

fn describe(rule: &Option<Rule>) -> String {
    rule.as_ref().map_or("absent".into(), |r| r.to_string())
}

/// Names the scenario fields behind a hypothesis failure.
fn hypothesis_context(s: &Scenario, e: &Error) -> String {
    match e {
        Error::Hypothesis { name: "H3", .. } => format!(
            "barriers.lower / barriers.upper (lower: {}, upper: {})",
            describe(&s.lower),
            describe(&s.upper)
        ),
        Error::Hypothesis { name: "H1", .. } => format!(
            "terminal / barriers (terminal: {}, lower: {}, upper: {})",
            s.terminal,
            describe(&s.lower),
            describe(&s.upper)
        ),
        Error::Hypothesis { name: "penalty", .. } => "game.xi1 / game.xi2".into(),
        Error::Hypothesis { name: "game-ordering", .. } => "game.q / barriers".into(),
        Error::Config(_) => "beta".into(),
        _ => "problem".into(),
    }
}

pub fn problem(s: &Scenario, lat: &Lattice) -> Result<DRBSDEProblem, CliError> {
    let m = &lat.model;
    DRBSDEProblem::new(
        lat.q.clone(),
        Terminal::from_zeta(process(m, &s.terminal)),
        driver(s, m),
        s.lower.as_ref().map(|r| process(m, r)),
        s.upper.as_ref().map(|r| process(m, r)),
        s.beta,
    )
    .map_err(|e| CliError::Core {
        context: hypothesis_context(s, &e),
        source: e,
    })
}

pub fn game(s: &Scenario, lat: &Lattice) -> Result<GameSpec, CliError> {
    let g = s.game.as_ref().ok_or_else(|| CliError::Parse(vec!["game: missing".into()]))?;
    let m = &lat.model;
    let (Some(lower), Some(upper)) = (&s.lower, &s.upper) else {
        return Err(CliError::Parse(vec!["barriers: a game needs both barriers.lower and barriers.upper".into()]));
    };
    GameSpec::new(
        lat.q.clone(),
        process(m, lower),
        process(m, upper),
        process(m, &g.q),
        process(m, &g.xi1),
        process(m, &g.xi2),
        driver(s, m),
    )
    .map_err(|e| CliError::Core {
        context: hypothesis_context(s, &e),
        source: e,
    })
}

/// Builds everything the run kind needs without solving.
pub fn validate(s: &Scenario) -> Result<(), CliError> {
    match s.run {
        RunKind::ExampleBs => Ok(()),
        RunKind::McSolve => {
            if !matches!(s.default, DefaultSpec::None | DefaultSpec::Cox(_)) {
                return Err(CliError::Parse(vec![format!(
                    "default.kind: mc-solve supports none and cox, got {}",
                    s.default.kind()
                )]));
            }
            if s.mc.increments == IncrementSpec::TwoPoint || s.mc.enumerate || s.mc.compare_tree {
                let lat = base_lattice(s)?;
                problem(s, &lat)?;
            }
            Ok(())
        }
        RunKind::DynkinOracle | RunKind::SaddleVerify => {
            let lat = base_lattice(s)?;
            game(s, &lat).map(|_| ())
        }
        RunKind::LinkCheck => {
            if !matches!(s.driver, DriverForm::Zero | DriverForm::Generator(_)) {
                return Err(CliError::Parse(vec![
                    "driver.kind: the first link needs a driver free of (y, z) (zero or generator)".into(),
                ]));
            }
            let lat = base_lattice(s)?;
            problem(s, &lat).map(|_| ())
        }
        RunKind::TreeSolve | RunKind::Penalize => {
            let lat = base_lattice(s)?;
            problem(s, &lat).map(|_| ())
        }
    }
}
