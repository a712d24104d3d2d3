//! Random lattice instances shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use drbsde_core::filtration::{
    build_azema, build_model, reweight_to_q, AdaptedProcess, AzemaBundle, DefaultLaw, HazardRule,
    LatticeConfig, LatticeModel, Measure, Observation, TreeKind,
};
use drbsde_core::solver::{DRBSDEProblem, DriverSpec, Terminal};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct Instance {
    pub model: LatticeModel,
    pub law: DefaultLaw,
    pub bundle: AzemaBundle,
    pub q: Arc<Measure>,
    pub label: String,
}

pub fn random_model(r: &mut ChaCha8Rng, n: usize, dt_range: (f64, f64)) -> LatticeModel {
    build_model(&LatticeConfig {
        n_steps: n,
        dt: r.random_range(dt_range.0..dt_range.1),
        increment: None,
        up_prob: Some(r.random_range(0.3..0.7)),
    })
    .unwrap()
}

/// Cycles through path-dependent tables, look-ahead hazards, Cox laws,
/// deterministic laws and no default.
pub fn random_law(r: &mut ChaCha8Rng, model: &LatticeModel, kind: usize) -> (DefaultLaw, &'static str) {
    let n = model.n_steps;
    match kind % 5 {
        0 => {
            let rows: Vec<Vec<f64>> = (0..model.n_paths())
                .map(|_| {
                    let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.01..1.0)).collect();
                    let tail = r.random_range(0.2..0.8);
                    let s: f64 = raw.iter().sum();
                    let mut row: Vec<f64> = raw.iter().map(|x| x / s * (1.0 - tail)).collect();
                    row.push(tail);
                    row
                })
                .collect();
            (DefaultLaw::from_table(model, &rows).unwrap(), "table")
        }
        1 => {
            let rule = HazardRule::new(r.random_range(0.2..1.0), r.random_range(-0.8..0.8), Observation::Terminal);
            (DefaultLaw::hazard(model, &rule).unwrap(), "hazard-terminal")
        }
        2 => {
            let a = r.random_range(0.1..1.0);
            (DefaultLaw::cox(model, move |_, b| a * (1.0 + b.tanh())).unwrap(), "cox")
        }
        3 => {
            let h: Vec<f64> = (0..n).map(|_| r.random_range(0.0..0.5 / n as f64)).collect();
            (DefaultLaw::deterministic(model, &h).unwrap(), "deterministic")
        }
        _ => (DefaultLaw::none(model), "none"),
    }
}

pub fn instance(model: LatticeModel, law: DefaultLaw, label: &str) -> Instance {
    let bundle = build_azema(&model, &law).unwrap();
    let q = Arc::new(reweight_to_q(&bundle).unwrap());
    Instance {
        model,
        law,
        bundle,
        q,
        label: label.to_string(),
    }
}

pub fn random_instance(r: &mut ChaCha8Rng, n: usize, kind: usize, dt_range: (f64, f64)) -> Instance {
    let model = random_model(r, n, dt_range);
    let (law, label) = random_law(r, &model, kind);
    instance(model, law, &format!("{label}/N={n}"))
}

pub fn random_f(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> AdaptedProcess {
    let mut p = AdaptedProcess::zeros(TreeKind::F, n);
    for k in 0..=n {
        for x in p.step_mut(k).iter_mut() {
            *x = r.random_range(lo..hi);
        }
    }
    p
}

/// `ζ = a + bB + ct` on the tree.
pub fn affine_zeta(model: &LatticeModel, a: f64, b: f64, c: f64) -> AdaptedProcess {
    AdaptedProcess::from_state_fn(model, |t, x| a + b * x + c * t)
}

#[derive(Clone, Copy, Debug)]
pub enum DriverChoice {
    Zero,
    Generator,
    Linear,
}

pub struct ProblemData {
    pub zeta: AdaptedProcess,
    pub lower: AdaptedProcess,
    pub upper: AdaptedProcess,
    pub driver: DriverSpec,
}

/// Barriers `ζ - a ≤ ζ ≤ ζ + b` with `a, b` random and often small, so
/// both reflections bind somewhere.
pub fn random_data(r: &mut ChaCha8Rng, model: &LatticeModel, driver: DriverChoice) -> ProblemData {
    let n = model.n_steps;
    let zeta = affine_zeta(model, r.random_range(-0.5..0.5), r.random_range(-1.0..1.0), r.random_range(-0.5..0.5));
    let lo_gap = random_f(r, n, 0.0, 0.3);
    let hi_gap = random_f(r, n, 0.01, 0.3);
    let lower = zeta.zip_with(&lo_gap, |z, a| z - a);
    let upper = zeta.zip_with(&hi_gap, |z, b| z + b);
    let driver = match driver {
        DriverChoice::Zero => DriverSpec::zero(n),
        DriverChoice::Generator => DriverSpec::generator(random_f(r, n, -1.0, 1.0)),
        DriverChoice::Linear => DriverSpec::linear_constant(n, r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)),
    };
    ProblemData {
        zeta,
        lower,
        upper,
        driver,
    }
}

pub fn problem(q: &Arc<Measure>, d: &ProblemData, barriers: bool) -> DRBSDEProblem {
    let (l, u) = if barriers {
        (Some(d.lower.clone()), Some(d.upper.clone()))
    } else {
        (None, None)
    };
    DRBSDEProblem::new(q.clone(), Terminal::from_zeta(d.zeta.clone()), d.driver.clone(), l, u, 4.0).unwrap()
}
