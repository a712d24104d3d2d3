mod common;

use common::*;
use drbsde_core::filtration::{
    atom_g_index, conditional_expectation, g_index, prefix_mask, AdaptedProcess, DefaultLaw, LatticeModel,
    RandomVariable, TreeKind,
};
use drbsde_core::solver::{solve_drbsde, DRBSDEProblem, DriverSpec, Terminal};
use proptest::prelude::*;

/// Brute-force `E[x | G_k]` by summing atoms node by node.
fn brute_conditional(inst: &Instance, x: &RandomVariable, k: usize) -> Vec<(usize, f64)> {
    let n = inst.model.n_steps;
    let size = (1usize << k) * (k + 1);
    let mut num = vec![0.0; size];
    let mut den = vec![0.0; size];
    for path in 0..inst.model.n_paths() {
        for o in 0..=n {
            let w = inst.q.weight(path, o);
            let i = atom_g_index(k, path, o);
            num[i] += w * x.get(n, path, o);
            den[i] += w;
        }
    }
    (0..size).filter(|&i| den[i] > 0.0).map(|i| (i, num[i] / den[i])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conditional_expectation_matches_atom_sums(seed in 0u64..10_000, n in 1usize..6, kind in 0usize..5) {
        let mut r = rng(seed);
        let inst = random_instance(&mut r, n, kind, (0.05, 0.5));
        let vals = random_f(&mut r, n, -1.0, 1.0);
        let x = RandomVariable::from_fn(&inst.model, |path, o| {
            let stop = if o == 0 { n } else { o };
            vals.f(stop, path & prefix_mask(stop)) + o as f64
        });
        for k in 0..=n {
            let proj = conditional_expectation(&x, k, TreeKind::G, &inst.q).unwrap();
            for (i, v) in brute_conditional(&inst, &x, k) {
                prop_assert!((proj.get(i).unwrap() - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn q_is_a_probability_measure(seed in 0u64..10_000, n in 1usize..7, kind in 0usize..5) {
        let mut r = rng(seed);
        let inst = random_instance(&mut r, n, kind, (0.05, 0.5));
        prop_assert!((inst.q.total_mass() - 1.0).abs() < 1e-12);
        prop_assert!(inst.q.weights().iter().all(|w| *w >= 0.0));
    }
}

/// `Y_k = min(U, max(L, E[Y_{k+1} | F_k]))` computed directly from the
/// up/down probabilities of a default-free tree.
fn double_obstacle(model: &LatticeModel, zeta: &AdaptedProcess, l: &AdaptedProcess, u: &AdaptedProcess) -> Vec<Vec<f64>> {
    let n = model.n_steps;
    let p = model.up_prob;
    let mut y: Vec<Vec<f64>> = (0..=n).map(|k| vec![0.0; 1 << k]).collect();
    y[n] = zeta.step(n).to_vec();
    for k in (0..n).rev() {
        for prefix in 0..1usize << k {
            let up = y[k + 1][prefix | (1 << k)];
            let down = y[k + 1][prefix];
            let c = p * up + (1.0 - p) * down;
            y[k][prefix] = c.max(l.f(k, prefix)).min(u.f(k, prefix));
        }
    }
    y
}

#[test]
fn default_free_zero_driver_matches_double_obstacle_recursion() {
    let mut r = rng(5);
    for n in 1..=8 {
        let inst = random_instance(&mut r, n, 4, (0.05, 0.5));
        let d = random_data(&mut r, &inst.model, DriverChoice::Zero);
        let p = problem(&inst.q, &d, true);
        let sol = solve_drbsde(&p).unwrap();
        let oracle = double_obstacle(&inst.model, &d.zeta, &d.lower, &d.upper);
        for k in 0..=n {
            for prefix in 0..1usize << k {
                let got = sol.y.at(k, g_index(k, prefix, 0));
                assert!((got - oracle[k][prefix]).abs() < 1e-13, "N={n} k={k}");
            }
        }
    }
}

#[test]
fn linear_driver_discounts_constant_claims() {
    let model = LatticeModel::new(7, 0.1).unwrap();
    let inst = instance(model, DefaultLaw::none(&model), "none");
    let p = DRBSDEProblem::bsde(
        inst.q.clone(),
        Terminal::from_zeta(AdaptedProcess::constant(TreeKind::F, 7, 3.0)),
        DriverSpec::linear_constant(7, 0.2, 0.4),
    )
    .unwrap();
    let y0 = solve_drbsde(&p).unwrap().y0();
    assert!((y0 - 3.0 * (1.0 - 0.02f64).powi(7)).abs() < 1e-14);
}

#[test]
fn certain_default_at_first_step_pays_recovery() {
    let model = LatticeModel::new(3, 0.2).unwrap();
    let law = DefaultLaw::deterministic(&model, &[1.0 - 1e-9, 0.0, 0.0]).unwrap();
    let inst = instance(model, law, "early");
    let surv = AdaptedProcess::constant(TreeKind::F, 3, 10.0);
    let rec = AdaptedProcess::from_state_fn(&model, |_, b| b);
    let p = DRBSDEProblem::bsde(inst.q.clone(), Terminal::split(surv, rec), DriverSpec::zero(3)).unwrap();
    let y0 = solve_drbsde(&p).unwrap().y0();
    // Recovery B_1 has mean zero; survival contributes at most 1e-8.
    assert!(y0.abs() < 1e-7, "{y0}");
}
