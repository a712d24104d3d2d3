use drbsde_core::montecarlo::{
    apply_cox_default, black_scholes_example, bs_call_price, lsmc_solve_drbsde, simulate_paths, state_fn,
    time_fn, tree_batch, BsConfig, CoxIntensity, DefaultTreatment, LsmcConfig, McModel, McProblem,
    Reflection, RegressionBasis,
};
use drbsde_core::filtration::{build_azema, reweight_to_q, AdaptedProcess, DefaultLaw, LatticeModel};
use drbsde_core::solver::{solve_drbsde, DRBSDEProblem, DriverSpec, Terminal};
use std::sync::Arc;

#[test]
fn terminal_moments_within_clt_bands() {
    let n = 100_000usize;
    let b = simulate_paths(&McModel::brownian(4, 1.0), n, 5).unwrap();
    let bt: Vec<f64> = (0..n).map(|i| b.b_at(i, 4)).collect();
    let mean = bt.iter().sum::<f64>() / n as f64;
    let var = bt.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() < 5.0 * (1.0 / n as f64).sqrt());
    // Var of the sample variance of N(0, 1) is 2/n.
    assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let model = McModel::brownian(6, 1.0);
    let cox = CoxIntensity::new(|_, b| 0.5 * (1.0 + b.tanh()));
    let solve = || {
        let b = apply_cox_default(&simulate_paths(&model, 20_000, 9).unwrap(), &cox);
        let p = McProblem::bsde(state_fn(|_, x| x.max(0.0)))
            .with_barriers(Some(state_fn(|_, x| 0.5 * x)), None);
        (b.clone(), lsmc_solve_drbsde(&b, &p, &LsmcConfig::new(RegressionBasis::Polynomial(3))).unwrap())
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(solve);
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(solve);
    assert_eq!(one, four);
}

#[test]
fn state_dependent_cox_survival_matches_pathwise_average() {
    let n = 100_000usize;
    let cox = CoxIntensity::new(|_, b| 0.5 * (1.0 + b.tanh()));
    let batch = apply_cox_default(&simulate_paths(&McModel::brownian(20, 1.0), n, 17).unwrap(), &cox);
    let emp = batch.survival_curve();
    let expected = cox.expected_survival(&batch);
    for k in [5, 10, 20] {
        let p = expected[k];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((emp[k] - p).abs() < 5.0 * se, "k={k}: {} vs {p}", emp[k]);
    }
}

#[test]
fn sampled_two_point_paths_agree_with_the_tree() {
    let lat = LatticeModel::new(3, 1.0 / 3.0).unwrap();
    let bundle = build_azema(&lat, &DefaultLaw::none(&lat)).unwrap();
    let q = Arc::new(reweight_to_q(&bundle).unwrap());
    let zeta = |_: f64, x: f64| (x - 0.1).max(0.0);
    let zt = AdaptedProcess::from_state_fn(&lat, zeta);
    let p = DRBSDEProblem::new(q, Terminal::from_zeta(zt.clone()), DriverSpec::zero(3), Some(zt.map(|z| z - 0.05)), None, 4.0)
        .unwrap();
    let exact = solve_drbsde(&p).unwrap().y0();
    let model = McModel::from_lattice(&lat);
    let batch = simulate_paths(&model, 50_000, 3).unwrap();
    let mp = McProblem::bsde(state_fn(zeta)).with_barriers(Some(state_fn(move |t, x| zeta(t, x) - 0.05)), None);
    let est = lsmc_solve_drbsde(&batch, &mp, &LsmcConfig::new(RegressionBasis::Saturated)).unwrap();
    assert!(est.z_score(exact) < 3.0, "{est:?} vs {exact}");
    // Full enumeration is exact.
    let tb = tree_batch(&model).unwrap();
    let cfg = LsmcConfig { ridge: 0.0, ..LsmcConfig::new(RegressionBasis::Saturated) };
    assert!((lsmc_solve_drbsde(&tb, &mp, &cfg).unwrap().value - exact).abs() < 1e-12);
}

#[test]
fn penalized_estimates_approach_the_reflected_one() {
    let batch = simulate_paths(&McModel::brownian(8, 1.0), 20_000, 21).unwrap();
    let base = McProblem::bsde(state_fn(|_, x| x))
        .with_barriers(Some(state_fn(|t, _| -0.3 + 0.1 * t)), Some(state_fn(|_, _| 0.4)));
    let cfg = LsmcConfig::new(RegressionBasis::Polynomial(3));
    let reflected = lsmc_solve_drbsde(&batch, &base, &cfg).unwrap().value;
    let gaps: Vec<f64> = [1.0, 10.0, 100.0, 1000.0]
        .iter()
        .map(|&n| {
            let p = base.clone().with_reflection(Reflection::Penalized(n));
            (lsmc_solve_drbsde(&batch, &p, &cfg).unwrap().value - reflected).abs()
        })
        .collect();
    assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "{gaps:?}");
    assert!(gaps[3] < 1e-2, "{gaps:?}");
}

#[test]
fn piecewise_volatility_uses_integrated_variance() {
    let mut c = BsConfig::constant(0.05, 0.05, 0.2, 100.0, 100.0, 1.0);
    c.sigma = time_fn(|t| if t > 0.5 { 0.3 } else { 0.2 });
    let est = black_scholes_example(&c).unwrap();
    let target = bs_call_price(100.0, 100.0, 0.05, 0.5 * 0.04 + 0.5 * 0.09, 1.0);
    assert!(est.z_score(target) < 3.0, "{est:?} vs {target}");
}

#[test]
fn zero_strike_returns_spot() {
    let mut c = BsConfig::constant(0.05, 0.05, 0.2, 100.0, 0.0, 1.0);
    c.n_paths = 50_000;
    let est = black_scholes_example(&c).unwrap();
    assert!(est.z_score(100.0) < 3.0, "{est:?}");
}

#[test]
fn killed_claim_is_cheaper() {
    let mut c = BsConfig::constant(0.05, 0.05, 0.2, 100.0, 100.0, 1.0);
    c.n_paths = 50_000;
    let alive = black_scholes_example(&c).unwrap().value;
    c.intensity = Some(CoxIntensity::constant(0.5));
    let killed = black_scholes_example(&c).unwrap();
    // Constant intensity independent of S: value scales by e^{-λT}.
    let target = alive * (-0.5f64).exp();
    assert!(killed.value < alive);
    assert!((killed.value - target).abs() < 5.0 * killed.std_error, "{killed:?} vs {target}");
}

#[test]
fn integrated_and_sampled_default_agree() {
    let model = McModel::brownian(10, 1.0);
    let cox = CoxIntensity::new(|_, b| 0.3 + 0.2 * b.tanh());
    let batch = apply_cox_default(&simulate_paths(&model, 100_000, 31).unwrap(), &cox);
    let base = McProblem::bsde(state_fn(|t, x| if t >= 1.0 - 1e-12 { 1.0 + x } else { 0.4 }));
    let cfg = LsmcConfig::new(RegressionBasis::Polynomial(3));
    let sampled = lsmc_solve_drbsde(&batch, &base, &cfg).unwrap();
    let integrated = lsmc_solve_drbsde(&batch, &base.with_treatment(DefaultTreatment::Integrated(cox)), &cfg).unwrap();
    assert!((sampled.value - integrated.value).abs() < 5.0 * sampled.std_error, "{sampled:?} {integrated:?}");
}
