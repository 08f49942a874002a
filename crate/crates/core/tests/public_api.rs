use kelly_ou_core::kelly::{fraction_from_excess, growth_rate, kelly_fraction};
use kelly_ou_core::market::independent_market;
use kelly_ou_core::structure::{
    bidiagonal_limit_expected_total_fraction, bidiagonal_limit_oracle, build_sigma,
    triangular_fractions,
};
use kelly_ou_core::wealth::simulate_path;
use kelly_ou_core::{
    DVector, MarketParams, MarketState, PathPlan, StrategySpec, StructureKind, WealthScheme,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn example_market() -> MarketParams {
    independent_market(&[0.5], &[0.2], &[0.1], 0.03, &[10.0]).unwrap()
}

#[test]
fn single_asset_fraction() {
    let p = example_market();
    let s = MarketState::initial(&p);
    let f = kelly_fraction(&p, &s);
    assert!((f.as_vector()[0] - 1.44829814).abs() < 1e-8);
    assert!(!f.is_pseudo());
    // r + ½θ² at the optimum
    let g = growth_rate(&p, &s, &f);
    assert!((g - (0.03 + 0.5 * 0.144829814f64.powi(2))).abs() < 1e-9);
}

#[test]
fn triangular_shortcut_agrees_with_solver() {
    let sigma = 0.3;
    let n = 5;
    let s = build_sigma(StructureKind::Triangular { n, sigma }).unwrap();
    let p = MarketParams::new(
        DVector::zeros(n),
        DVector::zeros(n),
        s,
        0.0,
        DVector::from_element(n, 1.0),
    )
    .unwrap();
    let c = DVector::from_vec(vec![0.02, -0.01, 0.05, 0.0, 0.03]);
    let general = fraction_from_excess(&p, &c);
    let c_hat: Vec<f64> = c.iter().map(|ci| ci / (sigma * sigma)).collect();
    let shortcut = triangular_fractions(&c_hat).unwrap();
    let diff = (general.as_vector() - shortcut.as_vector()).amax();
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn bidiagonal_limits() {
    for n in 2..=9 {
        let exact = bidiagonal_limit_expected_total_fraction(n).unwrap();
        let value = *exact.numer() as f64 / *exact.denom() as f64;
        let oracle = bidiagonal_limit_oracle(n, 0.2).unwrap();
        assert!((value - oracle).abs() < 1e-10, "n={n}");
    }
}

#[test]
fn cash_path_grows_at_the_rate() {
    let p = example_market();
    let plan = PathPlan::new(2.0, 40, 3.0).unwrap();
    let prop = p.propagator(plan.dt()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let out = simulate_path(
        &p,
        &prop,
        &StrategySpec::Cash,
        &plan,
        WealthScheme::BudgetIdentity,
        &mut rng,
    )
    .unwrap();
    let log_v = out.terminal_log_wealth.unwrap();
    assert!((log_v - (3f64.ln() + 0.03 * 2.0)).abs() < 1e-14);
    assert_eq!(out.bankrupt_step, None);
}
