use evcharge_core::kernel::{ctmc_oracle_row, overload_mass};
use evcharge_core::synthesis::{
    asymptotic_rate, build_rate_table, interpolate_policy, linearized_deadband_policy, solve_rate_for_state, SynthesisSpec,
};

fn oracle_tail(m: usize, n_cap: usize, lambda_tau: f64, mu_tau: f64) -> f64 {
    ctmc_oracle_row(m, lambda_tau, mu_tau, n_cap + 60).unwrap().dist.mass_at_or_above(n_cap)
}

#[test]
fn table_entries_match_uniformization_bisection() {
    let spec = SynthesisSpec::new(20, 1e-4, 0.05).unwrap();
    let table = build_rate_table(&spec).unwrap();
    for (m, &rate) in table.rates().iter().enumerate() {
        let (mut lo, mut hi) = (0.0, 25.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if oracle_tail(m, 20, mid, 0.05) > 1e-4 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert!((rate - oracle).abs() <= 1e-9 * oracle.max(1.0), "n={m}: {rate} vs {oracle}");
    }
}

#[test]
fn state_zero_root_matches_grid_scan() {
    let spec = SynthesisSpec::new(10, 1e-3, 0.01).unwrap();
    let root = solve_rate_for_state(0, &spec).unwrap();
    let mass = |x: f64| overload_mass(0, spec.capacity(), &spec.params(x).unwrap()).unwrap();
    let mut step = 1.0;
    let mut x = 0.0;
    while step > 1e-11 {
        while mass(x + step) <= 1e-3 {
            x += step;
        }
        step /= 10.0;
    }
    assert!((root - x).abs() <= 1e-9, "{root} vs {x}");
}

#[test]
fn rates_increase_with_budget_and_shrink_with_interval() {
    let n_cap = 60;
    let at = |p: f64, mu: f64| build_rate_table(&SynthesisSpec::new(n_cap, p, mu).unwrap()).unwrap();
    let loose = at(1e-3, 0.01);
    let tight = at(1e-6, 0.01);
    let long = at(1e-3, 0.1);
    for n in 0..n_cap {
        assert!(loose.rate(n) > tight.rate(n));
        assert!(loose.rate(n) <= (n_cap - n) as f64);
        assert!(long.rate(n) <= (n_cap - n) as f64);
    }
}

#[test]
fn tight_budget_table_shape_and_deadband_crossing() {
    let spec = SynthesisSpec::new(100, 1e-10, 0.001).unwrap();
    let table = build_rate_table(&spec).unwrap();
    let r = table.rates();
    assert!(r.windows(2).all(|w| w[1] < w[0]));
    assert!(r.iter().enumerate().all(|(n, &x)| x > 0.0 && x <= (100 - n) as f64));
    let crossing = linearized_deadband_policy(&table).unwrap().zero_crossing();
    assert!((60.0..=80.0).contains(&crossing), "crossing {crossing}");
}

#[test]
fn continuation_stays_convex_on_fine_grid() {
    let spec = SynthesisSpec::new(100, 1e-10, 0.001).unwrap();
    let policy = interpolate_policy(&build_rate_table(&spec).unwrap()).unwrap();
    let h = 100.0 / 10_000.0;
    let ys: Vec<f64> = (0..=10_000).map(|i| policy.eval(i as f64 * h)).collect();
    for (i, w) in ys.windows(3).enumerate() {
        let second = w[0] - 2.0 * w[1] + w[2];
        assert!(second >= -1e-9 * w[0].max(1e-3), "x={}: {second:e}", (i + 1) as f64 * h);
    }
    for w in ys.windows(2) {
        assert!(w[1] <= w[0]);
    }
}

#[test]
fn leading_order_estimate_brackets_state_zero() {
    let spec = SynthesisSpec::new(100, 1e-10, 0.001).unwrap();
    let solved = solve_rate_for_state(0, &spec).unwrap();
    let estimate = asymptotic_rate(0, &spec).unwrap();
    assert_eq!(estimate.rate, 0.0);
    assert!(!estimate.within_validity);
    assert!(estimate.rate <= solved && solved <= 100.0);
}

#[test]
fn leading_order_delta_within_factor_two() {
    let spec = SynthesisSpec::new(100, 1e-10, 0.001).unwrap();
    let solved = 100.0 - solve_rate_for_state(0, &spec).unwrap();
    let estimate = 100.0 - asymptotic_rate(0, &spec).unwrap().unclamped;
    let ratio = solved / estimate;
    assert!((0.5..=2.0).contains(&ratio), "solved/estimated headroom ratio {ratio}");
}

#[test]
fn leading_order_headroom_ratio_settles() {
    for mu_tau in [0.01, 0.001] {
        let ratios: Vec<f64> = [100usize, 300, 1000]
            .iter()
            .map(|&n_cap| {
                let spec = SynthesisSpec::new(n_cap, 1e-4, mu_tau).unwrap();
                let n = n_cap / 2;
                let solved = (n_cap - n) as f64 - solve_rate_for_state(n, &spec).unwrap();
                let estimate = (n_cap - n) as f64 - asymptotic_rate(n, &spec).unwrap().unclamped;
                solved / estimate
            })
            .collect();
        assert!(ratios.iter().all(|r| (0.2..0.5).contains(r)), "{ratios:?}");
        assert!((ratios[2] - ratios[1]).abs() < (ratios[1] - ratios[0]).abs(), "{ratios:?}");
    }
}
