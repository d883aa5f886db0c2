//! Control-policy synthesis.
//!
//! For every non-overloaded state `n < N` the variable-rate policy picks the
//! largest connection rate whose one-interval overload mass equals the budget
//! `P*`. Since the chain starts each interval from some `n < N`, the
//! per-interval overload probability is then at most `P*` whatever the
//! current distribution. The table is continued to real `n` with a
//! shape-preserving quadratic spline, and the fixed point `λ(n*)τ = μτ·n*`
//! of the continuation bounds the stationary mean from below when the
//! continuation is convex and decreasing.

mod estimates;
mod spline;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::kernel::{CircuitCapacity, KernelParams, OverloadTail};

pub use estimates::{
    asymptotic_rate, constant_rate_max_load, relaxation_time_estimate, AsymptoticRate, Protocol,
    RelaxationTime, TimeUnit, ASYMPTOTIC_MIN_HEADROOM,
};
pub use spline::ShapePreservingQuadratic;

/// Relative margin by which the solver stays under the budget, so that the
/// per-state bound holds strictly after rounding.
pub const BUDGET_MARGIN: f64 = 1e-9;
/// Accepted residual `|mass/P* - 1|` of a solved state.
pub const RESIDUAL_TOLERANCE: f64 = 1e-3;
/// Fraction of states used by the linear deadband fit.
pub const DEADBAND_FIT_FRACTION: f64 = 0.6;

/// Capacity, per-interval overload budget and interval length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSpec {
    capacity: CircuitCapacity,
    overload_budget: f64,
    mu_tau: f64,
}

impl SynthesisSpec {
    pub fn new(capacity: usize, overload_budget: f64, mu_tau: f64) -> Result<Self> {
        let capacity = CircuitCapacity::new(capacity)?;
        if !(overload_budget > 0.0 && overload_budget < 1.0) {
            return Err(Error::domain(format!("overload budget must lie in (0, 1), got {overload_budget}")));
        }
        if !mu_tau.is_finite() || mu_tau <= 0.0 {
            return Err(Error::domain(format!("mu_tau must be finite and > 0, got {mu_tau}")));
        }
        Ok(Self {
            capacity,
            overload_budget,
            mu_tau,
        })
    }

    pub fn capacity(&self) -> CircuitCapacity {
        self.capacity
    }

    pub fn n_capacity(&self) -> usize {
        self.capacity.n_capacity()
    }

    pub fn overload_budget(&self) -> f64 {
        self.overload_budget
    }

    pub fn mu_tau(&self) -> f64 {
        self.mu_tau
    }

    pub fn params(&self, lambda_tau: f64) -> Result<KernelParams> {
        KernelParams::new(lambda_tau, self.mu_tau)
    }
}

/// Per-state connection rates `λ(n)τ` for `n = 0..N-1`; the rate is zero for
/// every `n ≥ N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    rates: Vec<f64>,
}

impl RateTable {
    /// Accepts finite, non-negative, nonincreasing rates.
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::domain("rate table needs at least one state"));
        }
        if let Some((n, r)) = rates.iter().enumerate().find(|(_, r)| !r.is_finite() || **r < 0.0) {
            return Err(Error::domain(format!("rate at n={n} is {r}; rates must be finite and >= 0")));
        }
        if let Some(n) = rates.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::NonMonotone { n: n + 1 });
        }
        Ok(Self { rates })
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn capacity(&self) -> CircuitCapacity {
        CircuitCapacity::new(self.rates.len()).expect("table is non-empty")
    }

    pub fn rate(&self, n: usize) -> f64 {
        self.rates.get(n).copied().unwrap_or(0.0)
    }

    /// First interior state `0 < n < N-1` where the rates fail to be convex
    /// beyond a relative rounding allowance.
    pub fn convexity_violation(&self) -> Option<(usize, f64)> {
        let n_cap = self.rates.len();
        (1..n_cap.saturating_sub(1)).find_map(|n| {
            let d2 = self.rate(n - 1) - 2.0 * self.rate(n) + self.rate(n + 1);
            let allowance = 1e-9 * self.rate(n - 1);
            (d2 < -allowance).then_some((n, d2))
        })
    }

    /// Negative second difference at `n = N-1` once the table is closed by
    /// the zero at `n = N`. Departures during an interval keep the last rate
    /// large when `μτ·N` is not small, so this kink can be concave even when
    /// the table itself is convex.
    pub fn closing_kink(&self) -> Option<f64> {
        let n = self.rates.len().checked_sub(1).filter(|&n| n > 0)?;
        let d2 = self.rate(n - 1) - 2.0 * self.rate(n);
        (d2 < -1e-9 * self.rate(n - 1)).then_some(d2)
    }

    pub fn check_convex(&self) -> Result<()> {
        match self.convexity_violation() {
            Some((n, second_difference)) => Err(Error::NonConvex { n, second_difference }),
            None => Ok(()),
        }
    }
}

/// Table continued to real arguments on `[0, N]`, zero beyond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousPolicy {
    table: RateTable,
    spline: ShapePreservingQuadratic,
}

impl ContinuousPolicy {
    pub fn table(&self) -> &RateTable {
        &self.table
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n_cap = self.table.rates.len() as f64;
        if x >= n_cap {
            0.0
        } else if x <= 0.0 {
            self.table.rates[0]
        } else {
            self.spline.eval(x)
        }
    }
}

/// The control law broadcast to the chargers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RatePolicy {
    /// A fixed, preprogrammed rate: `λ₀/μ` equals the stationary mean load.
    Constant { lambda_over_mu: f64 },
    Table(RateTable),
    Continuous(ContinuousPolicy),
}

impl RatePolicy {
    pub fn constant(lambda_over_mu: f64) -> Result<Self> {
        if !lambda_over_mu.is_finite() || lambda_over_mu < 0.0 {
            return Err(Error::domain(format!("lambda/mu must be finite and >= 0, got {lambda_over_mu}")));
        }
        Ok(RatePolicy::Constant { lambda_over_mu })
    }

    /// Expected connections per interval announced in state `n`.
    pub fn lambda_tau_at(&self, n: usize, mu_tau: f64) -> f64 {
        match self {
            RatePolicy::Constant { lambda_over_mu } => lambda_over_mu * mu_tau,
            RatePolicy::Table(t) => t.rate(n),
            RatePolicy::Continuous(c) => c.table.rate(n),
        }
    }

    /// Rate at a real argument; tables are read at `floor(x)`.
    pub fn lambda_tau_at_real(&self, x: f64, mu_tau: f64) -> f64 {
        match self {
            RatePolicy::Constant { lambda_over_mu } => lambda_over_mu * mu_tau,
            RatePolicy::Table(t) => t.rate(x.max(0.0).floor() as usize),
            RatePolicy::Continuous(c) => c.eval(x),
        }
    }

    pub fn capacity(&self) -> Option<CircuitCapacity> {
        match self {
            RatePolicy::Constant { .. } => None,
            RatePolicy::Table(t) => Some(t.capacity()),
            RatePolicy::Continuous(c) => Some(c.table.capacity()),
        }
    }

    pub fn table(&self) -> Option<&RateTable> {
        match self {
            RatePolicy::Constant { .. } => None,
            RatePolicy::Table(t) => Some(t),
            RatePolicy::Continuous(c) => Some(&c.table),
        }
    }
}

/// The rate `λ(n)τ` whose overload mass from state `n` meets the budget,
/// approached from below by [`BUDGET_MARGIN`].
pub fn solve_rate_for_state(n: usize, spec: &SynthesisSpec) -> Result<f64> {
    let n_cap = spec.n_capacity();
    if n >= n_cap {
        return Err(Error::domain(format!("state {n} is not below capacity {n_cap}")));
    }
    let tail = OverloadTail::new(n, n_cap, spec.mu_tau)?;
    let q_per_lambda = spec.params(1.0)?.q();
    let ln_budget = spec.overload_budget.ln();
    let target = ln_budget + (-BUDGET_MARGIN).ln_1p();
    let fail = |reason: String| Error::SolverFailed { n, reason };

    let at_zero = tail.ln_mass(0.0);
    if at_zero > target {
        return Err(Error::Infeasible {
            n,
            mass: at_zero.exp(),
            budget: spec.overload_budget,
        });
    }
    // Residual in u = ln λτ along with its derivative.
    let residual = |u: f64| -> (f64, f64) {
        let q = u.exp() * q_per_lambda;
        let (ln_mass, ln_slope) = tail.ln_mass_and_slope(q);
        (ln_mass - target, q * (ln_slope - ln_mass).exp())
    };

    let headroom = (n_cap - n) as f64;
    let mut hi = (headroom + 10.0 * (n_cap as f64).sqrt()).ln();
    let mut grow = 0;
    while residual(hi).0 <= 0.0 {
        hi += std::f64::consts::LN_2;
        grow += 1;
        if grow > 64 {
            return Err(fail("no upper bracket".into()));
        }
    }
    let mut lo = hi - 2.0;
    while residual(lo).0 >= 0.0 {
        lo -= 4.0;
        if lo < -700.0 {
            return Err(fail("no lower bracket".into()));
        }
    }

    let (mut u, mut converged) = (0.5 * (lo + hi), false);
    for _ in 0..300 {
        let (g, dg) = residual(u);
        if g == 0.0 {
            converged = true;
            break;
        }
        if g < 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        let newton = u - g / dg;
        let next = if dg.is_finite() && dg > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let step = (next - u).abs();
        u = next;
        if step <= 1e-14 * u.abs().max(1.0) || hi - lo <= 1e-13 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(fail(format!("no convergence, bracket [{lo}, {hi}]")));
    }
    // Stay on the feasible side of the budget.
    let (g, dg) = residual(u);
    if g > 0.0 {
        let nudged = u - 2.0 * g / dg;
        u = if dg > 0.0 && residual(nudged).0 <= 0.0 { nudged } else { lo };
    }
    let off = (tail.ln_mass(u.exp() * q_per_lambda) - ln_budget).exp() - 1.0;
    if off.abs() > RESIDUAL_TOLERANCE || off > 0.0 {
        return Err(fail(format!("residual {off:.3e} outside tolerance")));
    }
    Ok(u.exp())
}

/// Solves every state `n < N`; rates must come out strictly decreasing.
pub fn build_rate_table(spec: &SynthesisSpec) -> Result<RateTable> {
    let rates = exec::try_map_indexed(spec.n_capacity(), |n| solve_rate_for_state(n, spec))?;
    if let Some(n) = rates.windows(2).position(|w| w[1] >= w[0]) {
        return Err(Error::NonMonotone { n: n + 1 });
    }
    RateTable::new(rates)
}

/// Continues a table to `[0, N]` through the node `(N, 0)`.
pub fn interpolate_policy(table: &RateTable) -> Result<ContinuousPolicy> {
    let n_cap = table.rates.len();
    let xs: Vec<f64> = (0..=n_cap).map(|n| n as f64).collect();
    let mut ys = table.rates.clone();
    ys.push(0.0);
    let spline = ShapePreservingQuadratic::new(&xs, &ys)?;
    Ok(ContinuousPolicy {
        table: table.clone(),
        spline,
    })
}

/// Fixed point `n*` of `λ(x)τ = μτ·x` and the utilization bound `n*/N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationBound {
    pub n_star: f64,
    pub utilization_lower_bound: f64,
}

pub fn utilization_lower_bound(policy: &RatePolicy, spec: &SynthesisSpec) -> Result<UtilizationBound> {
    let n_cap = spec.n_capacity() as f64;
    let n_star = match policy {
        RatePolicy::Constant { lambda_over_mu } => *lambda_over_mu,
        RatePolicy::Table(t) => fixed_point(&interpolate_policy(t)?, spec.mu_tau),
        RatePolicy::Continuous(c) => fixed_point(c, spec.mu_tau),
    };
    Ok(UtilizationBound {
        n_star,
        utilization_lower_bound: n_star / n_cap,
    })
}

fn fixed_point(policy: &ContinuousPolicy, mu_tau: f64) -> f64 {
    let h = |x: f64| policy.eval(x) - mu_tau * x;
    let (mut lo, mut hi) = (0.0, policy.table.rates.len() as f64);
    if h(lo) <= 0.0 {
        return 0.0;
    }
    while hi - lo > 1e-11 {
        let mid = 0.5 * (lo + hi);
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Everything derived from one specification.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub spec: SynthesisSpec,
    pub policy: ContinuousPolicy,
    pub bound: UtilizationBound,
}

impl Synthesis {
    pub fn table(&self) -> &RateTable {
        &self.policy.table
    }
}

/// Table, continuation and bound, rejecting tables that are not convex since
/// the bound relies on convexity.
pub fn synthesize(spec: &SynthesisSpec) -> Result<Synthesis> {
    let table = build_rate_table(spec)?;
    table.check_convex()?;
    if let Some(d2) = table.closing_kink() {
        log::warn!(
            "rate table is concave where it closes to zero at n = {} (second difference {d2:.3e})",
            spec.n_capacity()
        );
    }
    let policy = interpolate_policy(&table)?;
    let bound = utilization_lower_bound(&RatePolicy::Continuous(policy.clone()), spec)?;
    Ok(Synthesis {
        spec: *spec,
        policy,
        bound,
    })
}

/// Least-squares line through the low-count part of a table, clamped at zero:
/// proportional control with a deadband up to capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct DeadbandPolicy {
    pub intercept: f64,
    pub slope: f64,
    pub table: RateTable,
}

impl DeadbandPolicy {
    /// Where the fitted line reaches zero.
    pub fn zero_crossing(&self) -> f64 {
        if self.slope < 0.0 {
            -self.intercept / self.slope
        } else {
            f64::INFINITY
        }
    }
}

pub fn linearized_deadband_policy(table: &RateTable) -> Result<DeadbandPolicy> {
    let n_cap = table.rates.len();
    let window = ((DEADBAND_FIT_FRACTION * n_cap as f64).round() as usize).clamp(1, n_cap);
    let (intercept, slope) = if window < 2 {
        (table.rates[0], 0.0)
    } else {
        let w = window as f64;
        let mean_x = (w - 1.0) / 2.0;
        let mean_y = table.rates[..window].iter().sum::<f64>() / w;
        let (sxy, sxx) = table.rates[..window]
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(sxy, sxx), (i, y)| {
                let dx = i as f64 - mean_x;
                (sxy + dx * (y - mean_y), sxx + dx * dx)
            });
        let slope = (sxy / sxx).min(0.0);
        (mean_y - slope * mean_x, slope)
    };
    let rates = (0..n_cap)
        .map(|n| (intercept + slope * n as f64).max(0.0))
        .collect();
    Ok(DeadbandPolicy {
        intercept,
        slope,
        table: RateTable::new(rates)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::overload_mass;

    fn spec(n: usize, p: f64, mu: f64) -> SynthesisSpec {
        SynthesisSpec::new(n, p, mu).unwrap()
    }

    fn residual_ratio(n: usize, s: &SynthesisSpec, rate: f64) -> f64 {
        overload_mass(n, s.capacity(), &s.params(rate).unwrap()).unwrap() / s.overload_budget()
    }

    #[test]
    fn spec_validation() {
        assert!(SynthesisSpec::new(0, 0.1, 0.1).is_err());
        assert!(SynthesisSpec::new(10, 0.0, 0.1).is_err());
        assert!(SynthesisSpec::new(10, 1.0, 0.1).is_err());
        assert!(SynthesisSpec::new(10, 0.1, 0.0).is_err());
    }

    #[test]
    fn top_state_meets_budget() {
        for s in [spec(10, 1e-3, 0.01), spec(100, 1e-10, 0.001), spec(37, 0.2, 1.0)] {
            let n = s.n_capacity() - 1;
            let rate = solve_rate_for_state(n, &s).unwrap();
            assert!(rate > 0.0);
            let r = residual_ratio(n, &s, rate);
            assert!((0.999..=1.001).contains(&r), "ratio {r}");
            assert!(r <= 1.0);
        }
    }

    #[test]
    fn state_zero_matches_high_precision_root() {
        // Root of the 40-digit overload mass for N=10, μτ=0.01, P*=1e-3.
        let rate = solve_rate_for_state(0, &spec(10, 1e-3, 0.01)).unwrap();
        assert!((rate - 2.975_347_645_569_466).abs() < 1e-9);
    }

    #[test]
    fn rejects_overloaded_state() {
        assert!(solve_rate_for_state(10, &spec(10, 1e-3, 0.01)).is_err());
    }

    #[test]
    fn single_state_table() {
        let s = spec(1, 0.5, 1.0);
        let t = build_rate_table(&s).unwrap();
        assert_eq!(t.rates().len(), 1);
        let r = residual_ratio(0, &s, t.rate(0));
        assert!((0.999..=1.001).contains(&r));
    }

    #[test]
    fn table_rejects_increasing_rates() {
        assert!(matches!(RateTable::new(vec![1.0, 2.0]), Err(Error::NonMonotone { n: 1 })));
        assert!(RateTable::new(vec![]).is_err());
        assert!(RateTable::new(vec![1.0, -0.1]).is_err());
    }

    #[test]
    fn continuation_matches_table_and_brackets_midpoints() {
        let t = build_rate_table(&spec(30, 1e-4, 0.05)).unwrap();
        let c = interpolate_policy(&t).unwrap();
        for n in 0..30 {
            assert!((c.eval(n as f64) - t.rate(n)).abs() <= 1e-12 * t.rate(n).max(1.0));
            let mid = c.eval(n as f64 + 0.5);
            assert!(mid <= t.rate(n) && mid >= t.rate(n + 1));
        }
        assert_eq!(c.eval(30.0), 0.0);
        assert_eq!(c.eval(45.0), 0.0);
    }

    #[test]
    fn constant_policy_bound_is_its_mean() {
        let s = spec(100, 1e-10, 0.01);
        let b = utilization_lower_bound(&RatePolicy::constant(37.5).unwrap(), &s).unwrap();
        assert_eq!(b.n_star, 37.5);
        assert!((b.utilization_lower_bound - 0.375).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_solves_balance() {
        let s = spec(50, 1e-3, 0.01);
        let syn = synthesize(&s).unwrap();
        let x = syn.bound.n_star;
        assert!((syn.policy.eval(x) - s.mu_tau() * x).abs() < 1e-9);
    }

    #[test]
    fn deadband_fit_is_clamped_line() {
        let t = RateTable::new(vec![10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 3.0, 1.0, 0.5, 0.1]).unwrap();
        let d = linearized_deadband_policy(&t).unwrap();
        assert!((d.slope + 1.0).abs() < 1e-12);
        assert!((d.intercept - 10.0).abs() < 1e-12);
        assert!((d.zero_crossing() - 10.0).abs() < 1e-12);
        assert!(d.table.rates().iter().all(|&r| r >= 0.0));

        let t = RateTable::new(vec![5.0, 4.0, 3.0, 2.0, 1.9]).unwrap();
        let d = linearized_deadband_policy(&t).unwrap();
        let root = d.zero_crossing();
        for n in 0..5 {
            if n as f64 >= root {
                assert_eq!(d.table.rate(n), 0.0);
            }
        }
    }

    #[test]
    fn convexity_check_flags_concave_tables() {
        let t = RateTable::new(vec![10.0, 9.9, 9.7, 5.0]).unwrap();
        assert!(matches!(t.check_convex(), Err(Error::NonConvex { .. })));
        let t = RateTable::new(vec![10.0, 6.0, 3.0, 1.0]).unwrap();
        assert!(t.check_convex().is_ok());
        assert_eq!(t.closing_kink(), None);
        let t = RateTable::new(vec![4.0, 2.0, 1.5]).unwrap();
        assert!(t.check_convex().is_ok());
        assert_eq!(t.closing_kink(), Some(-1.0));
    }
}
