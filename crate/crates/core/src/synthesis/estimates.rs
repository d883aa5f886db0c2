//! Closed-form diagnostics: the leading-order rate estimate, relaxation
//! times, and the best constant (preprogrammed) rate.

use serde::{Deserialize, Serialize};

use super::SynthesisSpec;
use crate::error::{Error, Result};
use crate::kernel::CircuitCapacity;
use crate::special_math::poisson_log_upper_tail;

/// Headroom `N - n` below which the leading-order estimate is not trusted.
pub const ASYMPTOTIC_MIN_HEADROOM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticRate {
    /// Estimate clamped at zero.
    pub rate: f64,
    pub unclamped: f64,
    /// False when the headroom is small or the estimate had to be clamped.
    pub within_validity: bool,
}

/// `λ(n)τ ≈ (N - n) - Δₙ` with `Δₙ = -ln(P*)·√(N - n)`. Diagnostic only;
/// synthesis never uses it.
pub fn asymptotic_rate(n: usize, spec: &SynthesisSpec) -> Result<AsymptoticRate> {
    let n_cap = spec.n_capacity();
    if n >= n_cap {
        return Err(Error::domain(format!("state {n} is not below capacity {n_cap}")));
    }
    let headroom = (n_cap - n) as f64;
    let delta = -spec.overload_budget().ln() * headroom.sqrt();
    let unclamped = headroom - delta;
    let within_validity = n_cap - n >= ASYMPTOTIC_MIN_HEADROOM && unclamped >= 0.0;
    if unclamped < 0.0 {
        log::warn!("leading-order rate estimate at n={n} is negative ({unclamped:.3}); clamped to 0");
    }
    Ok(AsymptoticRate {
        rate: unclamped.max(0.0),
        unclamped,
        within_validity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    Constant,
    Variable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeUnit {
    /// `1/μ`, the mean charging time.
    MeanChargeTime,
    /// `τ`, one broadcast interval.
    BroadcastInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxationTime {
    pub value: f64,
    pub unit: TimeUnit,
}

impl RelaxationTime {
    /// The estimate expressed as a number of broadcast intervals.
    pub fn in_intervals(&self, mu_tau: f64) -> f64 {
        match self.unit {
            TimeUnit::MeanChargeTime => self.value / mu_tau,
            TimeUnit::BroadcastInterval => self.value,
        }
    }
}

/// Constant rate relaxes on the charging time scale `1/μ`; the variable-rate
/// protocol needs about `ln(-N ln P*)` intervals starting from empty.
pub fn relaxation_time_estimate(spec: &SynthesisSpec, protocol: Protocol) -> RelaxationTime {
    match protocol {
        Protocol::Constant => RelaxationTime {
            value: 1.0,
            unit: TimeUnit::MeanChargeTime,
        },
        Protocol::Variable => {
            let n_cap = spec.n_capacity() as f64;
            RelaxationTime {
                value: (-n_cap * spec.overload_budget().ln()).ln(),
                unit: TimeUnit::BroadcastInterval,
            }
        }
    }
}

/// Largest stationary mean `n̄ = λ₀/μ` whose Poisson overload probability
/// `P(n ≥ N)` stays within `p_target`, to 1e-10 absolute.
pub fn constant_rate_max_load(cap: CircuitCapacity, p_target: f64) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::domain(format!("target probability must lie in (0, 1), got {p_target}")));
    }
    let threshold = cap.n_capacity() as u64;
    let ln_target = p_target.ln();
    let excess = |mean: f64| -> Result<f64> { Ok(poisson_log_upper_tail(threshold, mean)?.ln() - ln_target) };
    let mut lo = 0.0;
    let mut hi = cap.n_capacity() as f64;
    while excess(hi)? <= 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-11 {
        let mid = 0.5 * (lo + hi);
        if excess(mid)? <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, p: f64, mu: f64) -> SynthesisSpec {
        SynthesisSpec::new(n, p, mu).unwrap()
    }

    #[test]
    fn asymptotic_validity_flags() {
        let near = asymptotic_rate(99, &spec(100, 1e-10, 0.01)).unwrap();
        assert!(!near.within_validity);
        let far = asymptotic_rate(0, &spec(100, 1e-10, 0.01)).unwrap();
        // 100 - 23.03 * 10 < 0
        assert!((far.unclamped - (100.0 - 10.0 * 1e10f64.ln() * 1.0)).abs() < 1e-9);
        assert_eq!(far.rate, 0.0);
        assert!(!far.within_validity);
        let ok = asymptotic_rate(0, &spec(1000, 1e-4, 0.01)).unwrap();
        assert!(ok.within_validity && ok.rate > 0.0);
    }

    #[test]
    fn relaxation_estimates() {
        let c = relaxation_time_estimate(&spec(100, 1e-10, 0.01), Protocol::Constant);
        assert_eq!(c.value, 1.0);
        assert_eq!(c.unit, TimeUnit::MeanChargeTime);
        assert!((c.in_intervals(0.01) - 100.0).abs() < 1e-9);

        let v = relaxation_time_estimate(&spec(100, 1e-10, 0.01), Protocol::Variable);
        assert!((v.value - 7.741_787_724_230_093).abs() < 1e-12);

        let budget = (-std::f64::consts::E).exp();
        let unit = relaxation_time_estimate(&spec(1, budget, 0.5), Protocol::Variable);
        assert!((unit.value - 1.0).abs() < 1e-14);
    }

    #[test]
    fn constant_rate_unit_capacity_closed_form() {
        let cap = CircuitCapacity::new(1).unwrap();
        let mean = constant_rate_max_load(cap, 1.0 - (-1.0f64).exp()).unwrap();
        assert!((mean - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_rate_frozen_values() {
        // Root of P(Poisson(m) >= N) = 1e-10 evaluated independently in
        // double precision with a library survival function.
        let m100 = constant_rate_max_load(CircuitCapacity::new(100).unwrap(), 1e-10).unwrap();
        assert!((m100 / 100.0 - 0.488_830_920_537_959_6).abs() < 1e-8);
        let m1000 = constant_rate_max_load(CircuitCapacity::new(1000).unwrap(), 1e-10).unwrap();
        assert!((m1000 / 1000.0 - 0.811_798_762_717_560_8).abs() < 1e-8);
    }

    #[test]
    fn constant_rate_rejects_bad_target() {
        let cap = CircuitCapacity::new(5).unwrap();
        assert!(constant_rate_max_load(cap, 0.0).is_err());
        assert!(constant_rate_max_load(cap, 1.0).is_err());
    }
}
