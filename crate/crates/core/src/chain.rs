//! Exact analysis of the controlled chain observed at broadcast boundaries.
//!
//! The state space is truncated at an `n_max` chosen so that every row from a
//! state with a positive rate keeps all but 1e-13 of its mass. Rows are held
//! as bands and transposed, so one propagation step is a gather over output
//! counts that parallelizes without shared writes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::kernel::{auto_n_max, kernel_band, overload_mass, CircuitCapacity, CountDistribution, KernelParams};
use crate::special_math::{compensated_sum, poisson_log_upper_tail, LogProb, NeumaierSum};
use crate::synthesis::RatePolicy;

/// Default total-variation tolerance of the stationary solve.
pub const DEFAULT_STATIONARY_TOL: f64 = 1e-10;
/// Leakage per step above which a propagated distribution is renormalized.
pub const RENORMALIZE_DRIFT: f64 = 1e-9;
const MAX_POWER_ITERATIONS: usize = 1_000_000;

/// The distribution `πⁱ` at boundary `tᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub dist: CountDistribution,
    pub interval_index: usize,
}

impl ChainState {
    pub fn new(dist: CountDistribution) -> Self {
        Self { dist, interval_index: 0 }
    }
}

/// Transition structure of one policy at one interval length.
#[derive(Debug, Clone)]
pub struct ChainModel {
    policy: RatePolicy,
    mu_tau: f64,
    n_max: usize,
    lambda_tau: Vec<f64>,
    /// `columns[n]` lists `(m, W(m → n))`.
    columns: Vec<Vec<(u32, f64)>>,
    /// Mass each row loses above `n_max`.
    leak: Vec<f64>,
}

fn constant_policy_n_max(mean: f64) -> usize {
    if mean == 0.0 {
        return 0;
    }
    let mut j = (mean + 10.0 * mean.sqrt() + 20.0) as u64;
    while poisson_log_upper_tail(j, mean).map(LogProb::prob).unwrap_or(1.0) >= 1e-16 {
        j += 5;
    }
    j as usize + 10
}

impl ChainModel {
    /// Builds the model with an automatically chosen truncation.
    pub fn new(policy: &RatePolicy, mu_tau: f64) -> Result<Self> {
        KernelParams::new(0.0, mu_tau)?;
        let n_max = match policy.capacity() {
            Some(cap) => {
                let n_cap = cap.n_capacity();
                let per_row = exec::try_map_indexed(n_cap, |m| {
                    KernelParams::new(policy.lambda_tau_at(m, mu_tau), mu_tau).map(|p| auto_n_max(m, &p))
                })?;
                per_row.into_iter().max().unwrap_or(0).max(n_cap)
            }
            None => constant_policy_n_max(policy.lambda_tau_at(0, mu_tau) / mu_tau),
        };
        Self::with_n_max(policy, mu_tau, n_max)
    }

    pub fn with_n_max(policy: &RatePolicy, mu_tau: f64, n_max: usize) -> Result<Self> {
        let lambda_tau: Vec<f64> = (0..=n_max).map(|m| policy.lambda_tau_at(m, mu_tau)).collect();
        let bands = exec::try_map_indexed(n_max + 1, |m| {
            KernelParams::new(lambda_tau[m], mu_tau).map(|p| kernel_band(m, &p, n_max))
        })?;
        let mut columns: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_max + 1];
        let mut leak = Vec::with_capacity(n_max + 1);
        for (m, band) in bands.into_iter().enumerate() {
            for (i, &w) in band.values.iter().enumerate() {
                if w > 0.0 {
                    columns[band.start + i].push((m as u32, w));
                }
            }
            leak.push(band.lost_above);
        }
        Ok(Self {
            policy: policy.clone(),
            mu_tau,
            n_max,
            lambda_tau,
            columns,
            leak,
        })
    }

    pub fn policy(&self) -> &RatePolicy {
        &self.policy
    }

    pub fn mu_tau(&self) -> f64 {
        self.mu_tau
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Rate broadcast in state `m`, for `m ≤ n_max`.
    pub fn lambda_tau(&self, m: usize) -> f64 {
        self.lambda_tau[m]
    }

    fn check_support(&self, dist: &CountDistribution) -> Result<()> {
        if dist.n_max() > self.n_max && dist.mass_at_or_above(self.n_max + 1) > 0.0 {
            let required = dist.probs().iter().rposition(|&p| p > 0.0).unwrap_or(0);
            return Err(Error::Truncation {
                n_max: self.n_max,
                required,
                lost_mass: dist.mass_at_or_above(self.n_max + 1),
            });
        }
        Ok(())
    }

    fn step(&self, probs: &[f64], out: &mut [f64]) -> f64 {
        exec::fill_indexed(out, |n| {
            let mut acc = NeumaierSum::new();
            for &(m, w) in &self.columns[n] {
                if let Some(&p) = probs.get(m as usize) {
                    acc.add(p * w);
                }
            }
            acc.value()
        });
        compensated_sum(probs.iter().zip(&self.leak).map(|(p, l)| p * l))
    }

    /// One interval of `πⁱ = Σₘ W(λ(m)τ) πⁱ⁻¹ₘ`.
    pub fn propagate(&self, state: &ChainState) -> Result<ChainState> {
        self.check_support(&state.dist)?;
        let mut out = vec![0.0; self.n_max + 1];
        let lost = self.step(state.dist.probs(), &mut out);
        let mut dist = CountDistribution::from_raw(out);
        if lost > RENORMALIZE_DRIFT {
            log::info!(
                "interval {}: {lost:.3e} mass left the truncated space (n_max={}); renormalizing",
                state.interval_index + 1,
                self.n_max
            );
            dist = dist.renormalized();
        }
        Ok(ChainState {
            dist,
            interval_index: state.interval_index + 1,
        })
    }

    /// Power iteration from `start` until the step's TV gap and its
    /// geometric-tail extrapolation are both below `tol`.
    pub fn stationary_from(&self, start: &CountDistribution, tol: f64) -> Result<Stationary> {
        if tol.is_nan() || tol <= 0.0 {
            return Err(Error::domain(format!("tolerance must be positive, got {tol}")));
        }
        self.check_support(start)?;
        let mut cur: Vec<f64> = (0..=self.n_max).map(|n| start.get(n)).collect();
        let mut next = vec![0.0; self.n_max + 1];
        let mut prev_gap = f64::INFINITY;
        for iteration in 1..=MAX_POWER_ITERATIONS {
            self.step(&cur, &mut next);
            let total = compensated_sum(next.iter().copied());
            next.iter_mut().for_each(|p| *p /= total);
            let gap = 0.5 * compensated_sum(cur.iter().zip(&next).map(|(a, b)| (a - b).abs()));
            std::mem::swap(&mut cur, &mut next);
            let ratio = gap / prev_gap;
            let tail = if ratio < 1.0 { gap * ratio / (1.0 - ratio) } else { f64::INFINITY };
            prev_gap = gap;
            if gap <= tol && (tail <= tol || gap == 0.0) {
                let dist = CountDistribution::from_raw(cur);
                let tv_residual = self.tv_residual(&dist)?;
                return Ok(Stationary {
                    dist,
                    tv_residual,
                    iterations: iteration,
                });
            }
            if iteration == MAX_POWER_ITERATIONS {
                return Err(Error::NoConvergence {
                    iterations: iteration,
                    last_gap: gap,
                });
            }
        }
        unreachable!()
    }

    pub fn stationary(&self, tol: f64) -> Result<Stationary> {
        self.stationary_from(&CountDistribution::point_mass(0, self.n_max)?, tol)
    }

    /// `TV(π, propagate(π))`.
    pub fn tv_residual(&self, dist: &CountDistribution) -> Result<f64> {
        let next = self.propagate(&ChainState::new(dist.clone()))?;
        Ok(next.dist.tv_distance(dist))
    }

    /// `E[λ(n)τ] - μτ·E[n]`, zero for a stationary law.
    pub fn balance_residual(&self, dist: &CountDistribution) -> f64 {
        let rate = dist.expect(|n| self.lambda_tau.get(n).copied().unwrap_or(0.0));
        rate - self.mu_tau * dist.mean()
    }
}

/// Fixed point of propagation with its certificate.
#[derive(Debug, Clone)]
pub struct Stationary {
    pub dist: CountDistribution,
    pub tv_residual: f64,
    pub iterations: usize,
}

/// Stationary law of the controlled chain, from an empty circuit.
pub fn stationary_distribution(policy: &RatePolicy, mu_tau: f64, tol: f64) -> Result<Stationary> {
    ChainModel::new(policy, mu_tau)?.stationary(tol)
}

/// One-interval overload probability `Σ_{n<N} overload_mass(n)·πₙ` for the
/// law conditioned on `n < N` at the start. Zero when that set has no mass.
pub fn step_overload_probability(
    dist: &CountDistribution,
    policy: &RatePolicy,
    cap: CircuitCapacity,
    mu_tau: f64,
) -> Result<f64> {
    let Some(below) = dist.restricted_below(cap.n_capacity()) else {
        return Ok(0.0);
    };
    let terms = exec::try_map_indexed(below.probs().len(), |n| {
        let w = below.get(n);
        if w == 0.0 {
            return Ok(0.0);
        }
        let p = KernelParams::new(policy.lambda_tau_at(n, mu_tau), mu_tau)?;
        Ok(w * overload_mass(n, cap, &p)?)
    })?;
    Ok(compensated_sum(terms))
}

/// `n̄/N`.
pub fn mean_utilization(dist: &CountDistribution, cap: CircuitCapacity) -> f64 {
    dist.mean() / cap.n_capacity() as f64
}

/// Stationary summary written alongside distribution dumps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub mean: f64,
    pub utilization: f64,
    pub step_overload_probability: f64,
    pub tv_residual: f64,
}

pub fn analyze(policy: &RatePolicy, cap: CircuitCapacity, mu_tau: f64, tol: f64) -> Result<(Stationary, AnalysisSummary)> {
    let stationary = stationary_distribution(policy, mu_tau, tol)?;
    let summary = AnalysisSummary {
        mean: stationary.dist.mean(),
        utilization: mean_utilization(&stationary.dist, cap),
        step_overload_probability: step_overload_probability(&stationary.dist, policy, cap, mu_tau)?,
        tv_residual: stationary.tv_residual,
    };
    Ok((stationary, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::transition_prob;
    use crate::synthesis::{build_rate_table, RateTable, SynthesisSpec};

    #[test]
    fn empty_circuit_is_absorbing_under_zero_rate() {
        let policy = RatePolicy::Table(RateTable::new(vec![0.0; 5]).unwrap());
        let model = ChainModel::new(&policy, 0.1).unwrap();
        let s = ChainState::new(CountDistribution::point_mass(0, model.n_max()).unwrap());
        let next = model.propagate(&s).unwrap();
        assert_eq!(next.dist.get(0), 1.0);
        assert_eq!(next.interval_index, 1);
    }

    #[test]
    fn constant_policy_keeps_poisson_fixed() {
        let policy = RatePolicy::constant(12.0).unwrap();
        let model = ChainModel::new(&policy, 0.05).unwrap();
        let start = CountDistribution::poisson(12.0, model.n_max()).unwrap();
        let next = model.propagate(&ChainState::new(start.clone())).unwrap();
        assert!(next.dist.tv_distance(&start) < 1e-10);
    }

    #[test]
    fn constant_policy_stationary_is_poisson() {
        let policy = RatePolicy::constant(30.0).unwrap();
        let st = stationary_distribution(&policy, 0.2, 1e-12).unwrap();
        let poisson = CountDistribution::poisson(30.0, st.dist.n_max()).unwrap();
        assert!(st.dist.tv_distance(&poisson) < 1e-10);
        let cap = CircuitCapacity::new(100).unwrap();
        assert!((mean_utilization(&poisson, cap) - 0.30).abs() < 1e-6);
    }

    #[test]
    fn rejects_distribution_beyond_truncation() {
        let policy = RatePolicy::Table(RateTable::new(vec![0.0; 3]).unwrap());
        let model = ChainModel::new(&policy, 0.1).unwrap();
        let far = CountDistribution::point_mass(model.n_max() + 4, model.n_max() + 4).unwrap();
        let err = model.propagate(&ChainState::new(far)).unwrap_err();
        assert!(matches!(err, Error::Truncation { .. }));
    }

    #[test]
    fn zero_rate_never_overloads() {
        let policy = RatePolicy::Table(RateTable::new(vec![0.0; 4]).unwrap());
        let cap = CircuitCapacity::new(4).unwrap();
        let d = CountDistribution::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(step_overload_probability(&d, &policy, cap, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn two_state_hand_enumeration() {
        // N = 2, rates (0.8, 0.3), start law (0.6, 0.4): overload means two
        // or more vehicles at the next boundary.
        let (r0, r1, mu) = (0.8, 0.3, 0.25);
        let policy = RatePolicy::Table(RateTable::new(vec![r0, r1]).unwrap());
        let cap = CircuitCapacity::new(2).unwrap();
        let d = CountDistribution::new(vec![0.6, 0.4]).unwrap();
        let p0 = KernelParams::new(r0, mu).unwrap();
        let p1 = KernelParams::new(r1, mu).unwrap();
        let from0 = 1.0 - transition_prob(0, 0, &p0) - transition_prob(0, 1, &p0);
        let from1 = 1.0 - transition_prob(1, 0, &p1) - transition_prob(1, 1, &p1);
        let expected = 0.6 * from0 + 0.4 * from1;
        let got = step_overload_probability(&d, &policy, cap, mu).unwrap();
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn conditioning_drops_overloaded_mass() {
        let policy = RatePolicy::Table(RateTable::new(vec![0.5, 0.2]).unwrap());
        let cap = CircuitCapacity::new(2).unwrap();
        let a = CountDistribution::new(vec![0.3, 0.2, 0.5]).unwrap();
        let b = CountDistribution::new(vec![0.6, 0.4]).unwrap();
        let pa = step_overload_probability(&a, &policy, cap, 0.1).unwrap();
        let pb = step_overload_probability(&b, &policy, cap, 0.1).unwrap();
        assert!((pa - pb).abs() < 1e-15);
        let overloaded = CountDistribution::point_mass(3, 3).unwrap();
        assert_eq!(step_overload_probability(&overloaded, &policy, cap, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn utilization_edge_cases() {
        let cap = CircuitCapacity::new(10).unwrap();
        assert_eq!(mean_utilization(&CountDistribution::point_mass(0, 12).unwrap(), cap), 0.0);
        assert_eq!(mean_utilization(&CountDistribution::point_mass(10, 12).unwrap(), cap), 1.0);
    }

    #[test]
    fn synthesized_policy_balance_and_bound() {
        let spec = SynthesisSpec::new(40, 1e-3, 0.02).unwrap();
        let policy = RatePolicy::Table(build_rate_table(&spec).unwrap());
        let model = ChainModel::new(&policy, spec.mu_tau()).unwrap();
        let st = model.stationary(1e-12).unwrap();
        assert!(st.tv_residual <= 1e-11);
        assert!(model.balance_residual(&st.dist).abs() < 1e-9);
        let p = step_overload_probability(&st.dist, &policy, spec.capacity(), spec.mu_tau()).unwrap();
        assert!(p <= spec.overload_budget());
    }
}
