//! One-interval transition kernel of the M/M/∞ load process.
//!
//! Over an interval of length τ each of the `m` vehicles charging at the start
//! is still charging at the end with probability `e^{-μτ} = 1 - ε`, and the
//! vehicles that connected during the interval and are still charging form an
//! independent Poisson(q) count with `q = λτ·ε/μτ`. The kernel is the
//! convolution of the binomial survivor count with those arrivals:
//!
//! ```text
//! W(m → n) = Σ_{k=0}^{min(m,n)} C(m,k) (1-ε)^k ε^{m-k} · e^{-q} q^{n-k} / (n-k)!
//! ```
//!
//! [`ctmc_oracle_row`] recomputes rows from the birth-death generator by
//! uniformization and is the reference the decomposition is checked against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special_math::{
    binomial_ln_pmf_raw, compensated_sum, ln_sum_exp, poisson_ln_upper_tails, poisson_log_pmf,
    poisson_log_upper_tail, LogProb, NeumaierSum,
};

/// Mass below which a kernel row is considered fully captured.
pub const ROW_TRUNCATION_MASS: f64 = 1e-13;
/// Largest tolerated loss when the caller fixes `n_max`.
pub const MAX_TRUNCATED_MASS: f64 = 1e-12;
/// Point masses below this are dropped when building banded rows.
const BAND_CUTOFF_LN: f64 = -69.077_552_789_821_37; // ln 1e-30

/// Dimensionless description of one broadcast interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    lambda_tau: f64,
    mu_tau: f64,
    epsilon: f64,
    survival: f64,
    q: f64,
}

impl KernelParams {
    pub fn new(lambda_tau: f64, mu_tau: f64) -> Result<Self> {
        if !lambda_tau.is_finite() || lambda_tau < 0.0 {
            return Err(Error::domain(format!("lambda_tau must be finite and >= 0, got {lambda_tau}")));
        }
        if !mu_tau.is_finite() || mu_tau <= 0.0 {
            return Err(Error::domain(format!("mu_tau must be finite and > 0, got {mu_tau}")));
        }
        let epsilon = -(-mu_tau).exp_m1();
        Ok(Self {
            lambda_tau,
            mu_tau,
            epsilon,
            survival: (-mu_tau).exp(),
            q: lambda_tau * epsilon / mu_tau,
        })
    }

    /// Same interval length, different connection rate.
    pub fn with_lambda_tau(&self, lambda_tau: f64) -> Result<Self> {
        Self::new(lambda_tau, self.mu_tau)
    }

    pub fn lambda_tau(&self) -> f64 {
        self.lambda_tau
    }

    pub fn mu_tau(&self) -> f64 {
        self.mu_tau
    }

    /// Probability that a vehicle charging at the start finishes within the interval.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `1 - ε`, computed without cancellation.
    pub fn survival(&self) -> f64 {
        self.survival
    }

    /// Mean number of arrivals still charging at the end of the interval.
    pub fn q(&self) -> f64 {
        self.q
    }
}

/// Convenience constructor mirroring [`KernelParams::new`].
pub fn make_params(lambda_tau: f64, mu_tau: f64) -> Result<KernelParams> {
    KernelParams::new(lambda_tau, mu_tau)
}

/// Number of simultaneously charging vehicles the circuit carries. A count
/// `n ≥ N` is an overload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct CircuitCapacity(usize);

impl CircuitCapacity {
    pub fn new(n_capacity: usize) -> Result<Self> {
        if n_capacity == 0 {
            return Err(Error::domain("circuit capacity must be at least 1"));
        }
        Ok(Self(n_capacity))
    }

    pub fn n_capacity(self) -> usize {
        self.0
    }

    pub fn is_overloaded(self, n: usize) -> bool {
        n >= self.0
    }
}

impl TryFrom<usize> for CircuitCapacity {
    type Error = Error;

    fn try_from(value: usize) -> Result<Self> {
        Self::new(value)
    }
}

impl From<CircuitCapacity> for usize {
    fn from(c: CircuitCapacity) -> usize {
        c.0
    }
}

/// Probability vector over the count `n = 0..=n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    probs: Vec<f64>,
}

impl CountDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::domain("distribution needs at least one entry"));
        }
        if let Some((n, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0 + 1e-12)
        {
            return Err(Error::domain(format!("entry {n} = {p} is not a probability")));
        }
        let total = compensated_sum(probs.iter().copied());
        if !(1.0 - 1e-9..=1.0 + 1e-9).contains(&total) {
            return Err(Error::domain(format!("distribution sums to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Wraps a vector whose total may be short of one by truncation.
    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        debug_assert!(!probs.is_empty());
        Self { probs }
    }

    pub fn point_mass(n: usize, n_max: usize) -> Result<Self> {
        if n > n_max {
            return Err(Error::domain(format!("point mass at {n} beyond n_max = {n_max}")));
        }
        let mut probs = vec![0.0; n_max + 1];
        probs[n] = 1.0;
        Ok(Self { probs })
    }

    /// Poisson(mean) restricted to `0..=n_max`.
    pub fn poisson(mean: f64, n_max: usize) -> Result<Self> {
        let probs = (0..=n_max as u64)
            .map(|n| poisson_log_pmf(n, mean).map(LogProb::prob))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_max(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn get(&self, n: usize) -> f64 {
        self.probs.get(n).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        compensated_sum(self.probs.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        compensated_sum(self.probs.iter().enumerate().map(|(n, p)| n as f64 * p))
    }

    /// `E[f(n)]`.
    pub fn expect(&self, f: impl Fn(usize) -> f64) -> f64 {
        compensated_sum(self.probs.iter().enumerate().map(|(n, p)| f(n) * p))
    }

    /// Total-variation distance, treating missing entries as zero.
    pub fn tv_distance(&self, other: &CountDistribution) -> f64 {
        let len = self.probs.len().max(other.probs.len());
        0.5 * compensated_sum((0..len).map(|n| (self.get(n) - other.get(n)).abs()))
    }

    /// Mass at `n ≥ threshold`.
    pub fn mass_at_or_above(&self, threshold: usize) -> f64 {
        compensated_sum(self.probs.iter().skip(threshold).copied())
    }

    /// Conditional law given `n < threshold`, or `None` when that set has no mass.
    pub fn restricted_below(&self, threshold: usize) -> Option<CountDistribution> {
        let end = threshold.min(self.probs.len());
        let mass = compensated_sum(self.probs[..end].iter().copied());
        if end == 0 || mass <= 0.0 {
            return None;
        }
        Some(Self {
            probs: self.probs[..end].iter().map(|p| p / mass).collect(),
        })
    }

    pub(crate) fn renormalized(mut self) -> Self {
        let total = self.total();
        if total > 0.0 {
            self.probs.iter_mut().for_each(|p| *p /= total);
        }
        self
    }
}

/// `ln W(m → n)`, summed over all survivor counts.
pub fn transition_log_prob(m: usize, n: usize, p: &KernelParams) -> LogProb {
    let terms: Vec<f64> = (0..=m.min(n))
        .map(|k| {
            binomial_ln_pmf_raw(k as u64, m as u64, p.survival, p.epsilon)
                + poisson_log_pmf((n - k) as u64, p.q).map(LogProb::ln).unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    LogProb::from_ln_unchecked(ln_sum_exp(&terms))
}

/// Probability that `m` charging vehicles become `n` one interval later.
pub fn transition_prob(m: usize, n: usize, p: &KernelParams) -> f64 {
    transition_log_prob(m, n, p).prob()
}

/// Overload tail of one kernel row, reusable across connection rates: the
/// survivor weights depend only on `m` and `μτ`.
#[derive(Debug, Clone)]
pub(crate) struct OverloadTail {
    m: usize,
    threshold: usize,
    ln_survivors: Vec<f64>,
}

impl OverloadTail {
    pub(crate) fn new(m: usize, threshold: usize, mu_tau: f64) -> Result<Self> {
        let p = KernelParams::new(0.0, mu_tau)?;
        let ln_survivors = (0..=m as u64)
            .map(|k| binomial_ln_pmf_raw(k, m as u64, p.survival, p.epsilon))
            .collect();
        Ok(Self {
            m,
            threshold,
            ln_survivors,
        })
    }

    /// `ln P(count ≥ N)` after the interval for arrival mean `q`.
    pub(crate) fn ln_mass(&self, q: f64) -> f64 {
        self.eval(q, false).0
    }

    /// `(ln P(count ≥ N), ln dP/dq)`.
    pub(crate) fn ln_mass_and_slope(&self, q: f64) -> (f64, f64) {
        self.eval(q, true)
    }

    fn eval(&self, q: f64, with_slope: bool) -> (f64, f64) {
        let n_cap = self.threshold;
        if n_cap == 0 {
            return (0.0, f64::NEG_INFINITY);
        }
        // Arrivals needed for survivor count k: j = N - k, for k < N.
        let k_top = self.m.min(n_cap - 1);
        let j_lo = (n_cap - k_top) as u64;
        let tails = if q > 0.0 {
            poisson_ln_upper_tails(j_lo, n_cap as u64, q)
        } else {
            vec![f64::NEG_INFINITY; k_top + 1]
        };
        let mut mass_terms = Vec::with_capacity(self.m + 1);
        let mut slope_terms = Vec::with_capacity(if with_slope { k_top + 1 } else { 0 });
        for (k, &lb) in self.ln_survivors.iter().enumerate() {
            if k >= n_cap {
                mass_terms.push(lb);
                continue;
            }
            let j = n_cap - k;
            mass_terms.push(lb + tails[j - j_lo as usize]);
            if with_slope {
                // d/dq P(Pois(q) ≥ j) = pmf(j - 1; q)
                let ln_pmf = poisson_log_pmf((j - 1) as u64, q)
                    .map(LogProb::ln)
                    .unwrap_or(f64::NEG_INFINITY);
                slope_terms.push(lb + ln_pmf);
            }
        }
        let slope = if with_slope {
            ln_sum_exp(&slope_terms)
        } else {
            f64::NEG_INFINITY
        };
        (ln_sum_exp(&mass_terms).min(0.0), slope)
    }
}

/// `ln P(count ≥ N after one interval | count = m now)`.
pub fn overload_log_mass(m: usize, cap: CircuitCapacity, p: &KernelParams) -> Result<LogProb> {
    if cap.is_overloaded(m) {
        log::debug!("overload mass requested from overloaded state m={m} >= N={}", cap.n_capacity());
    }
    let tail = OverloadTail::new(m, cap.n_capacity(), p.mu_tau)?;
    Ok(LogProb::from_ln_unchecked(tail.ln_mass(p.q)))
}

/// Probability that a circuit holding `m < N` vehicles is overloaded at the
/// next boundary. States `m ≥ N` are accepted but lie outside the model the
/// bound is stated for.
pub fn overload_mass(m: usize, cap: CircuitCapacity, p: &KernelParams) -> Result<f64> {
    overload_log_mass(m, cap, p).map(LogProb::prob)
}

/// Mass above `n_max` in the row from `m`, computed directly.
fn mass_above(m: usize, n_max: usize, p: &KernelParams) -> Result<f64> {
    overload_mass(m, CircuitCapacity::new(n_max + 1)?, p)
}

/// Smallest `n_max` for which the survivor bound plus Poisson(q) tail leaves
/// less than [`ROW_TRUNCATION_MASS`] above it.
pub fn auto_n_max(m: usize, p: &KernelParams) -> usize {
    if p.q == 0.0 {
        return m;
    }
    let below = |j: u64| {
        poisson_log_upper_tail(j, p.q)
            .map(LogProb::prob)
            .unwrap_or(1.0)
            < ROW_TRUNCATION_MASS
    };
    let mut hi = (p.q + 20.0 * p.q.sqrt() + 40.0).ceil() as u64;
    while !below(hi) {
        hi *= 2;
    }
    let mut lo = 0u64;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if below(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    // Need P(arrivals ≥ n_max + 1 - m) < tol, i.e. n_max = m + j - 1.
    (m + lo as usize).saturating_sub(1).max(m)
}

/// Contiguous window of non-negligible mass of a unimodal log-pmf.
fn unimodal_window(mode: u64, lo_bound: u64, hi_bound: u64, ln_pmf: impl Fn(u64) -> f64) -> (u64, Vec<f64>) {
    let mut lo = mode;
    while lo > lo_bound && ln_pmf(lo - 1) > BAND_CUTOFF_LN {
        lo -= 1;
    }
    let mut hi = mode;
    while hi < hi_bound && ln_pmf(hi + 1) > BAND_CUTOFF_LN {
        hi += 1;
    }
    (lo, (lo..=hi).map(|x| ln_pmf(x).exp()).collect())
}

/// Banded row of the kernel: entries for `n = start..start+len`, entries
/// below 1e-30 dropped, and the mass that fell above `n_max`.
#[derive(Debug, Clone)]
pub(crate) struct KernelBand {
    pub start: usize,
    pub values: Vec<f64>,
    pub lost_above: f64,
}

pub(crate) fn kernel_band(m: usize, p: &KernelParams, n_max: usize) -> KernelBand {
    let mm = m as u64;
    let mode_k = (((mm + 1) as f64) * p.survival).floor().min(mm as f64) as u64;
    let (k_lo, surv) = unimodal_window(mode_k, 0, mm, |k| {
        binomial_ln_pmf_raw(k, mm, p.survival, p.epsilon)
    });
    let (j_lo, arr) = if p.q == 0.0 {
        (0, vec![1.0])
    } else {
        let cap = (p.q + 60.0 * p.q.sqrt() + 800.0) as u64;
        unimodal_window(p.q.floor() as u64, 0, cap, |j| {
            poisson_log_pmf(j, p.q).map(LogProb::ln).unwrap_or(f64::NEG_INFINITY)
        })
    };
    let start = (k_lo + j_lo) as usize;
    let full_len = surv.len() + arr.len() - 1;
    let mut full = vec![0.0; full_len];
    for (a, &s) in surv.iter().enumerate() {
        for (b, &w) in arr.iter().enumerate() {
            full[a + b] += s * w;
        }
    }
    let keep = if start > n_max {
        0
    } else {
        (n_max - start + 1).min(full_len)
    };
    let lost_above = compensated_sum(full[keep..].iter().copied());
    full.truncate(keep);
    KernelBand {
        start: start.min(n_max),
        values: full,
        lost_above,
    }
}

/// The row `W(m → ·)` on `0..=n_max`. With `n_max = None` the truncation is
/// chosen by [`auto_n_max`].
pub fn kernel_row(m: usize, p: &KernelParams, n_max: Option<usize>) -> Result<CountDistribution> {
    let n_max = match n_max {
        Some(n_max) => {
            let lost = if n_max < m { 1.0 } else { mass_above(m, n_max, p)? };
            if n_max < m || lost >= MAX_TRUNCATED_MASS {
                return Err(Error::Truncation {
                    n_max,
                    required: auto_n_max(m, p),
                    lost_mass: lost,
                });
            }
            n_max
        }
        None => auto_n_max(m, p),
    };
    let band = kernel_band(m, p, n_max);
    let mut probs = vec![0.0; n_max + 1];
    probs[band.start..band.start + band.values.len()].copy_from_slice(&band.values);
    Ok(CountDistribution::from_raw(probs))
}

/// Transient row of the truncated birth-death chain, with the mass that
/// reached the reflecting boundary.
#[derive(Debug, Clone)]
pub struct OracleRow {
    pub dist: CountDistribution,
    pub boundary_mass: f64,
}

/// Row of `exp(Qτ)` for births at rate λ (zeroed at `n_max`) and deaths at
/// rate `μn`, by uniformization with Poisson-weight truncation 1e-13. This is
/// the reference the kernel decomposition is tested against.
pub fn ctmc_oracle_row(m: usize, lambda_tau: f64, mu_tau: f64, n_max: usize) -> Result<OracleRow> {
    KernelParams::new(lambda_tau, mu_tau)?;
    if n_max < m {
        return Err(Error::domain(format!("oracle needs n_max >= m, got {n_max} < {m}")));
    }
    let birth = |n: usize| if n < n_max { lambda_tau } else { 0.0 };
    let death = |n: usize| mu_tau * n as f64;
    let uniform_rate = (0..=n_max).map(|n| birth(n) + death(n)).fold(0.0, f64::max);
    if uniform_rate == 0.0 {
        return Ok(OracleRow {
            dist: CountDistribution::point_mass(m, n_max)?,
            boundary_mass: if m == n_max { 1.0 } else { 0.0 },
        });
    }
    let last_step = {
        let mut k = uniform_rate.ceil() as u64;
        while poisson_log_upper_tail(k + 1, uniform_rate)?.prob() >= 1e-16 {
            k += (uniform_rate.sqrt().ceil() as u64).max(1);
        }
        k
    };

    let mut v = vec![0.0; n_max + 1];
    v[m] = 1.0;
    let mut acc = vec![NeumaierSum::new(); n_max + 1];
    let mut next = vec![0.0; n_max + 1];
    for step in 0..=last_step {
        let w = poisson_log_pmf(step, uniform_rate)?.prob();
        if w > 0.0 {
            for (a, &x) in acc.iter_mut().zip(&v) {
                a.add(w * x);
            }
        }
        for n in 0..=n_max {
            let stay = 1.0 - (birth(n) + death(n)) / uniform_rate;
            let mut x = v[n] * stay;
            if n > 0 {
                x += v[n - 1] * birth(n - 1) / uniform_rate;
            }
            if n < n_max {
                x += v[n + 1] * death(n + 1) / uniform_rate;
            }
            next[n] = x;
        }
        std::mem::swap(&mut v, &mut next);
    }
    let probs: Vec<f64> = acc.iter().map(NeumaierSum::value).collect();
    let boundary_mass = probs[n_max];
    if boundary_mass > MAX_TRUNCATED_MASS {
        log::warn!("oracle row from m={m} puts {boundary_mass:.3e} on the boundary n_max={n_max}");
    }
    Ok(OracleRow {
        dist: CountDistribution::from_raw(probs),
        boundary_mass,
    })
}
