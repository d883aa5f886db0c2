//! Log-space Poisson and binomial primitives.
//!
//! Point masses use Loader's saddle-point expansion (`stirlerr` + `bd0`),
//! which keeps full relative precision for counts far from the mean. Tails are
//! summed directly from the threshold outward and never formed as
//! `1 - cumulative` on the small side.

use std::f64::consts::PI;
use std::ops::{Add, Mul};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Natural log of a probability. `-inf` is the impossible event.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LogProb(f64);

impl LogProb {
    pub const IMPOSSIBLE: LogProb = LogProb(f64::NEG_INFINITY);
    pub const CERTAIN: LogProb = LogProb(0.0);

    /// Wraps a log value, clamping tiny positive rounding excursions to zero.
    pub fn new(ln: f64) -> Result<Self> {
        if ln.is_nan() || ln > 1e-9 {
            return Err(Error::domain(format!("{ln} is not a log-probability")));
        }
        Ok(LogProb(ln.min(0.0)))
    }

    pub(crate) fn from_ln_unchecked(ln: f64) -> Self {
        LogProb(ln.min(0.0))
    }

    pub fn from_prob(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::domain(format!("{p} is not a probability")));
        }
        Ok(LogProb(p.ln()))
    }

    pub fn ln(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }

    pub fn is_impossible(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }
}

/// Probability of the union of disjoint events.
impl Add for LogProb {
    type Output = LogProb;

    fn add(self, rhs: LogProb) -> LogProb {
        LogProb::from_ln_unchecked(ln_add_exp(self.0, rhs.0))
    }
}

/// Probability of the intersection of independent events.
impl Mul for LogProb {
    type Output = LogProb;

    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, rhs: LogProb) -> LogProb {
        LogProb(self.0 + rhs.0)
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = NeumaierSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated sum of a sequence of floats.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<NeumaierSum>().value()
}

/// `ln(e^a + e^b)` without overflow.
pub fn ln_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln Σ e^xᵢ` with a compensated inner sum.
pub fn ln_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + compensated_sum(xs.iter().map(|&x| (x - max).exp())).ln()
}

// ln n! - [(n + 1/2) ln n - n + ln √(2π)] for n = 0..=15.
const STIRLERR_TABLE: [f64; 16] = [
    0.0,
    0.081_061_466_795_327_26,
    0.041_340_695_955_409_29,
    0.027_677_925_684_998_34,
    0.020_790_672_103_765_09,
    0.016_644_691_189_821_19,
    0.013_876_128_823_070_75,
    0.011_896_709_945_891_77,
    0.010_411_265_261_972_1,
    0.009_255_462_182_712_733,
    0.008_330_563_433_362_87,
    0.007_573_675_487_951_841,
    0.006_942_840_107_209_53,
    0.006_408_994_188_004_207,
    0.005_951_370_112_758_848,
    0.005_554_733_551_962_801,
];

/// Error of Stirling's formula for `ln n!`.
pub fn stirlerr(n: u64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15 {
        return STIRLERR_TABLE[n as usize];
    }
    let x = n as f64;
    let nn = x * x;
    if n > 500 {
        (S0 - S1 / nn) / x
    } else if n > 80 {
        (S0 - (S1 - S2 / nn) / nn) / x
    } else if n > 35 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / x
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / x
    }
}

/// Deviance term `x ln(x/np) + np - x`, accurate when `x ≈ np`.
fn bd0(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let mut v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        if s.abs() < f64::MIN_POSITIVE {
            return s;
        }
        let mut ej = 2.0 * x * v;
        v *= v;
        for j in 1..1000 {
            ej *= v;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        s
    } else {
        x * (x / np).ln() + np - x
    }
}

/// `ln n!`, exact to rounding for every `n`.
pub fn ln_factorial(n: u64) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let x = n as f64;
    (x + 0.5) * x.ln() - x + 0.5 * LN_2PI + stirlerr(n)
}

fn check_mean(mean: f64) -> Result<()> {
    if !mean.is_finite() || mean < 0.0 {
        return Err(Error::domain(format!("Poisson mean must be finite and >= 0, got {mean}")));
    }
    Ok(())
}

fn poisson_ln_pmf_raw(n: u64, mean: f64) -> f64 {
    if mean == 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if n == 0 {
        return -mean;
    }
    let x = n as f64;
    -stirlerr(n) - bd0(x, mean) - 0.5 * (2.0 * PI * x).ln()
}

/// `ln P(X = n)` for `X ~ Poisson(mean)`.
pub fn poisson_log_pmf(n: u64, mean: f64) -> Result<LogProb> {
    check_mean(mean)?;
    Ok(LogProb::from_ln_unchecked(poisson_ln_pmf_raw(n, mean)))
}

pub fn poisson_pmf(n: u64, mean: f64) -> Result<f64> {
    poisson_log_pmf(n, mean).map(LogProb::prob)
}

fn poisson_ln_upper_tail_raw(threshold: u64, mean: f64) -> f64 {
    if threshold == 0 {
        return 0.0;
    }
    if mean == 0.0 {
        return f64::NEG_INFINITY;
    }
    if threshold as f64 > mean {
        // Σ_{j≥N} pmf(j) = pmf(N)·(1 + λ/(N+1) + λ²/((N+1)(N+2)) + …)
        let mut acc = NeumaierSum::new();
        acc.add(1.0);
        let mut term = 1.0;
        let mut j = threshold;
        loop {
            j += 1;
            term *= mean / j as f64;
            acc.add(term);
            if term < 1e-17 * acc.value() {
                break;
            }
        }
        poisson_ln_pmf_raw(threshold, mean) + acc.value().ln()
    } else {
        // Upper tail is at least ~1/2 here; the lower sum is the small side.
        let top = threshold - 1;
        let mut acc = NeumaierSum::new();
        acc.add(1.0);
        let mut term = 1.0;
        let mut j = top;
        while j > 0 {
            term *= j as f64 / mean;
            acc.add(term);
            if term < 1e-17 * acc.value() {
                break;
            }
            j -= 1;
        }
        let lower = (poisson_ln_pmf_raw(top, mean) + acc.value().ln()).exp();
        (-lower).ln_1p()
    }
}

/// `ln P(X ≥ threshold)` for `X ~ Poisson(mean)`.
pub fn poisson_log_upper_tail(threshold: u64, mean: f64) -> Result<LogProb> {
    check_mean(mean)?;
    Ok(LogProb::from_ln_unchecked(poisson_ln_upper_tail_raw(threshold, mean)))
}

/// `P(X ≥ threshold)` for `X ~ Poisson(mean)`.
pub fn poisson_upper_tail(threshold: u64, mean: f64) -> Result<f64> {
    poisson_log_upper_tail(threshold, mean).map(LogProb::prob)
}

/// `ln P(X ≥ j)` for every `j` in `lo..=hi`, index 0 holding `j = lo`.
pub(crate) fn poisson_ln_upper_tails(lo: u64, hi: u64, mean: f64) -> Vec<f64> {
    debug_assert!(lo <= hi);
    let len = (hi - lo + 1) as usize;
    let mut out = vec![0.0; len];
    let mut current = poisson_ln_upper_tail_raw(hi, mean);
    out[len - 1] = current;
    for idx in (0..len - 1).rev() {
        let j = lo + idx as u64;
        current = ln_add_exp(current, poisson_ln_pmf_raw(j, mean));
        out[idx] = current.min(0.0);
    }
    out
}

fn check_binomial(k: u64, m: u64, p: f64) -> Result<()> {
    if k > m {
        return Err(Error::domain(format!("binomial outcome {k} exceeds trials {m}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("binomial probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// `ln C(m,k) pᵏ qᵐ⁻ᵏ` with `q = 1 - p` supplied separately so that a small
/// `q` keeps its precision.
pub(crate) fn binomial_ln_pmf_raw(k: u64, m: u64, p: f64, q: f64) -> f64 {
    if p == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if q == 0.0 {
        return if k == m { 0.0 } else { f64::NEG_INFINITY };
    }
    let n = m as f64;
    if k == 0 {
        if m == 0 {
            return 0.0;
        }
        return if p < 0.1 { -bd0(n, n * q) - n * p } else { n * q.ln() };
    }
    if k == m {
        return if q < 0.1 { -bd0(n, n * p) - n * q } else { n * p.ln() };
    }
    let x = k as f64;
    let lc = stirlerr(m) - stirlerr(k) - stirlerr(m - k) - bd0(x, n * p) - bd0(n - x, n * q);
    let lf = LN_2PI + x.ln() + (-x / n).ln_1p();
    lc - 0.5 * lf
}

/// `ln P(K = k)` for `K ~ Binomial(m, p)`.
pub fn binomial_log_pmf(k: u64, m: u64, p: f64) -> Result<LogProb> {
    check_binomial(k, m, p)?;
    Ok(LogProb::from_ln_unchecked(binomial_ln_pmf_raw(k, m, p, 1.0 - p)))
}

/// Same as [`binomial_log_pmf`] with the failure probability given directly.
pub fn binomial_log_pmf_pq(k: u64, m: u64, p: f64, q: f64) -> Result<LogProb> {
    check_binomial(k, m, p)?;
    if !(0.0..=1.0).contains(&q) || ((p + q) - 1.0).abs() > 1e-12 {
        return Err(Error::domain(format!("p={p} and q={q} must be complementary")));
    }
    Ok(LogProb::from_ln_unchecked(binomial_ln_pmf_raw(k, m, p, q)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pmf_support_end(mean: f64) -> u64 {
        (mean + 40.0 * mean.sqrt() + 40.0) as u64
    }

    #[test]
    fn poisson_pmf_trivial_values() {
        assert_eq!(poisson_pmf(0, 0.0).unwrap(), 1.0);
        assert_eq!(poisson_pmf(3, 0.0).unwrap(), 0.0);
        assert_relative_eq!(poisson_pmf(0, 1.0).unwrap(), (-1.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn poisson_pmf_far_tail_matches_big_float() {
        // e^-100 100^150 / 150!, evaluated with 40-digit arithmetic.
        let exact = 6.511_160_468_786_342e-7;
        assert_relative_eq!(poisson_pmf(150, 100.0).unwrap(), exact, max_relative = 1e-12);
    }

    #[test]
    fn negative_mean_is_rejected() {
        assert!(poisson_pmf(1, -0.5).is_err());
        assert!(poisson_upper_tail(1, f64::NAN).is_err());
    }

    #[test]
    fn upper_tail_trivial_values() {
        assert_eq!(poisson_upper_tail(0, 7.3).unwrap(), 1.0);
        assert_eq!(poisson_upper_tail(0, 0.0).unwrap(), 1.0);
        for m in [0.01, 0.5, 3.0, 40.0] {
            assert_relative_eq!(
                poisson_upper_tail(1, m).unwrap(),
                -(-m).exp_m1(),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn upper_tail_against_direct_summation() {
        // 1 - e^-1 Σ_{k<5} 1/k!
        assert_relative_eq!(
            poisson_upper_tail(5, 1.0).unwrap(),
            3.659_846_827_343_712_3e-3,
            max_relative = 1e-13
        );
    }

    #[test]
    fn ln_factorial_matches_product() {
        let mut acc = 0.0f64;
        for n in 1..=200u64 {
            acc += (n as f64).ln();
            assert_relative_eq!(ln_factorial(n), acc, max_relative = 1e-13);
        }
    }

    #[test]
    fn binomial_trivial_and_degenerate() {
        assert_eq!(binomial_log_pmf(0, 0, 0.3).unwrap().ln(), 0.0);
        assert_eq!(binomial_log_pmf(10, 10, 1.0).unwrap().ln(), 0.0);
        assert!(binomial_log_pmf(7, 10, 1.0).unwrap().is_impossible());
        assert!(binomial_log_pmf(11, 10, 0.5).is_err());
        assert!(binomial_log_pmf(1, 10, 1.5).is_err());
    }

    #[test]
    fn binomial_matches_exact_rational() {
        // C(10,3) (1/4)^3 (3/4)^7 = 262440 / 1048576
        let exact = (262_440.0f64 / 1_048_576.0).ln();
        assert_relative_eq!(binomial_log_pmf(3, 10, 0.25).unwrap().ln(), exact, max_relative = 1e-14);
        assert_relative_eq!(exact, -1.385_165_847_740_092_4, max_relative = 1e-15);
    }

    #[test]
    fn binomial_large_m_is_stable() {
        let m = 100_000u64;
        let total = compensated_sum(
            (0..=m).map(|k| binomial_log_pmf_pq(k, m, 0.999, 0.001).unwrap().prob()),
        );
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn tails_table_matches_pointwise() {
        let mean = 37.5;
        let table = poisson_ln_upper_tails(5, 90, mean);
        for (i, &v) in table.iter().enumerate() {
            let direct = poisson_log_upper_tail(5 + i as u64, mean).unwrap().ln();
            assert_relative_eq!(v.exp(), direct.exp(), max_relative = 1e-12);
        }
    }

    #[test]
    fn tail_plus_head_is_one_even_at_tiny_tails() {
        for (n, mean) in [(60u64, 20.0), (100, 48.9), (250, 120.0)] {
            let tail = poisson_upper_tail(n, mean).unwrap();
            let head = compensated_sum((0..n).map(|j| poisson_pmf(j, mean).unwrap()));
            assert!((tail + head - 1.0).abs() < 1e-12);
            assert!(tail < 1e-8);
        }
    }

    #[test]
    fn log_prob_arithmetic() {
        let a = LogProb::from_prob(0.25).unwrap();
        let b = LogProb::from_prob(0.5).unwrap();
        assert_relative_eq!((a + b).prob(), 0.75, max_relative = 1e-15);
        assert_relative_eq!((a * b).prob(), 0.125, max_relative = 1e-15);
        assert_eq!((a + LogProb::IMPOSSIBLE).ln(), a.ln());
        assert!(LogProb::new(0.5).is_err());
        assert!(LogProb::from_prob(1.5).is_err());
    }

    proptest! {
        #[test]
        fn pmf_normalizes(mean in 0.0f64..400.0) {
            let total = compensated_sum((0..=pmf_support_end(mean)).map(|n| poisson_pmf(n, mean).unwrap()));
            prop_assert!((total - 1.0).abs() < 1e-12, "mean={} total={}", mean, total);
        }

        #[test]
        fn tail_complements_head(mean in 0.0f64..300.0, n in 0u64..400) {
            let tail = poisson_upper_tail(n, mean).unwrap();
            let head = compensated_sum((0..n).map(|j| poisson_pmf(j, mean).unwrap()));
            prop_assert!((tail + head - 1.0).abs() < 1e-12);
        }

        #[test]
        fn tail_is_monotone(mean in 0.0f64..200.0, dm in 0.0f64..5.0, n in 0u64..300) {
            let t = poisson_log_upper_tail(n, mean).unwrap().ln();
            prop_assert!(poisson_log_upper_tail(n, mean + dm).unwrap().ln() >= t - 1e-12);
            prop_assert!(poisson_log_upper_tail(n + 1, mean).unwrap().ln() <= t + 1e-12);
        }

        #[test]
        fn binomial_normalizes(m in 0u64..=1000, p in 0.0f64..=1.0) {
            let total = compensated_sum((0..=m).map(|k| binomial_log_pmf(k, m, p).unwrap().prob()));
            prop_assert!((total - 1.0).abs() < 1e-12, "m={} p={} total={}", m, p, total);
        }
    }
}
