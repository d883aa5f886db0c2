//! Seeded discrete-event Monte Carlo of the broadcast protocol.
//!
//! At each boundary the controller reads the count and fixes the connection
//! rate for the whole interval. Inside the interval connections and
//! completions race as exponential clocks (total rate `λτ + μτ·n` in units of
//! `1/τ`). Replica `r` draws from ChaCha stream `r` of the configured seed, so
//! replicas never share random numbers and the ensemble is reproducible
//! regardless of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::kernel::CircuitCapacity;
use crate::synthesis::{relaxation_time_estimate, Protocol, RatePolicy, SynthesisSpec};

const BATCHES_PER_REPLICA: usize = 20;
const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub policy: RatePolicy,
    pub cap: CircuitCapacity,
    pub mu_tau: f64,
    /// Window length in broadcast intervals.
    pub intervals: usize,
    pub replicas: usize,
    pub seed: u64,
    /// Leading intervals excluded from statistics.
    pub warmup_intervals: usize,
    pub initial_count: usize,
}

impl SimConfig {
    pub fn new(policy: RatePolicy, cap: CircuitCapacity, mu_tau: f64, intervals: usize, replicas: usize, seed: u64) -> Self {
        Self {
            policy,
            cap,
            mu_tau,
            intervals,
            replicas,
            seed,
            warmup_intervals: 0,
            initial_count: 0,
        }
    }

    pub fn with_warmup(mut self, warmup_intervals: usize) -> Self {
        self.warmup_intervals = warmup_intervals;
        self
    }

    pub fn with_initial_count(mut self, initial_count: usize) -> Self {
        self.initial_count = initial_count;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu_tau.is_finite() || self.mu_tau <= 0.0 {
            return Err(Error::domain(format!("mu_tau must be finite and > 0, got {}", self.mu_tau)));
        }
        if self.intervals == 0 || self.replicas == 0 {
            return Err(Error::domain("need at least one interval and one replica"));
        }
        if self.warmup_intervals >= self.intervals {
            return Err(Error::domain(format!(
                "warmup ({}) must be shorter than the run ({})",
                self.warmup_intervals, self.intervals
            )));
        }
        Ok(())
    }

    fn counted_intervals(&self) -> usize {
        self.intervals - self.warmup_intervals
    }
}

/// Ten relaxation times, expressed in intervals.
pub fn recommended_warmup(spec: &SynthesisSpec, protocol: Protocol) -> usize {
    let t = relaxation_time_estimate(spec, protocol).in_intervals(spec.mu_tau());
    (10.0 * t.max(1.0)).ceil() as usize
}

/// What happened during one interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalOutcome {
    pub end_count: usize,
    pub max_count: usize,
    pub time_average: f64,
}

/// Simulates one interval of unit length starting from `start` with the
/// connection rate held at `lambda_tau`.
pub fn simulate_interval<R: Rng + ?Sized>(start: usize, lambda_tau: f64, mu_tau: f64, rng: &mut R) -> IntervalOutcome {
    let mut n = start;
    let mut max_count = start;
    let mut t = 0.0;
    let mut area = 0.0;
    loop {
        let total = lambda_tau + mu_tau * n as f64;
        if total <= 0.0 {
            area += n as f64 * (1.0 - t);
            break;
        }
        let dt: f64 = Exp1.sample(rng);
        let dt = dt / total;
        if t + dt >= 1.0 {
            area += n as f64 * (1.0 - t);
            break;
        }
        area += n as f64 * dt;
        t += dt;
        if rng.random::<f64>() * total < lambda_tau {
            n += 1;
            max_count = max_count.max(n);
        } else {
            n -= 1;
        }
    }
    IntervalOutcome {
        end_count: n,
        max_count,
        time_average: area,
    }
}

/// One row of the optional per-interval trace. `boundary_count` is the count
/// at the end of the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub replica: usize,
    pub interval: usize,
    pub boundary_count: usize,
    pub interval_max: usize,
    pub time_avg: f64,
}

/// Per-replica counts over the post-warmup intervals. Overload events are
/// counted only on intervals that start below capacity, so the boundary
/// frequency estimates the one-step overload probability of the chain.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplicaTallies {
    pub intervals_counted: usize,
    /// Intervals that started with `n < N`.
    pub overload_trials: u64,
    pub boundary_count_sum: u64,
    pub time_average_sum: f64,
    pub batch_means: Vec<f64>,
    pub boundary_overloads: u64,
    pub excursion_overloads: u64,
    /// `boundary_histogram[n]` counts end-of-interval boundaries at count `n`.
    pub boundary_histogram: Vec<u64>,
    pub trace: Vec<TraceRow>,
}

pub fn replica_rng(seed: u64, replica_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica_index as u64);
    rng
}

fn replica(config: &SimConfig, replica_index: usize, record_trace: bool) -> ReplicaTallies {
    let mut rng = replica_rng(config.seed, replica_index);
    let counted = config.counted_intervals();
    let batches = BATCHES_PER_REPLICA.min(counted);
    let batch_len = counted / batches;
    let mut tallies = ReplicaTallies::default();
    let mut batch_acc = 0.0;
    let mut batch_fill = 0;
    let mut n = config.initial_count;
    for interval in 0..config.intervals {
        let start = n;
        let lambda_tau = config.policy.lambda_tau_at(n, config.mu_tau);
        let out = simulate_interval(n, lambda_tau, config.mu_tau, &mut rng);
        if record_trace {
            tallies.trace.push(TraceRow {
                replica: replica_index,
                interval,
                boundary_count: out.end_count,
                interval_max: out.max_count,
                time_avg: out.time_average,
            });
        }
        n = out.end_count;
        if interval < config.warmup_intervals {
            continue;
        }
        tallies.intervals_counted += 1;
        tallies.boundary_count_sum += n as u64;
        tallies.time_average_sum += out.time_average;
        if !config.cap.is_overloaded(start) {
            tallies.overload_trials += 1;
            if config.cap.is_overloaded(n) {
                tallies.boundary_overloads += 1;
            }
            if config.cap.is_overloaded(out.max_count) {
                tallies.excursion_overloads += 1;
            }
        }
        if tallies.boundary_histogram.len() <= n {
            tallies.boundary_histogram.resize(n + 1, 0);
        }
        tallies.boundary_histogram[n] += 1;
        if tallies.batch_means.len() < batches {
            batch_acc += out.time_average;
            batch_fill += 1;
            if batch_fill == batch_len {
                tallies.batch_means.push(batch_acc / batch_len as f64);
                batch_acc = 0.0;
                batch_fill = 0;
            }
        }
    }
    tallies
}

/// Runs one replica; fully determined by `(seed, replica_index)`.
pub fn run_replica(config: &SimConfig, replica_index: usize) -> Result<ReplicaTallies> {
    config.validate()?;
    Ok(replica(config, replica_index, false))
}

/// Same as [`run_replica`] and records every interval, warmup included.
pub fn run_replica_traced(config: &SimConfig, replica_index: usize) -> Result<ReplicaTallies> {
    config.validate()?;
    Ok(replica(config, replica_index, true))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Event frequency with a 95% interval. Zero observed events give the
/// one-sided exact bound `1 - 0.025^(1/n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub events: u64,
    pub trials: u64,
    pub one_sided: bool,
}

impl RateEstimate {
    pub fn from_counts(events: u64, trials: u64) -> Self {
        if trials == 0 {
            return Self {
                rate: 0.0,
                ci_low: 0.0,
                ci_high: 1.0,
                events,
                trials,
                one_sided: true,
            };
        }
        let n = trials as f64;
        let rate = events as f64 / n;
        if events == 0 {
            return Self {
                rate,
                ci_low: 0.0,
                ci_high: -(0.025f64.ln() / n).exp_m1(),
                events,
                trials,
                one_sided: true,
            };
        }
        let (lo, hi) = wilson_interval(events, trials, Z_95);
        Self {
            rate,
            ci_low: lo,
            ci_high: hi,
            events,
            trials,
            one_sided: false,
        }
    }
}

/// Wilson score interval for `events` successes in `trials`.
pub fn wilson_interval(events: u64, trials: u64, z: f64) -> (f64, f64) {
    let n = trials as f64;
    let p = events as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    /// Time-averaged count with a batch-means standard error.
    pub mean_count: Estimate,
    pub utilization: f64,
    pub boundary_overload_rate: RateEstimate,
    pub excursion_overload_rate: RateEstimate,
    pub replica_count: usize,
    pub interval_count: usize,
    pub seed: u64,
}

fn aggregate(config: &SimConfig, tallies: &[ReplicaTallies]) -> SimReport {
    let counted: usize = tallies.iter().map(|t| t.intervals_counted).sum();
    let mean = tallies.iter().map(|t| t.time_average_sum).sum::<f64>() / counted as f64;
    let batches: Vec<f64> = tallies.iter().flat_map(|t| t.batch_means.iter().copied()).collect();
    let std_error = if batches.len() >= 2 {
        let b = batches.len() as f64;
        let bm = batches.iter().sum::<f64>() / b;
        let var = batches.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / (b - 1.0);
        (var / b).sqrt()
    } else {
        f64::NAN
    };
    let boundary: u64 = tallies.iter().map(|t| t.boundary_overloads).sum();
    let excursion: u64 = tallies.iter().map(|t| t.excursion_overloads).sum();
    let trials: u64 = tallies.iter().map(|t| t.overload_trials).sum();
    SimReport {
        mean_count: Estimate { value: mean, std_error },
        utilization: mean / config.cap.n_capacity() as f64,
        boundary_overload_rate: RateEstimate::from_counts(boundary, trials),
        excursion_overload_rate: RateEstimate::from_counts(excursion, trials),
        replica_count: tallies.len(),
        interval_count: counted,
        seed: config.seed,
    }
}

/// All replicas plus the aggregated report.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub report: SimReport,
    pub replicas: Vec<ReplicaTallies>,
}

fn ensemble(config: &SimConfig, record_trace: bool) -> Result<Ensemble> {
    config.validate()?;
    let replicas = exec::map_indexed(config.replicas, |r| replica(config, r, record_trace));
    Ok(Ensemble {
        report: aggregate(config, &replicas),
        replicas,
    })
}

pub fn run_ensemble(config: &SimConfig) -> Result<SimReport> {
    ensemble(config, false).map(|e| e.report)
}

/// Ensemble keeping per-replica tallies, optionally with traces.
pub fn run_ensemble_detailed(config: &SimConfig, record_trace: bool) -> Result<Ensemble> {
    ensemble(config, record_trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverloadRates {
    pub boundary: RateEstimate,
    pub excursion: RateEstimate,
}

pub fn empirical_overload_rate(report: &SimReport) -> OverloadRates {
    OverloadRates {
        boundary: report.boundary_overload_rate,
        excursion: report.excursion_overload_rate,
    }
}
