//! `evcharge`: synthesize broadcast-rate policies, bound their utilization,
//! sweep the operating curves and check them by simulation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evcharge_core::chain::{analyze, AnalysisSummary, DEFAULT_STATIONARY_TOL};
use evcharge_core::kernel::{kernel_row, overload_mass};
use evcharge_core::sim::{recommended_warmup, run_ensemble_detailed, SimConfig};
use evcharge_core::synthesis::{
    constant_rate_max_load, interpolate_policy, synthesize, utilization_lower_bound, Protocol, UtilizationBound,
};
use evcharge_core::{CircuitCapacity, KernelParams, RatePolicy, RateTable, SynthesisSpec};
use serde::Serialize;

use evcharge_cli::error::{CliError, CliResult};
use evcharge_cli::formats::{self, TableMetadata};

#[derive(Parser)]
#[command(name = "evcharge", version, about = "Broadcast-rate admission control for randomized EV charging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the per-state connection rates and write the rate table.
    Synth(SynthArgs),
    /// Fixed-point utilization bound of a rate table.
    Bound {
        #[arg(long)]
        table: PathBuf,
    },
    /// Constant-rate and variable-rate utilization over a budget grid.
    Sweep(SweepArgs),
    /// Monte Carlo run of a rate table.
    Simulate(SimulateArgs),
    /// One row of the transition kernel, or its overload tail.
    Kernel(KernelArgs),
    /// Best constant-rate load for a capacity and budget.
    Profile {
        #[arg(long)]
        capacity: usize,
        #[arg(long)]
        overload_prob: f64,
    },
    /// Stationary analysis of a rate table.
    Analyze {
        #[arg(long)]
        table: PathBuf,
        /// Interval length; read from the table's sidecar when omitted.
        #[arg(long)]
        mu_tau: Option<f64>,
        /// Write the stationary distribution as `n,prob`.
        #[arg(long)]
        dist_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    capacity: usize,
    #[arg(long)]
    overload_prob: f64,
    #[arg(long, required_unless_present = "interval_minutes", conflicts_with = "interval_minutes")]
    mu_tau: Option<f64>,
    /// Broadcast interval in minutes, converted with `--charge-hours`.
    #[arg(long)]
    interval_minutes: Option<f64>,
    /// Mean full-charge time used to convert `--interval-minutes`.
    #[arg(long, default_value_t = 5.0, requires = "interval_minutes")]
    charge_hours: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    capacity: Vec<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    mu_tau: Vec<f64>,
    /// Smallest common log of 1/P.
    #[arg(long, default_value_t = 2.0)]
    logp_min: f64,
    #[arg(long, default_value_t = 16.0)]
    logp_max: f64,
    #[arg(long, default_value_t = 1.0)]
    logp_step: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    capacity: usize,
    #[arg(long)]
    mu_tau: f64,
    #[arg(long)]
    intervals: usize,
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-interval trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Leading intervals excluded from statistics; ten relaxation times by default.
    #[arg(long)]
    warmup: Option<usize>,
}

#[derive(Args)]
struct KernelArgs {
    #[arg(long)]
    from: usize,
    #[arg(long)]
    lambda_tau: f64,
    #[arg(long)]
    mu_tau: f64,
    #[arg(long)]
    n_max: Option<usize>,
    /// Print the mass at or above this count instead of the row.
    #[arg(long)]
    tail_at: Option<usize>,
}

#[derive(Serialize)]
struct Profile {
    n_bar_opt: f64,
    utilization: f64,
}

fn stdout_line(text: &str) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| CliError::io("<stdout>", e))
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn synth(args: SynthArgs) -> CliResult<()> {
    let mu_tau = match (args.mu_tau, args.interval_minutes) {
        (Some(m), _) => m,
        (None, Some(minutes)) => minutes / (60.0 * args.charge_hours),
        (None, None) => unreachable!("clap requires one of them"),
    };
    let spec = SynthesisSpec::new(args.capacity, args.overload_prob, mu_tau)?;
    let syn = synthesize(&spec)?;
    let table = syn.table();
    let ratios = table
        .rates()
        .iter()
        .enumerate()
        .map(|(n, &r)| Ok(overload_mass(n, spec.capacity(), &spec.params(r)?)? / spec.overload_budget()))
        .collect::<CliResult<Vec<f64>>>()?;
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    formats::write_rate_table(&args.out, table, &TableMetadata::from_spec(&spec))?;
    eprintln!(
        "residual certificate: overload mass / budget in [{lo:.9}, {hi:.9}] over n = 0..{}",
        spec.n_capacity() - 1
    );
    eprintln!(
        "n_star = {}, utilization_lower_bound = {}",
        syn.bound.n_star, syn.bound.utilization_lower_bound
    );
    Ok(())
}

fn table_spec(path: &Path, table: &RateTable) -> CliResult<SynthesisSpec> {
    let meta = formats::read_metadata(path)?.ok_or_else(|| {
        validation(format!(
            "{}: missing sidecar {} with mu_tau",
            path.display(),
            formats::sidecar_path(path).display()
        ))
    })?;
    if meta.capacity != table.rates().len() {
        return Err(validation(format!(
            "{}: sidecar capacity {} but table has {} rows",
            path.display(),
            meta.capacity,
            table.rates().len()
        )));
    }
    meta.spec()
}

fn table_bound(table: &RateTable, spec: &SynthesisSpec) -> CliResult<UtilizationBound> {
    let policy = RatePolicy::Continuous(interpolate_policy(table)?);
    Ok(utilization_lower_bound(&policy, spec)?)
}

fn bound(path: &Path) -> CliResult<()> {
    let table = formats::read_rate_table(path)?;
    let spec = table_spec(path, &table)?;
    stdout_line(&formats::to_json(&table_bound(&table, &spec)?))
}

fn grid(min: f64, max: f64, step: f64) -> CliResult<Vec<f64>> {
    if !max.is_finite() || min.is_nan() || step.is_nan() || min <= 0.0 || step <= 0.0 || max < min {
        return Err(validation(format!(
            "need 0 < logp-min <= logp-max and logp-step > 0, got {min}, {max}, {step}"
        )));
    }
    let count = ((max - min) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|k| min + k as f64 * step).collect())
}

fn cell(r: CliResult<f64>, what: &str) -> String {
    match r {
        Ok(x) => x.to_string(),
        Err(e) => {
            log::warn!("{what}: {e}");
            String::new()
        }
    }
}

fn sweep(args: SweepArgs) -> CliResult<()> {
    let logps = grid(args.logp_min, args.logp_max, args.logp_step)?;
    if args.mu_tau.iter().any(|&m| !m.is_finite() || m <= 0.0) {
        return Err(validation("mu-tau values must be finite and > 0"));
    }
    let mut rows = Vec::new();
    for &n_cap in &args.capacity {
        let cap = CircuitCapacity::new(n_cap)?;
        let constant: Vec<String> = logps
            .iter()
            .map(|&lp| {
                let r = constant_rate_max_load(cap, 10f64.powf(-lp)).map(|n| n / n_cap as f64);
                cell(r.map_err(CliError::from), &format!("constant N={n_cap} log10(1/P)={lp}"))
            })
            .collect();
        for &mu_tau in &args.mu_tau {
            for (k, &lp) in logps.iter().enumerate() {
                let variable = SynthesisSpec::new(n_cap, 10f64.powf(-lp), mu_tau)
                    .and_then(|spec| synthesize(&spec))
                    .map(|s| s.bound.utilization_lower_bound)
                    .map_err(CliError::from);
                rows.push([
                    n_cap.to_string(),
                    mu_tau.to_string(),
                    lp.to_string(),
                    constant[k].clone(),
                    cell(variable, &format!("variable N={n_cap} mu_tau={mu_tau} log10(1/P)={lp}")),
                ]);
            }
        }
    }
    let file = std::fs::File::create(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e: csv::Error| CliError::io(&args.out, std::io::Error::other(e));
    w.write_record(["N", "mu_tau", "log10_inv_PN", "utilization_constant", "utilization_variable_bound"])
        .map_err(io)?;
    for row in rows {
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(&args.out, e))
}

/// Budget used to size the default warmup: the sidecar's, or the largest
/// one-step overload mass of the table itself.
fn warmup_budget(path: &Path, table: &RateTable, mu_tau: f64) -> CliResult<f64> {
    if let Some(meta) = formats::read_metadata(path)? {
        return Ok(meta.overload_budget);
    }
    let cap = table.capacity();
    let mut worst: f64 = 0.0;
    for (n, &r) in table.rates().iter().enumerate() {
        worst = worst.max(overload_mass(n, cap, &KernelParams::new(r, mu_tau)?)?);
    }
    Ok(worst.clamp(1e-300, 0.5))
}

fn simulate(args: SimulateArgs) -> CliResult<()> {
    let table = formats::read_rate_table(&args.table)?;
    if table.rates().len() != args.capacity {
        return Err(validation(format!(
            "--capacity {} but {} has {} rows",
            args.capacity,
            args.table.display(),
            table.rates().len()
        )));
    }
    let cap = CircuitCapacity::new(args.capacity)?;
    let warmup = match args.warmup {
        Some(w) => w,
        None => {
            let spec = SynthesisSpec::new(args.capacity, warmup_budget(&args.table, &table, args.mu_tau)?, args.mu_tau)?;
            let w = recommended_warmup(&spec, Protocol::Variable);
            if w >= args.intervals {
                log::warn!("default warmup {w} exceeds half the run; using {}", args.intervals / 2);
                args.intervals / 2
            } else {
                w
            }
        }
    };
    let config =
        SimConfig::new(RatePolicy::Table(table), cap, args.mu_tau, args.intervals, args.replicas, args.seed).with_warmup(warmup);
    let ensemble = run_ensemble_detailed(&config, args.trace.is_some())?;
    formats::write_json(&args.out, &ensemble.report)?;
    if let Some(path) = &args.trace {
        formats::write_trace(path, ensemble.replicas.iter().flat_map(|r| r.trace.iter().copied()))?;
    }
    Ok(())
}

fn kernel(args: KernelArgs) -> CliResult<()> {
    let p = KernelParams::new(args.lambda_tau, args.mu_tau)?;
    if let Some(n_cap) = args.tail_at {
        let mass = overload_mass(args.from, CircuitCapacity::new(n_cap)?, &p)?;
        return stdout_line(&format!("N,overload_mass\n{n_cap},{mass}"));
    }
    let row = kernel_row(args.from, &p, args.n_max)?;
    let mut text = String::from("n,prob");
    for (n, prob) in row.probs().iter().enumerate() {
        text.push_str(&format!("\n{n},{prob}"));
    }
    stdout_line(&text)
}

fn profile(capacity: usize, overload_prob: f64) -> CliResult<()> {
    let cap = CircuitCapacity::new(capacity)?;
    let n_bar_opt = constant_rate_max_load(cap, overload_prob)?;
    stdout_line(&formats::to_json(&Profile {
        n_bar_opt,
        utilization: n_bar_opt / capacity as f64,
    }))
}

fn analyze_table(path: &Path, mu_tau: Option<f64>, dist_out: Option<&Path>) -> CliResult<()> {
    let table = formats::read_rate_table(path)?;
    let mu_tau = match mu_tau {
        Some(m) => m,
        None => table_spec(path, &table)?.mu_tau(),
    };
    let cap = table.capacity();
    let (stationary, summary): (_, AnalysisSummary) =
        analyze(&RatePolicy::Table(table), cap, mu_tau, DEFAULT_STATIONARY_TOL)?;
    if let Some(out) = dist_out {
        formats::write_distribution(out, &stationary.dist)?;
    }
    stdout_line(&formats::to_json(&summary))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Bound { table } => bound(&table),
        Command::Sweep(a) => sweep(a),
        Command::Simulate(a) => simulate(a),
        Command::Kernel(a) => kernel(a),
        Command::Profile { capacity, overload_prob } => profile(capacity, overload_prob),
        Command::Analyze { table, mu_tau, dist_out } => analyze_table(&table, mu_tau, dist_out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
