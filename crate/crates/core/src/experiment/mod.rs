//! Experiment families behind the command-line runner. Each returns a typed
//! report; [`Report`] bundles the files a command writes.

mod config;

pub use config::{
    rayleigh_sampler, AlcorConfig, BenchConfig, ChannelConfig, DemandsConfig, DiagnosticsConfig, FaultConfig,
    MlpConfig, Mode, RateOracleKind, RateStudyConfig, RunConfig, TrafficConfig, UraConfig, UraKind, WindowConfig,
};

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::alcor::{
    run, run_with, BatchSchedule, GapOracle, LinearOracle, Method, RateOracle, RunOutput, UraChannel, UsvSample,
    Window, WindowSummary,
};
use crate::channel::MulticellChannel;
use crate::constraints::DemandSpec;
use crate::distributed::{Bus, DistributedAlcor, OverheadLedger};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{
    estimate_lipschitz, estimate_oracle_variance, first_sustained, loglog_slope, write_trace_csv, CheckpointSchedule,
    LipschitzEstimate, VarianceReport,
};
use crate::rng::{domain, phase, substream, BatchKey};
use crate::constraints::Demand;
use crate::traffic::{trend, QueueOracle, Sensitivity};
use crate::ura::policy_ura_gains;
use crate::utility::masked_rates;

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    UraBench,
    Run,
    Queue,
    Diagnostics,
    RateStudy,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::UraBench => "ura-bench",
            Command::Run => "run",
            Command::Queue => "queue",
            Command::Diagnostics => "diagnostics",
            Command::RateStudy => "rate-study",
        }
    }
}

/// Everything a command produces.
#[derive(Clone, Debug)]
pub struct Report {
    pub command: Command,
    pub summary: Value,
    /// File name and contents, written next to `summary.json`.
    pub files: Vec<(String, Vec<u8>)>,
    pub converged: bool,
}

pub fn execute(command: Command, cfg: &RunConfig, exec: Exec) -> Result<Report> {
    match command {
        Command::UraBench => {
            let cells = ura_bench(cfg, exec)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for c in &cells {
                w.serialize(c)?;
            }
            let csv = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(Report {
                command,
                summary: json!({ "cells": cells }),
                files: vec![("ura_bench.csv".into(), csv)],
                converged: true,
            })
        }
        Command::Run => {
            let reps = replicate(cfg, exec, |seed| run_rate(cfg, seed, exec))?;
            let n = cfg.n_users();
            let mut files = Vec::new();
            for r in &reps {
                let mut buf = Vec::new();
                write_trace_csv(&mut buf, &r.output.records, n)?;
                files.push((trace_name(cfg, r.seed), buf));
            }
            let converged = reps.iter().all(|r| r.converged());
            let per_seed: Vec<Value> = reps.iter().map(RateRun::summary).collect();
            Ok(Report {
                command,
                summary: json!({ "replications": per_seed, "aggregate": aggregate_runs(&reps) }),
                files,
                converged,
            })
        }
        Command::Queue => {
            let reps = replicate(cfg, exec, |seed| run_queue(cfg, seed, exec))?;
            let n = cfg.n_users();
            let mut files = Vec::new();
            for r in &reps {
                let mut buf = Vec::new();
                write_trace_csv(&mut buf, &r.records, n)?;
                files.push((trace_name(cfg, r.summary.seed), buf));
            }
            let converged = reps.iter().all(|r| r.summary.converged());
            let lat: Vec<f64> = reps.iter().map(|r| r.summary.latency_violation_pct).collect();
            let sr: Vec<f64> = reps.iter().map(|r| r.summary.avg_sum_rate).collect();
            Ok(Report {
                command,
                summary: json!({
                    "replications": reps.iter().map(|r| &r.summary).collect::<Vec<_>>(),
                    "aggregate": { "latency_violation_pct": mean_std(&lat), "avg_sum_rate": mean_std(&sr) },
                }),
                files,
                converged,
            })
        }
        Command::Diagnostics => {
            let d = diagnostics(cfg, cfg.seed, exec)?;
            Ok(Report {
                command,
                summary: serde_json::to_value(&d)?,
                files: vec![("diagnostics.json".into(), serde_json::to_vec_pretty(&d)?)],
                converged: true,
            })
        }
        Command::RateStudy => {
            let study = rate_study(cfg, exec)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["seed", "K", "min_residual_sq"])?;
            for s in &study.seeds {
                for (k, r) in study.horizons.iter().zip(&s.min_residual_sq) {
                    w.write_record([s.seed.to_string(), k.to_string(), r.to_string()])?;
                }
            }
            let csv = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(Report {
                command,
                summary: serde_json::to_value(&study)?,
                files: vec![("rate_study.csv".into(), csv)],
                converged: true,
            })
        }
    }
}

/// Writes the report files, `summary.json` (resolved config plus a timestamp)
/// and `config.resolved.json` into `dir`.
pub fn write_report(dir: &Path, cfg: &RunConfig, report: &Report) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in &report.files {
        std::fs::write(dir.join(name), bytes)?;
    }
    let resolved = serde_json::to_value(cfg)?;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let summary = json!({
        "command": report.command.name(),
        "timestamp_unix": stamp,
        "converged": report.converged,
        "results": report.summary,
        "config": resolved,
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    std::fs::write(dir.join("config.resolved.json"), cfg.to_json()?)?;
    Ok(())
}

fn trace_name(cfg: &RunConfig, seed: u64) -> String {
    if cfg.replications == 1 {
        "trace.csv".into()
    } else {
        format!("trace_seed{seed}.csv")
    }
}

/// Runs `f` for seeds `seed, seed + 1, ...`, in parallel.
fn replicate<T: Send>(cfg: &RunConfig, exec: Exec, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    exec.try_map(cfg.replications, |r| f(cfg.seed + r as u64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let m = xs.len() as f64;
    if xs.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = xs.iter().sum::<f64>() / m;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

// ---- URA bench -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchCell {
    pub backend: String,
    pub kappa: f64,
    pub draws: usize,
    pub mean_sum_rate: f64,
    pub std_sum_rate: f64,
}

fn ura_channel(cfg: &RunConfig, seed: u64) -> Result<UraChannel> {
    Ok(match &cfg.channel {
        ChannelConfig::Rayleigh { n_users, .. } => UraChannel::Rayleigh { n_users: *n_users },
        ChannelConfig::Multicell { fading, .. } => {
            UraChannel::Multicell(MulticellChannel::new(cfg.channel.topology(seed)?, fading.clone(), seed)?)
        }
    })
}

/// Sum rate of each back-end at each activation probability. All back-ends
/// see the same channel and activation draws.
pub fn ura_bench(cfg: &RunConfig, exec: Exec) -> Result<Vec<BenchCell>> {
    let channel = ura_channel(cfg, cfg.seed)?;
    let noise = cfg.channel.noise(cfg.ura.p_max_watts());
    let n = cfg.n_users();
    let mut cells = Vec::new();
    for &kind in &cfg.bench.backends {
        let mut c = cfg.clone();
        c.ura.kind = kind;
        let policy = c.policy(cfg.seed, exec)?;
        for (ki, &kappa) in cfg.bench.kappas.iter().enumerate() {
            let key = BatchKey::new(cfg.seed, 0, ki as u64, phase::DIAGNOSTIC);
            let sr = exec.try_map(cfg.bench.draws, |j| {
                let xi = UsvSample::new((0..n).map(|i| key.coin(j, i) < kappa).collect());
                let g = channel.draw(&key, j, j as u64)?;
                let p = policy_ura_gains(policy.as_ref(), &g, &xi, noise)?;
                Ok(masked_rates(&g, p.as_slice(), noise, &xi)?.iter().sum::<f64>())
            })?;
            let ms = mean_std(&sr);
            cells.push(BenchCell {
                backend: policy.name().to_string(),
                kappa,
                draws: sr.len(),
                mean_sum_rate: ms.mean,
                std_sum_rate: ms.std,
            });
        }
    }
    Ok(cells)
}

// ---- rate-demand runs ------------------------------------------------------

pub struct RateRun {
    pub seed: u64,
    pub output: RunOutput,
    pub overhead: Option<OverheadLedger>,
}

impl RateRun {
    pub fn converged(&self) -> bool {
        self.output.windows.iter().all(|w| w.convergence_iteration.is_some())
    }

    fn summary(&self) -> Value {
        json!({
            "seed": self.seed,
            "windows": self.output.windows,
            "final_lambda": self.output.final_state.lambda,
            "final_kappa": self.output.final_state.kappa,
            "overhead": self.overhead.as_ref().map(|l| json!({
                "bits": l.total_bits(),
                "messages": l.total_messages(),
                "delivery_bps_per_user": l.delivery_bps(),
                "broadcast_bps_per_user": l.broadcast_bps(),
            })),
        })
    }
}

fn aggregate_runs(reps: &[RateRun]) -> Value {
    let n_windows = reps.first().map_or(0, |r| r.output.windows.len());
    let windows: Vec<Value> = (0..n_windows)
        .map(|w| {
            let pick = |f: &dyn Fn(&WindowSummary) -> f64| -> MeanStd {
                mean_std(&reps.iter().map(|r| f(&r.output.windows[w])).collect::<Vec<_>>())
            };
            json!({
                "window": w,
                "steady_violation_pct": pick(&|s| s.steady_violation_pct),
                "steady_sum_utility": pick(&|s| s.steady_sum_utility),
            })
        })
        .collect();
    json!({ "windows": windows })
}

pub fn rate_oracle(cfg: &RunConfig, seed: u64, exec: Exec) -> Result<RateOracle> {
    let p_max = cfg.ura.p_max_watts();
    let demands = DemandSpec::rates(&vec![0.0; cfg.n_users()])?;
    RateOracle::new(ura_channel(cfg, seed)?, cfg.policy(seed, exec)?, cfg.channel.noise(p_max), demands, exec)
}

/// Runs the solver against `oracle` in the configured mode.
pub fn solve(
    cfg: &RunConfig,
    seed: u64,
    oracle: &mut dyn GapOracle,
    windows: &[Window],
) -> Result<(RunOutput, Option<OverheadLedger>)> {
    let solver = cfg.solver(seed);
    match cfg.mode {
        Mode::Centralized => Ok((run(oracle, &solver, windows)?, None)),
        Mode::Distributed => {
            if cfg.alcor.method != Method::Alcor {
                return Err(Error::Config("distributed mode runs the ALCOR method only".into()));
            }
            let bus = Bus::new(cfg.bus, cfg.fault.drop_prob, seed)?;
            let mut d = DistributedAlcor::new(oracle.n_users(), bus, cfg.alcor.kappa_offset, cfg.traffic.dt);
            let out = run_with(&mut d, oracle, &solver, windows)?;
            Ok((out, Some(d.ledger)))
        }
    }
}

pub fn run_rate(cfg: &RunConfig, seed: u64, exec: Exec) -> Result<RateRun> {
    let windows = cfg.rate_windows()?;
    let mut oracle = rate_oracle(cfg, seed, exec)?;
    let (output, overhead) = solve(cfg, seed, &mut oracle, &windows)?;
    Ok(RateRun { seed, output, overhead })
}

// ---- queue runs ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueueUser {
    pub user: usize,
    pub delay_sensitive: bool,
    pub nu: f64,
    pub threshold_packets: Option<u64>,
    pub mean_queue: f64,
    /// Little's-law latency of the steady-state queue.
    pub latency_ms: f64,
    pub violation_pct: Option<f64>,
    /// Packets per instant over the steady-state tail.
    pub queue_trend: f64,
    pub unstable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueueSummary {
    pub seed: u64,
    pub users: Vec<QueueUser>,
    pub avg_sum_rate: f64,
    /// Over delay-sensitive users with stable queues.
    pub avg_latency_ms: f64,
    /// Share of steady-state instants, pooled over delay-sensitive users, in
    /// which the queue exceeds its threshold.
    pub latency_violation_pct: f64,
    pub unstable_users: Vec<usize>,
    pub convergence_iterations: Option<usize>,
    pub convergence_ms: Option<f64>,
}

impl QueueSummary {
    pub fn converged(&self) -> bool {
        self.unstable_users.is_empty() && self.convergence_iterations.is_some()
    }
}

pub struct QueueRun {
    pub summary: QueueSummary,
    pub records: Vec<crate::metrics::MetricsRecord>,
    pub history: Vec<Vec<u64>>,
}

/// Growth per instant above this share of the arrival rate marks a queue as
/// unstable.
pub const UNSTABLE_TREND_SHARE: f64 = 0.01;

pub fn run_queue(cfg: &RunConfig, seed: u64, exec: Exec) -> Result<QueueRun> {
    let ChannelConfig::Multicell { fading, .. } = &cfg.channel else {
        return Err(Error::Config("queue runs need channel.kind = multicell".into()));
    };
    let n = cfg.n_users();
    let spec = cfg.traffic.spec(n, seed)?;
    let channel = MulticellChannel::new(cfg.channel.topology(seed)?, fading.clone(), seed)?;
    let mut oracle = QueueOracle::new(channel, cfg.policy(seed, exec)?, spec.clone(), seed, exec)?;
    let default_demands = spec.demands()?;
    let windows: Vec<Window> = if cfg.windows.is_empty() {
        vec![Window { demands: default_demands, iterations: cfg.alcor.k }]
    } else {
        cfg.windows
            .iter()
            .map(|w| {
                Ok(Window {
                    demands: match &w.demands {
                        Some(d) => d.to_spec()?,
                        None => default_demands.clone(),
                    },
                    iterations: w.k.unwrap_or(cfg.alcor.k),
                })
            })
            .collect::<Result<_>>()?
    };
    let mut cfg = cfg.clone();
    // Queue gaps have no plug-in mean field.
    cfg.metrics.checkpoint = CheckpointSchedule::Off;
    let (output, _) = solve(&cfg, seed, &mut oracle, &windows)?;
    let history = std::mem::take(&mut oracle.history);
    let summary = summarize_queue(&cfg, seed, &spec, &windows, &output, &history)?;
    Ok(QueueRun { summary, records: output.records, history })
}

fn summarize_queue(
    cfg: &RunConfig,
    seed: u64,
    spec: &crate::traffic::TrafficSpec,
    windows: &[Window],
    output: &RunOutput,
    history: &[Vec<u64>],
) -> Result<QueueSummary> {
    let n = spec.n_users();
    // Instants consumed by each iteration.
    let per_iter: Vec<usize> = output
        .records
        .iter()
        .map(|r| if cfg.alcor.method == Method::Alcor { 2 * r.batch } else { r.batch })
        .collect();
    if per_iter.iter().sum::<usize>() != history.len() {
        return Err(Error::Numerical("queue history does not match the iteration trace".into()));
    }
    // Thresholds of the last window apply to the steady state.
    let last = windows.last().map(|w| &w.demands);
    let thresholds: Vec<Option<u64>> = (0..n)
        .map(|i| match (&spec.users[i].sensitivity, last) {
            (Sensitivity::DelaySensitive { latency_ms }, demands) => {
                let from_demand = demands.and_then(|d| match d.entries()[i] {
                    Demand::Latency { d_max, .. } => Some(d_max),
                    _ => None,
                });
                Ok(Some(match from_demand {
                    Some(t) => t,
                    None => crate::constraints::latency_threshold(*latency_ms, spec.users[i].nu)?,
                }))
            }
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;

    let tail = ((history.len() as f64) * cfg.metrics.steady_fraction).ceil() as usize;
    let start = history.len() - tail.min(history.len());
    let steady = &history[start..];
    let m = steady.len().max(1) as f64;

    let mut users = Vec::with_capacity(n);
    let mut over = 0usize;
    let mut ds_instants = 0usize;
    for i in 0..n {
        let series: Vec<f64> = steady.iter().map(|q| q[i] as f64).collect();
        let mean_queue = series.iter().sum::<f64>() / m;
        let nu = spec.users[i].nu;
        let slope = trend(&series);
        let unstable = slope > UNSTABLE_TREND_SHARE * nu * spec.dt;
        let violation_pct = thresholds[i].map(|t| {
            let c = steady.iter().filter(|q| q[i] > t).count();
            over += c;
            ds_instants += steady.len();
            100.0 * c as f64 / m
        });
        users.push(QueueUser {
            user: i,
            delay_sensitive: thresholds[i].is_some(),
            nu,
            threshold_packets: thresholds[i],
            mean_queue,
            latency_ms: 1000.0 * mean_queue / nu,
            violation_pct,
            queue_trend: slope,
            unstable,
        });
    }
    let stable_ds: Vec<&QueueUser> = users.iter().filter(|u| u.delay_sensitive && !u.unstable).collect();
    let avg_latency_ms = if stable_ds.is_empty() {
        0.0
    } else {
        stable_ds.iter().map(|u| u.latency_ms).sum::<f64>() / stable_ds.len() as f64
    };

    // Per-iteration share of delay-sensitive user-instants over threshold,
    // smoothed over the convergence horizon.
    let horizon = cfg.metrics.horizon;
    let mut raw = Vec::with_capacity(per_iter.len());
    let mut t = 0usize;
    for &len in &per_iter {
        let mut c = 0usize;
        let mut tot = 0usize;
        for q in &history[t..t + len] {
            for (i, th) in thresholds.iter().enumerate() {
                if let Some(th) = th {
                    tot += 1;
                    c += usize::from(q[i] > *th);
                }
            }
        }
        raw.push(if tot > 0 { 100.0 * c as f64 / tot as f64 } else { 0.0 });
        t += len;
    }
    let smoothed: Vec<f64> = (0..raw.len())
        .map(|k| {
            let lo = (k + 1).saturating_sub(horizon);
            raw[lo..=k].iter().sum::<f64>() / (k + 1 - lo) as f64
        })
        .collect();
    let convergence_iterations = first_sustained(&smoothed, cfg.metrics.convergence_tol_pct, horizon.min(raw.len().max(1)));
    let convergence_ms = convergence_iterations
        .map(|k| per_iter[..k].iter().sum::<usize>() as f64 * spec.dt * 1000.0);

    let steady_iters = output.records.len() - (((output.records.len() as f64) * cfg.metrics.steady_fraction).ceil() as usize)
        .min(output.records.len());
    let sr: Vec<f64> = output.records[steady_iters..].iter().map(|r| r.sum_utility).collect();

    Ok(QueueSummary {
        seed,
        unstable_users: users.iter().filter(|u| u.unstable).map(|u| u.user).collect(),
        users,
        avg_sum_rate: mean_std(&sr).mean,
        avg_latency_ms,
        latency_violation_pct: if ds_instants > 0 { 100.0 * over as f64 / ds_instants as f64 } else { 0.0 },
        convergence_iterations,
        convergence_ms,
    })
}

// ---- diagnostics -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BernoulliCheck {
    pub kappa: Vec<f64>,
    pub empirical: Vec<f64>,
    /// Largest `|empirical - kappa|` in units of the binomial standard error.
    pub max_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    pub lipschitz: LipschitzEstimate,
    pub variance: VarianceReport,
    pub bernoulli: BernoulliCheck,
}

pub fn diagnostics(cfg: &RunConfig, seed: u64, exec: Exec) -> Result<Diagnostics> {
    let d = &cfg.diagnostics;
    let n = cfg.n_users();
    let mut oracle = rate_oracle(cfg, seed, exec)?;
    if let Some(w) = cfg.windows.first().and_then(|w| w.demands.as_ref()) {
        oracle.set_demands(&w.to_spec()?)?;
    }
    let mut rng = substream(seed, &[domain::SYNTHETIC, 1]);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * d.lambda_max).collect()
    };
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..d.lipschitz_pairs).map(|_| (draw(&mut rng), draw(&mut rng))).collect();
    let lipschitz = estimate_lipschitz(&mut oracle, &pairs, d.lipschitz_samples, seed)?;
    let lambda = draw(&mut rng);
    let variance =
        estimate_oracle_variance(&mut oracle, &lambda, d.variance_samples, d.variance_batch, d.variance_batches, seed)?;

    let kappa = crate::alcor::kappa_from_lambda_with(&lambda, cfg.alcor.kappa_offset)?;
    let key = BatchKey::new(seed, u64::MAX - 2, 0, phase::DIAGNOSTIC);
    let xs = crate::alcor::sample_usv_keyed(&kappa, &key, d.bernoulli_draws)?;
    let m = d.bernoulli_draws as f64;
    let empirical: Vec<f64> = (0..n).map(|i| xs.iter().filter(|x| x.is_active(i)).count() as f64 / m).collect();
    let max_sigma = kappa
        .iter()
        .zip(&empirical)
        .map(|(k, e)| {
            let se = (k * (1.0 - k) / m).sqrt();
            if se > 0.0 {
                (e - k).abs() / se
            } else if (e - k).abs() > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    Ok(Diagnostics {
        lipschitz,
        variance,
        bernoulli: BernoulliCheck { kappa, empirical, max_sigma },
    })
}

// ---- convergence-rate study ------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedStudy {
    pub seed: u64,
    /// Smallest checkpointed residual up to each horizon.
    pub min_residual_sq: Vec<f64>,
    pub slope: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateStudy {
    pub horizons: Vec<usize>,
    pub seeds: Vec<SeedStudy>,
}

fn study_oracle(cfg: &RunConfig, seed: u64, exec: Exec) -> Result<Box<dyn GapOracle>> {
    Ok(match cfg.rate_study.oracle {
        RateOracleKind::Synthetic { sigma } => Box::new(LinearOracle::new(vec![1.0; cfg.n_users()], sigma)?),
        RateOracleKind::Scenario => Box::new(rate_oracle(cfg, seed, exec)?),
    })
}

/// Minimum checkpointed residual versus horizon, per seed. With a horizon-
/// dependent batch schedule every horizon is a separate run; otherwise one
/// run to the largest horizon is read at its prefixes.
pub fn rate_study(cfg: &RunConfig, exec: Exec) -> Result<RateStudy> {
    let rs = &cfg.rate_study;
    let mut horizons = rs.horizons.clone();
    horizons.sort_unstable();
    horizons.dedup();
    let demands = cfg
        .windows
        .first()
        .and_then(|w| w.demands.as_ref())
        .ok_or_else(|| Error::Config("rate_study needs the first window's demands".into()))?
        .to_spec()?;
    let mut c = cfg.clone();
    c.metrics.checkpoint = CheckpointSchedule::Geometric { per_decade: rs.checkpoints_per_decade };
    c.metrics.checkpoint_samples = rs.checkpoint_samples;

    let study_seed = |seed: u64| -> Result<SeedStudy> {
        let per_horizon = c.alcor.batch == BatchSchedule::SqrtK;
        let runs: Vec<usize> = if per_horizon { horizons.clone() } else { vec![*horizons.last().unwrap()] };
        let mut mins = Vec::with_capacity(horizons.len());
        for &k_run in &runs {
            let mut oracle = study_oracle(&c, seed, Exec::Sequential)?;
            let windows = [Window { demands: demands.clone(), iterations: k_run }];
            let (out, _) = solve(&c, seed, oracle.as_mut(), &windows)?;
            let res: Vec<(usize, f64)> =
                out.records.iter().filter_map(|r| r.residual_sq.map(|x| (r.k, x))).collect();
            let targets: &[usize] = if per_horizon { std::slice::from_ref(&k_run) } else { &horizons };
            for &k in targets {
                let m = res.iter().filter(|(i, _)| *i < k).map(|(_, x)| *x).fold(f64::INFINITY, f64::min);
                mins.push(m);
            }
        }
        let xs: Vec<f64> = horizons.iter().map(|&k| k as f64).collect();
        let slope = loglog_slope(&xs, &mins).ok();
        Ok(SeedStudy { seed, min_residual_sq: mins, slope })
    };
    let seeds = exec.try_map(rs.seeds.len(), |i| study_seed(rs.seeds[i]))?;
    Ok(RateStudy { horizons, seeds })
}
