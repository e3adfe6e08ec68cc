//! Evaluation quantities: moving-average utilities, demand violation, the
//! natural residual of the complementarity problem, convergence detection and
//! Monte-Carlo diagnostics of the gap oracle.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::alcor::{kappa_from_lambda, sample_usv_keyed, GapOracle, Query};
use crate::error::{invalid, Result};
use crate::rng::{phase, BatchKey};

/// Percentage by which the worst user with a positive demand falls short of
/// it. Users with zero demand are ignored.
pub fn violation(u_min: &[f64], avg: &[f64]) -> f64 {
    u_min
        .iter()
        .zip(avg)
        .filter(|(u, _)| **u > 0.0)
        .map(|(u, r)| (u - r).max(0.0) / u * 100.0)
        .fold(0.0, f64::max)
        .min(100.0)
}

/// `sum_i r_i^2` with `r_i = |F_i|` for `lambda_i > 0` and
/// `r_i = max(0, F_i)` for `lambda_i = 0`.
pub fn residual_sq(lambda: &[f64], f: &[f64]) -> f64 {
    lambda
        .iter()
        .zip(f)
        .map(|(&l, &fi)| {
            let r = if l > 0.0 { fi.abs() } else { fi.max(0.0) };
            r * r
        })
        .sum()
}

/// Sliding mean over the last `window` instants.
#[derive(Clone, Debug)]
pub struct MovingAverage {
    window: usize,
    buf: VecDeque<Vec<f64>>,
    sum: Vec<f64>,
}

impl MovingAverage {
    pub fn new(n: usize, window: usize) -> Self {
        Self {
            window: window.max(1),
            buf: VecDeque::new(),
            sum: vec![0.0; n],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        if self.buf.len() == self.window {
            let old = self.buf.pop_front().expect("nonempty");
            for (s, o) in self.sum.iter_mut().zip(&old) {
                *s -= o;
            }
        }
        for (s, v) in self.sum.iter_mut().zip(x) {
            *s += v;
        }
        self.buf.push_back(x.to_vec());
    }

    /// Recomputed from the buffer so long runs do not accumulate drift.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.sum.len();
        if self.buf.is_empty() {
            return vec![0.0; n];
        }
        let mut acc = vec![0.0; n];
        for row in &self.buf {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let m = self.buf.len() as f64;
        acc.into_iter().map(|a| a / m).collect()
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn clear(&mut self) {
        self.buf.clear();
        self.sum.iter_mut().for_each(|s| *s = 0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSchedule {
    Off,
    /// Every `n` iterations, plus the last one of each window.
    Every(usize),
    /// About `per_decade` log-spaced iterations per decade of `k`.
    Geometric { per_decade: usize },
}

impl CheckpointSchedule {
    /// Whether the iterate after step `k` (0-based) of a `horizon`-long
    /// window is checkpointed.
    pub fn due(&self, k: usize, horizon: usize) -> bool {
        let done = k + 1;
        match *self {
            CheckpointSchedule::Off => false,
            CheckpointSchedule::Every(n) => n > 0 && (done.is_multiple_of(n) || done == horizon),
            CheckpointSchedule::Geometric { per_decade } => {
                if done == horizon || done <= 1 {
                    return true;
                }
                let step = 1.0 / per_decade.max(1) as f64;
                let a = ((done - 1) as f64).log10() / step;
                let b = (done as f64).log10() / step;
                b.floor() > a.floor()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Moving-average window in channel instants.
    pub window: usize,
    pub checkpoint: CheckpointSchedule,
    pub checkpoint_samples: usize,
    /// Iterations a condition must hold to count as converged.
    pub horizon: usize,
    /// Violation (%) below which a window counts as converged.
    pub convergence_tol_pct: f64,
    /// Absolute rate tolerance used for demand tracking.
    pub tracking_tol: f64,
    /// Trailing fraction of each window treated as steady state.
    pub steady_fraction: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            window: 200,
            checkpoint: CheckpointSchedule::Every(25),
            checkpoint_samples: 2000,
            horizon: 50,
            convergence_tol_pct: 3.0,
            tracking_tol: 0.1,
            steady_fraction: 0.5,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.horizon == 0 {
            return Err(invalid("metrics window and horizon must be positive"));
        }
        if !(self.steady_fraction > 0.0 && self.steady_fraction <= 1.0) {
            return Err(invalid("steady_fraction must lie in (0, 1]"));
        }
        if self.checkpoint != CheckpointSchedule::Off && self.checkpoint_samples == 0 {
            return Err(invalid("checkpoints need at least one Monte-Carlo sample"));
        }
        Ok(())
    }
}

/// One row of the per-iteration trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub window: usize,
    pub k: usize,
    pub alpha: f64,
    pub batch: usize,
    pub lambda: Vec<f64>,
    pub kappa: Vec<f64>,
    pub lambda_bar: Vec<f64>,
    pub kappa_bar: Vec<f64>,
    pub avg_utility: Vec<f64>,
    pub violation_pct: f64,
    pub residual_sq: Option<f64>,
    /// Mean sum utility over the instants of this iteration.
    pub sum_utility: f64,
    pub overhead_bits: u64,
    pub overhead_messages: u64,
}

impl MetricsRecord {
    /// Largest `|avg - u_min|` over users with a positive demand.
    pub fn tracking_error(&self, u_min: &[f64]) -> f64 {
        tracking_error(u_min, &self.avg_utility)
    }
}

pub fn tracking_error(u_min: &[f64], avg: &[f64]) -> f64 {
    u_min
        .iter()
        .zip(avg)
        .filter(|(u, _)| **u > 0.0)
        .map(|(u, r)| (u - r).abs())
        .fold(0.0, f64::max)
}

/// First index from which `series[k] <= tol` holds for `horizon` consecutive
/// entries (or until the end, if the series started satisfying and is shorter).
/// `None` means not converged.
pub fn first_sustained(series: &[f64], tol: f64, horizon: usize) -> Option<usize> {
    let mut start = None;
    for (k, &v) in series.iter().enumerate() {
        if v <= tol {
            let s = *start.get_or_insert(k);
            if k + 1 - s >= horizon {
                return Some(s);
            }
        } else {
            start = None;
        }
    }
    None
}

/// Iterations until the violation stays within `tolerance` for `horizon`
/// iterations.
pub fn convergence_time(records: &[MetricsRecord], tolerance: f64, horizon: usize) -> Result<Option<usize>> {
    if records.is_empty() {
        return Err(invalid("empty trace"));
    }
    let v: Vec<f64> = records.iter().map(|r| r.violation_pct).collect();
    Ok(first_sustained(&v, tolerance, horizon))
}

/// Simulated milliseconds for `iterations` iterations of `2 * batch` instants.
pub fn iterations_to_ms(iterations: usize, batch: usize, instant_ms: f64) -> f64 {
    iterations as f64 * 2.0 * batch as f64 * instant_ms
}

/// Mean and standard error of an oracle's expected gap.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

/// Per-coordinate mean and standard error of the gap at `query` from
/// `mc_samples` single-sample evaluations.
pub fn estimate_field(
    oracle: &mut dyn GapOracle,
    query: &Query,
    mc_samples: usize,
    key: BatchKey,
) -> Result<FieldEstimate> {
    if mc_samples < 2 {
        return Err(invalid("need at least two Monte-Carlo samples"));
    }
    let samples = sample_usv_keyed(query.kappa, &key, mc_samples)?;
    let out = oracle.evaluate(query, &samples, key)?;
    let var = sample_variance(&out.gaps);
    let m = mc_samples as f64;
    Ok(FieldEstimate {
        mean: out.mean_gap,
        std_err: var.iter().map(|v| (v / m).sqrt()).collect(),
    })
}

/// Unbiased per-coordinate variance of the rows.
pub fn sample_variance(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.first().map_or(0, Vec::len);
    let m = rows.len() as f64;
    if rows.len() < 2 {
        return vec![0.0; n];
    }
    let mut mean = vec![0.0; n];
    for r in rows {
        for (a, v) in mean.iter_mut().zip(r) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m);
    let mut var = vec![0.0; n];
    for r in rows {
        for ((a, v), mu) in var.iter_mut().zip(r).zip(&mean) {
            *a += (v - mu).powi(2);
        }
    }
    var.into_iter().map(|a| a / (m - 1.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub std_err: f64,
    pub pairs_used: usize,
}

/// `max ||F(a) - F(b)|| / ||a - b||` over the pairs, with `F` averaged over
/// `mc_samples` draws at `kappa(lambda)`. Coincident pairs are skipped.
pub fn estimate_lipschitz(
    oracle: &mut dyn GapOracle,
    pairs: &[(Vec<f64>, Vec<f64>)],
    mc_samples: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if pairs.len() < 2 {
        return Err(invalid("need at least two lambda pairs"));
    }
    let mut best = LipschitzEstimate { value: 0.0, std_err: 0.0, pairs_used: 0 };
    for (p, (a, b)) in pairs.iter().enumerate() {
        let dist = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        let fa = field_at(oracle, a, mc_samples, BatchKey::new(seed, p as u64, 0, phase::DIAGNOSTIC))?;
        let fb = field_at(oracle, b, mc_samples, BatchKey::new(seed, p as u64, 1, phase::DIAGNOSTIC))?;
        let diff: Vec<f64> = fa.mean.iter().zip(&fb.mean).map(|(x, y)| x - y).collect();
        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let ratio = norm / dist;
        let se = if norm > 0.0 {
            diff.iter()
                .zip(fa.std_err.iter().zip(&fb.std_err))
                .map(|(d, (sa, sb))| (d / norm).powi(2) * (sa * sa + sb * sb))
                .sum::<f64>()
                .sqrt()
                / dist
        } else {
            0.0
        };
        best.pairs_used += 1;
        if ratio > best.value || best.pairs_used == 1 {
            best.value = ratio;
            best.std_err = se;
        }
    }
    Ok(best)
}

fn field_at(oracle: &mut dyn GapOracle, lambda: &[f64], mc: usize, key: BatchKey) -> Result<FieldEstimate> {
    let kappa = kappa_from_lambda(lambda)?;
    estimate_field(oracle, &Query { lambda, kappa: &kappa }, mc, key)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceReport {
    /// Single-sample variance of each gap coordinate.
    pub per_coordinate: Vec<f64>,
    /// `E ||F_hat - F||^2`, the sum of the coordinates.
    pub sigma_sq: f64,
    pub batch: usize,
    /// Per-coordinate variance of the batch mean.
    pub batch_per_coordinate: Vec<f64>,
    /// `B * var(batch mean) / var(single)` summed over coordinates; 1 for
    /// independent samples.
    pub batch_ratio: f64,
}

/// Oracle variance at a fixed `lambda` from `mc_samples` single draws and
/// `n_batches` batch means of size `batch`.
pub fn estimate_oracle_variance(
    oracle: &mut dyn GapOracle,
    lambda: &[f64],
    mc_samples: usize,
    batch: usize,
    n_batches: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if mc_samples < 100 {
        return Err(invalid("variance estimation needs at least 100 samples"));
    }
    if batch == 0 || n_batches < 2 {
        return Err(invalid("need batch >= 1 and at least two batches"));
    }
    let kappa = kappa_from_lambda(lambda)?;
    let q = Query { lambda, kappa: &kappa };
    let key = BatchKey::new(seed, u64::MAX, 0, phase::DIAGNOSTIC);
    let single = sample_usv_keyed(&kappa, &key, mc_samples)?;
    let per_coordinate = sample_variance(&oracle.evaluate(&q, &single, key)?.gaps);
    let mut means = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let key = BatchKey::new(seed, u64::MAX - 1, b as u64, phase::DIAGNOSTIC);
        let s = sample_usv_keyed(&kappa, &key, batch)?;
        means.push(oracle.evaluate(&q, &s, key)?.mean_gap);
    }
    let batch_per_coordinate = sample_variance(&means);
    let sigma_sq: f64 = per_coordinate.iter().sum();
    let batch_sum: f64 = batch_per_coordinate.iter().sum();
    let batch_ratio = if sigma_sq > 0.0 {
        batch as f64 * batch_sum / sigma_sq
    } else {
        1.0
    };
    Ok(VarianceReport {
        per_coordinate,
        sigma_sq,
        batch,
        batch_per_coordinate,
        batch_ratio,
    })
}

/// Least-squares slope of `log10 y` against `log10 x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("slope needs at least two matching points"));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(invalid("log-log fit needs positive values"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.log10()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.log10()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Header of the trace CSV for `n` users.
pub fn trace_header(n: usize) -> Vec<String> {
    let mut h = vec!["window".to_string(), "k".into(), "alpha_k".into(), "B_k".into()];
    for prefix in ["lambda", "kappa", "avg_rate"] {
        h.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    h.extend(
        ["violation_pct", "residual_sq", "overhead_bits", "overhead_messages"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

pub fn write_trace_csv<W: Write>(out: W, records: &[MetricsRecord], n: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trace_header(n))?;
    for r in records {
        let mut row = vec![
            r.window.to_string(),
            r.k.to_string(),
            r.alpha.to_string(),
            r.batch.to_string(),
        ];
        for v in [&r.lambda, &r.kappa, &r.avg_utility] {
            row.extend(v.iter().map(f64::to_string));
        }
        row.push(r.violation_pct.to_string());
        row.push(r.residual_sq.map(|x| x.to_string()).unwrap_or_default());
        row.push(r.overhead_bits.to_string());
        row.push(r.overhead_messages.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
