//! Multi-window driver shared by every solver variant.

use serde::{Deserialize, Serialize};

use crate::alcor::{alcor_step, simple_baseline_step, AlcorState, GapOracle, Query, Schedule, StepReport, KAPPA_OFFSET};
use crate::constraints::DemandSpec;
use crate::error::{invalid, Result};
use crate::metrics::{
    first_sustained, residual_sq, tracking_error, violation, MetricsConfig, MetricsRecord, MovingAverage,
};
use crate::rng::{phase, BatchKey};

/// Anything that advances a solver state by one iteration.
pub trait Stepper {
    fn step(
        &mut self,
        oracle: &mut dyn GapOracle,
        schedule: &Schedule,
        seed: u64,
        window: u64,
        horizon: usize,
    ) -> Result<StepReport>;

    fn state(&self) -> &AlcorState;

    /// Called before every window; `warm` keeps the pressure vector.
    fn start_window(&mut self, warm: bool);

    /// Cumulative (bits, messages) exchanged so far.
    fn overhead(&self) -> (u64, u64) {
        (0, 0)
    }
}

pub struct Centralized {
    pub state: AlcorState,
}

impl Centralized {
    pub fn new(n: usize, kappa_offset: f64) -> Self {
        Self { state: AlcorState::with_offset(n, kappa_offset) }
    }
}

impl Stepper for Centralized {
    fn step(&mut self, oracle: &mut dyn GapOracle, schedule: &Schedule, seed: u64, window: u64, horizon: usize) -> Result<StepReport> {
        alcor_step(&mut self.state, oracle, schedule, seed, window, horizon)
    }

    fn state(&self) -> &AlcorState {
        &self.state
    }

    fn start_window(&mut self, warm: bool) {
        if warm {
            self.state.warm_restart();
        } else {
            self.state = AlcorState::with_offset(self.state.n_users(), self.state.kappa_offset);
        }
    }
}

/// Projected stochastic ascent without the anchor batch.
pub struct Baseline {
    pub state: AlcorState,
}

impl Baseline {
    pub fn new(n: usize, kappa_offset: f64) -> Self {
        Self { state: AlcorState::with_offset(n, kappa_offset) }
    }
}

impl Stepper for Baseline {
    fn step(&mut self, oracle: &mut dyn GapOracle, schedule: &Schedule, seed: u64, window: u64, horizon: usize) -> Result<StepReport> {
        simple_baseline_step(&mut self.state, oracle, schedule, seed, window, horizon)
    }

    fn state(&self) -> &AlcorState {
        &self.state
    }

    fn start_window(&mut self, warm: bool) {
        if warm {
            self.state.warm_restart();
        } else {
            self.state = AlcorState::with_offset(self.state.n_users(), self.state.kappa_offset);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Alcor,
    Baseline,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub schedule: Schedule,
    pub kappa_offset: f64,
    pub warm_start: bool,
    pub method: Method,
    pub metrics: MetricsConfig,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            kappa_offset: KAPPA_OFFSET,
            warm_start: true,
            method: Method::Alcor,
            metrics: MetricsConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub demands: DemandSpec,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowSummary {
    pub window: usize,
    pub iterations: usize,
    pub u_min: Vec<f64>,
    /// Mean utility over the steady-state tail of the window.
    pub steady_avg_utility: Vec<f64>,
    pub steady_violation_pct: f64,
    pub steady_sum_utility: f64,
    /// First iteration after which the moving-average violation stays within
    /// tolerance for the horizon.
    pub convergence_iteration: Option<usize>,
    /// Same, for the absolute tracking error.
    pub tracking_convergence_iteration: Option<usize>,
    pub final_residual_sq: Option<f64>,
    pub mean_steady_residual_sq: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub windows: Vec<WindowSummary>,
    pub final_state: AlcorState,
}

pub fn run(oracle: &mut dyn GapOracle, cfg: &SolverConfig, windows: &[Window]) -> Result<RunOutput> {
    let n = oracle.n_users();
    match cfg.method {
        Method::Alcor => run_with(&mut Centralized::new(n, cfg.kappa_offset), oracle, cfg, windows),
        Method::Baseline => run_with(&mut Baseline::new(n, cfg.kappa_offset), oracle, cfg, windows),
    }
}

pub fn run_with(
    stepper: &mut dyn Stepper,
    oracle: &mut dyn GapOracle,
    cfg: &SolverConfig,
    windows: &[Window],
) -> Result<RunOutput> {
    cfg.schedule.validate()?;
    cfg.metrics.validate()?;
    let n = oracle.n_users();
    if stepper.state().n_users() != n {
        return Err(invalid("solver and oracle disagree on the number of users"));
    }
    let m = &cfg.metrics;
    let mut records = Vec::new();
    let mut summaries = Vec::with_capacity(windows.len());
    let mut avg = MovingAverage::new(n, m.window);

    for (w, win) in windows.iter().enumerate() {
        oracle.set_demands(&win.demands)?;
        stepper.start_window(cfg.warm_start || w == 0);
        avg.clear();
        let u_min = win.demands.rate_floor();
        let horizon = win.iterations;
        let tail = ((horizon as f64) * m.steady_fraction).ceil() as usize;
        let steady_start = horizon - tail.min(horizon);
        let mut steady_sum = vec![0.0; n];
        let mut steady_count = 0usize;
        let mut steady_res = Vec::new();
        let first = records.len();

        for k in 0..horizon {
            let report = stepper.step(oracle, &cfg.schedule, cfg.seed, w as u64, horizon)?;
            let mut instants = 0usize;
            let mut su = 0.0;
            for u in report.anchor.utilities.iter().chain(&report.main.utilities) {
                avg.push(u);
                su += u.iter().sum::<f64>();
                instants += 1;
                if k >= steady_start {
                    for (s, x) in steady_sum.iter_mut().zip(u) {
                        *s += x;
                    }
                    steady_count += 1;
                }
            }
            let state = stepper.state();
            let residual = if m.checkpoint.due(k, horizon) {
                let key = BatchKey::new(cfg.seed, w as u64, k as u64, phase::CHECKPOINT);
                let q = Query { lambda: &state.lambda, kappa: &state.kappa };
                oracle
                    .mean_field(&q, m.checkpoint_samples, key)?
                    .map(|f| residual_sq(&state.lambda, &f))
            } else {
                None
            };
            if let (Some(r), true) = (residual, k >= steady_start) {
                steady_res.push(r);
            }
            let avg_utility = avg.mean();
            let (bits, msgs) = stepper.overhead();
            records.push(MetricsRecord {
                window: w,
                k: report.k,
                alpha: report.alpha,
                batch: report.batch,
                lambda: state.lambda.clone(),
                kappa: state.kappa.clone(),
                lambda_bar: state.lambda_bar.clone(),
                kappa_bar: state.kappa_bar.clone(),
                violation_pct: violation(&u_min, &avg_utility),
                avg_utility,
                residual_sq: residual,
                sum_utility: if instants > 0 { su / instants as f64 } else { 0.0 },
                overhead_bits: bits,
                overhead_messages: msgs,
            });
        }

        let recs = &records[first..];
        let steady_avg: Vec<f64> = if steady_count > 0 {
            steady_sum.iter().map(|s| s / steady_count as f64).collect()
        } else {
            vec![0.0; n]
        };
        let viol: Vec<f64> = recs.iter().map(|r| r.violation_pct).collect();
        let track: Vec<f64> = recs.iter().map(|r| tracking_error(&u_min, &r.avg_utility)).collect();
        summaries.push(WindowSummary {
            window: w,
            iterations: horizon,
            steady_violation_pct: violation(&u_min, &steady_avg),
            steady_sum_utility: steady_avg.iter().sum(),
            steady_avg_utility: steady_avg,
            u_min,
            convergence_iteration: first_sustained(&viol, m.convergence_tol_pct, m.horizon.min(horizon.max(1))),
            tracking_convergence_iteration: first_sustained(&track, m.tracking_tol, m.horizon.min(horizon.max(1))),
            final_residual_sq: recs.iter().rev().find_map(|r| r.residual_sq),
            mean_steady_residual_sq: if steady_res.is_empty() {
                None
            } else {
                Some(steady_res.iter().sum::<f64>() / steady_res.len() as f64)
            },
        });
    }
    Ok(RunOutput {
        records,
        windows: summaries,
        final_state: stepper.state().clone(),
    })
}
