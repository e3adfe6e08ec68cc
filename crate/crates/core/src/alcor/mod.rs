//! Time-sharing solver: Bernoulli user activation, the activation map and the
//! anchored projected iteration on the per-user pressure vector `lambda`.

mod oracle;
mod run;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::BatchKey;

pub use oracle::{
    BatchOutcome, BernoulliRateOracle, GapOracle, LinearOracle, Query, RateOracle, SharedMediumOracle,
    UraChannel,
};
pub use run::{run, run_with, Baseline, Centralized, Method, RunOutput, SolverConfig, Stepper, Window, WindowSummary};

/// Binary activation vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UsvSample {
    xi: Vec<bool>,
}

impl UsvSample {
    pub fn new(xi: Vec<bool>) -> Self {
        Self { xi }
    }

    pub fn all_active(n: usize) -> Self {
        Self { xi: vec![true; n] }
    }

    /// Convenience constructor from 0/1 entries; any nonzero is active.
    pub fn from_bits(bits: &[u8]) -> Self {
        Self {
            xi: bits.iter().map(|&b| b != 0).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.xi[i]
    }

    pub fn n_active(&self) -> usize {
        self.xi.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.xi
    }
}

/// Default additive constant of the activation map.
pub const KAPPA_OFFSET: f64 = 1.0;

/// `kappa_i = (c + lambda_i) / max_l (c + lambda_l)`.
pub fn kappa_from_lambda(lambda: &[f64]) -> Result<Vec<f64>> {
    kappa_from_lambda_with(lambda, KAPPA_OFFSET)
}

pub fn kappa_from_lambda_with(lambda: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(invalid("kappa offset must be positive and finite"));
    }
    if let Some(x) = lambda.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(invalid(format!("lambda entries must be finite and nonnegative, got {x}")));
    }
    let norm = normalization(lambda, c);
    Ok(lambda.iter().map(|&l| kappa_coordinate(l, norm, c)).collect())
}

/// `max_l (c + lambda_l)`, the only quantity users have to exchange.
pub fn normalization(lambda: &[f64], c: f64) -> f64 {
    lambda.iter().fold(c, |m, &l| m.max(c + l))
}

#[inline]
pub fn kappa_coordinate(lambda: f64, norm: f64, c: f64) -> f64 {
    (c + lambda) / norm
}

/// Per-user activation from a coin in `[0, 1)`.
#[inline]
pub fn activate(coin: f64, kappa: f64) -> bool {
    coin < kappa
}

/// `batch` activation vectors with `xi_i ~ Bern(kappa_i)` independently.
pub fn sample_usv<R: Rng + ?Sized>(kappa: &[f64], rng: &mut R, batch: usize) -> Result<Vec<UsvSample>> {
    check_kappa(kappa)?;
    Ok((0..batch)
        .map(|_| UsvSample::new(kappa.iter().map(|&k| activate(rng.random(), k)).collect()))
        .collect())
}

/// Same distribution as [`sample_usv`], but every (sample, user) coin comes
/// from its own counter-addressed stream, so users can flip their coins
/// independently and still reproduce a centralized batch.
pub fn sample_usv_keyed(kappa: &[f64], key: &BatchKey, batch: usize) -> Result<Vec<UsvSample>> {
    check_kappa(kappa)?;
    Ok((0..batch)
        .map(|j| {
            UsvSample::new(
                kappa
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| activate(key.coin(j, i), k))
                    .collect(),
            )
        })
        .collect())
}

fn check_kappa(kappa: &[f64]) -> Result<()> {
    if kappa.iter().any(|k| !(0.0..=1.0).contains(k)) {
        return Err(invalid("activation probabilities must lie in [0, 1]"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    Fixed(f64),
    /// `alpha_k = a0 / sqrt(1 + atilde * k)`.
    Diminishing { a0: f64, atilde: f64 },
}

impl AlphaSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            AlphaSchedule::Fixed(a) => a,
            AlphaSchedule::Diminishing { a0, atilde } => a0 / (1.0 + atilde * k as f64).sqrt(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            AlphaSchedule::Fixed(a) => a > 0.0 && a < 1.0,
            AlphaSchedule::Diminishing { a0, atilde } => a0 > 0.0 && a0 < 1.0 && atilde >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("alpha schedule must stay in (0, 1): {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSchedule {
    Fixed(usize),
    /// `B_k = 1 + ceil(sqrt(k))`.
    Growing,
    /// `B = ceil(sqrt(K))` for a horizon of `K` iterations.
    SqrtK,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub gamma: f64,
    pub alpha: AlphaSchedule,
    pub batch: BatchSchedule,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: AlphaSchedule::Fixed(0.9),
            batch: BatchSchedule::Fixed(25),
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma must be positive"));
        }
        if self.batch == BatchSchedule::Fixed(0) {
            return Err(invalid("batch size must be at least 1"));
        }
        self.alpha.validate()
    }

    pub fn alpha_at(&self, k: usize) -> f64 {
        self.alpha.at(k)
    }

    /// Batch size of iteration `k` in a window of `horizon` iterations.
    pub fn batch_at(&self, k: usize, horizon: usize) -> usize {
        match self.batch {
            BatchSchedule::Fixed(b) => b,
            BatchSchedule::Growing => 1 + (k as f64).sqrt().ceil() as usize,
            BatchSchedule::SqrtK => ((horizon as f64).sqrt().ceil() as usize).max(1),
        }
    }
}

/// Anchor step: `h = lbar + gamma*Gbar + (1 - alpha)*(prev_offset - gamma*Gbar)`
/// where `prev_offset = h_prev - lbar_prev`.
#[inline]
pub fn anchor_coordinate(lambda_bar: f64, prev_offset: f64, g_bar: f64, gamma: f64, alpha: f64) -> f64 {
    let step = gamma * g_bar;
    lambda_bar + step + (1.0 - alpha) * (prev_offset - step)
}

/// Correction step: `lbar' = lbar - alpha*(h - lambda - gamma*G)`.
#[inline]
pub fn correction_coordinate(lambda_bar: f64, h: f64, lambda: f64, g: f64, gamma: f64, alpha: f64) -> f64 {
    lambda_bar - alpha * (h - lambda - gamma * g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlcorState {
    /// Anchor point; may hold negative entries, which are read as zero.
    pub lambda_bar: Vec<f64>,
    pub lambda: Vec<f64>,
    pub h: Vec<f64>,
    pub kappa: Vec<f64>,
    pub kappa_bar: Vec<f64>,
    /// Iteration counter within the current window.
    pub k: usize,
    /// `h - lambda_bar` of the previous iteration.
    pub prev_offset: Vec<f64>,
    pub kappa_offset: f64,
}

impl AlcorState {
    /// All-zero pressure, every user on.
    pub fn new(n: usize) -> Self {
        Self::with_offset(n, KAPPA_OFFSET)
    }

    pub fn with_offset(n: usize, kappa_offset: f64) -> Self {
        Self {
            lambda_bar: vec![0.0; n],
            lambda: vec![0.0; n],
            h: vec![0.0; n],
            kappa: vec![1.0; n],
            kappa_bar: vec![1.0; n],
            k: 0,
            prev_offset: vec![0.0; n],
            kappa_offset,
        }
    }

    pub fn n_users(&self) -> usize {
        self.lambda.len()
    }

    /// `max(0, lambda_bar)`, the point the anchor batch is drawn at.
    pub fn anchor_lambda(&self) -> Vec<f64> {
        self.lambda_bar.iter().map(|&x| x.max(0.0)).collect()
    }

    /// Keeps the pressure but restarts the schedule.
    pub fn warm_restart(&mut self) {
        self.k = 0;
    }

    pub fn check(&self) -> Result<()> {
        let n = self.n_users();
        let lens = [
            self.lambda_bar.len(),
            self.h.len(),
            self.kappa.len(),
            self.kappa_bar.len(),
            self.prev_offset.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(invalid("state vectors have inconsistent lengths"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.lambda_bar) && finite(&self.lambda) && finite(&self.h) && finite(&self.prev_offset)) {
            return Err(Error::Numerical("solver state is not finite".into()));
        }
        if self.lambda.iter().any(|&x| x < 0.0) {
            return Err(invalid("lambda must be nonnegative"));
        }
        check_kappa(&self.kappa)?;
        check_kappa(&self.kappa_bar)
    }
}

/// What one iteration did, for metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub k: usize,
    pub alpha: f64,
    pub batch: usize,
    pub anchor: BatchOutcome,
    pub main: BatchOutcome,
}

fn check_gap(g: &[f64], what: &str, k: usize) -> Result<()> {
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite {what} gap for user {i} at iteration {k}"
        )));
    }
    Ok(())
}

/// One full iteration: anchor batch at `kappa_bar`, projected step, main batch
/// at `kappa`, correction of the anchor.
pub fn alcor_step(
    state: &mut AlcorState,
    oracle: &mut dyn GapOracle,
    schedule: &Schedule,
    seed: u64,
    window: u64,
    horizon: usize,
) -> Result<StepReport> {
    let k = state.k;
    let n = state.n_users();
    let alpha = schedule.alpha_at(k);
    let gamma = schedule.gamma;
    let batch = schedule.batch_at(k, horizon);
    let c = state.kappa_offset;

    let anchor_key = BatchKey::new(seed, window, k as u64, crate::rng::phase::ANCHOR);
    let anchor_lambda = state.anchor_lambda();
    let anchor_samples = sample_usv_keyed(&state.kappa_bar, &anchor_key, batch)?;
    let anchor = oracle.evaluate(
        &Query { lambda: &anchor_lambda, kappa: &state.kappa_bar },
        &anchor_samples,
        anchor_key,
    )?;
    check_gap(&anchor.mean_gap, "anchor", k)?;

    let h: Vec<f64> = (0..n)
        .map(|i| anchor_coordinate(state.lambda_bar[i], state.prev_offset[i], anchor.mean_gap[i], gamma, alpha))
        .collect();
    let lambda: Vec<f64> = h.iter().map(|&x| x.max(0.0)).collect();
    let norm = normalization(&lambda, c);
    let kappa: Vec<f64> = lambda.iter().map(|&l| kappa_coordinate(l, norm, c)).collect();

    let main_key = BatchKey::new(seed, window, k as u64, crate::rng::phase::MAIN);
    let main_samples = sample_usv_keyed(&kappa, &main_key, batch)?;
    let main = oracle.evaluate(&Query { lambda: &lambda, kappa: &kappa }, &main_samples, main_key)?;
    check_gap(&main.mean_gap, "main", k)?;

    let lambda_bar: Vec<f64> = (0..n)
        .map(|i| correction_coordinate(state.lambda_bar[i], h[i], lambda[i], main.mean_gap[i], gamma, alpha))
        .collect();
    let clamped: Vec<f64> = lambda_bar.iter().map(|&x| x.max(0.0)).collect();
    let norm_bar = normalization(&clamped, c);

    state.prev_offset = h.iter().zip(&state.lambda_bar).map(|(h, lb)| h - lb).collect();
    state.kappa_bar = clamped.iter().map(|&l| kappa_coordinate(l, norm_bar, c)).collect();
    state.lambda_bar = lambda_bar;
    state.h = h;
    state.lambda = lambda;
    state.kappa = kappa;
    state.k += 1;
    state.check()?;
    Ok(StepReport { k, alpha, batch, anchor, main })
}

/// Projected stochastic ascent `lambda' = max(0, lambda + alpha * G)` using a
/// single batch drawn at `kappa(lambda)`.
pub fn baseline_coordinate(lambda: f64, g: f64, alpha: f64) -> f64 {
    (lambda + alpha * g).max(0.0)
}

pub fn simple_baseline_step(
    state: &mut AlcorState,
    oracle: &mut dyn GapOracle,
    schedule: &Schedule,
    seed: u64,
    window: u64,
    horizon: usize,
) -> Result<StepReport> {
    let k = state.k;
    let alpha = schedule.alpha_at(k);
    let batch = schedule.batch_at(k, horizon);
    let key = BatchKey::new(seed, window, k as u64, crate::rng::phase::BASELINE);
    let kappa = kappa_from_lambda_with(&state.lambda, state.kappa_offset)?;
    let samples = sample_usv_keyed(&kappa, &key, batch)?;
    let out = oracle.evaluate(&Query { lambda: &state.lambda, kappa: &kappa }, &samples, key)?;
    check_gap(&out.mean_gap, "baseline", k)?;
    let next: Vec<f64> = state
        .lambda
        .iter()
        .zip(&out.mean_gap)
        .map(|(&l, &g)| baseline_coordinate(l, g, alpha))
        .collect();
    state.kappa = kappa_from_lambda_with(&next, state.kappa_offset)?;
    state.kappa_bar = state.kappa.clone();
    state.lambda_bar = next.clone();
    state.h = next.clone();
    state.lambda = next;
    state.k += 1;
    Ok(StepReport {
        k,
        alpha,
        batch,
        anchor: BatchOutcome::empty(state.n_users()),
        main: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kappa_map_examples() {
        assert_eq!(kappa_from_lambda(&[0.0, 0.0, 0.0]).unwrap(), vec![1.0; 3]);
        assert_eq!(kappa_from_lambda(&[1.0, 3.0]).unwrap(), vec![0.5, 1.0]);
        assert_eq!(kappa_from_lambda(&[0.0, 4.0]).unwrap(), vec![0.2, 1.0]);
        assert!(kappa_from_lambda(&[-0.1, 1.0]).is_err());
    }

    #[test]
    fn kappa_map_is_not_shift_invariant() {
        let base = [1.0, 3.0];
        let shifted = [3.0, 5.0];
        let a = kappa_from_lambda(&base).unwrap();
        let b = kappa_from_lambda(&shifted).unwrap();
        assert_eq!(b, vec![4.0 / 6.0, 1.0]);
        assert_ne!(a, b);
    }

    #[test]
    fn usv_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in sample_usv(&[1.0; 4], &mut rng, 50).unwrap() {
            assert_eq!(s.n_active(), 4);
        }
        for s in sample_usv(&[0.0; 4], &mut rng, 50).unwrap() {
            assert_eq!(s.n_active(), 0);
        }
        assert!(sample_usv(&[1.2], &mut rng, 1).is_err());
    }

    #[test]
    fn usv_half_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = sample_usv(&[0.5], &mut rng, 10_000).unwrap();
        let f = draws.iter().filter(|s| s.is_active(0)).count() as f64 / 1e4;
        assert!((f - 0.5).abs() < 0.015, "{f}");
        let key = BatchKey::new(4, 0, 0, 0);
        let keyed = sample_usv_keyed(&[0.5], &key, 10_000).unwrap();
        let f = keyed.iter().filter(|s| s.is_active(0)).count() as f64 / 1e4;
        assert!((f - 0.5).abs() < 0.015, "{f}");
    }

    #[test]
    fn hand_traced_iteration() {
        let h = anchor_coordinate(1.0, 123.0, 0.5, 1.0, 1.0);
        assert_eq!(h, 1.5);
        let lambda = h.max(0.0);
        assert_eq!(lambda, 1.5);
        let next = correction_coordinate(1.0, h, lambda, -0.2, 1.0, 1.0);
        assert!((next - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gaps_are_a_fixed_point() {
        let h = anchor_coordinate(0.7, 0.0, 0.0, 3.0, 0.9);
        assert_eq!(h, 0.7);
        assert_eq!(correction_coordinate(0.7, h, h.max(0.0), 0.0, 3.0, 0.9), 0.7);
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(baseline_coordinate(0.4, 0.0, 0.9), 0.4);
        assert_eq!(baseline_coordinate(0.0, -1.0, 1.0), 0.0);
        assert!((baseline_coordinate(1.0, 0.5, 0.9) - 1.45).abs() < 1e-15);
    }

    #[test]
    fn schedules() {
        let s = Schedule {
            gamma: 1.0,
            alpha: AlphaSchedule::Diminishing { a0: 0.9, atilde: 3.0 },
            batch: BatchSchedule::Growing,
        };
        assert_eq!(s.alpha_at(0), 0.9);
        assert!((s.alpha_at(1) - 0.45).abs() < 1e-15);
        assert_eq!(s.batch_at(0, 10), 1);
        assert_eq!(s.batch_at(4, 10), 3);
        assert_eq!(s.batch_at(5, 10), 4);
        let q = Schedule { batch: BatchSchedule::SqrtK, ..s };
        assert_eq!(q.batch_at(7, 100), 10);
        assert_eq!(q.batch_at(7, 101), 11);
        assert!(Schedule { alpha: AlphaSchedule::Fixed(1.0), ..Schedule::default() }.validate().is_err());
        assert!(Schedule { gamma: 0.0, ..Schedule::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn kappa_map_invariants(lambda in prop::collection::vec(0.0f64..50.0, 1..12)) {
            let kappa = kappa_from_lambda(&lambda).unwrap();
            prop_assert!(kappa.iter().all(|&k| k > 0.0 && k <= 1.0));
            prop_assert!(kappa.contains(&1.0));
            for i in 0..lambda.len() {
                for j in 0..lambda.len() {
                    if lambda[i] <= lambda[j] {
                        prop_assert!(kappa[i] <= kappa[j]);
                    }
                }
            }
        }
    }
}
