//! Stochastic gap oracles the solver queries.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::alcor::{sample_usv_keyed, UsvSample};
use crate::channel::{sample_rayleigh, GainMatrix, MulticellChannel};
use crate::constraints::{batch_mean_gap, scaled_rate_gap, DemandSpec, GapSample};
use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::rng::{domain, BatchKey};
use crate::ura::{policy_ura_gains, SharedPolicy};
use crate::utility::masked_rates;

/// Point at which a batch is drawn.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub lambda: &'a [f64],
    pub kappa: &'a [f64],
}

/// Result of one batch. Every sample occupies one channel instant.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    pub mean_gap: Vec<f64>,
    pub gaps: Vec<Vec<f64>>,
    /// Realized per-user utilities, one row per sample.
    pub utilities: Vec<Vec<f64>>,
}

impl BatchOutcome {
    pub fn empty(n: usize) -> Self {
        Self {
            mean_gap: vec![0.0; n],
            gaps: Vec::new(),
            utilities: Vec::new(),
        }
    }

    pub fn from_samples(gaps: Vec<Vec<f64>>, utilities: Vec<Vec<f64>>) -> Result<Self> {
        let wrapped: Vec<GapSample> = gaps.iter().cloned().map(GapSample).collect();
        let mean_gap = batch_mean_gap(&wrapped)?.0;
        Ok(Self { mean_gap, gaps, utilities })
    }
}

pub trait GapOracle: Send {
    fn n_users(&self) -> usize;

    fn set_demands(&mut self, demands: &DemandSpec) -> Result<()>;

    /// Batch of gap samples for the given activation vectors. Stateful
    /// oracles advance their state.
    fn evaluate(&mut self, query: &Query, samples: &[UsvSample], key: BatchKey) -> Result<BatchOutcome>;

    /// Plug-in estimate of the expected gap at `query` from `mc_samples`
    /// draws, without touching any state. `None` when not defined.
    fn mean_field(&self, query: &Query, mc_samples: usize, key: BatchKey) -> Result<Option<Vec<f64>>>;
}

/// Channel process feeding a [`RateOracle`].
#[derive(Clone, Debug)]
pub enum UraChannel {
    Rayleigh { n_users: usize },
    /// Single sub-channel of a multi-cell deployment; instants are counted by
    /// the oracle.
    Multicell(MulticellChannel),
}

impl UraChannel {
    pub fn n_users(&self) -> usize {
        match self {
            UraChannel::Rayleigh { n_users } => *n_users,
            UraChannel::Multicell(m) => m.n_users(),
        }
    }

    pub fn draw(&self, key: &BatchKey, j: usize, instant: u64) -> Result<GainMatrix> {
        match self {
            UraChannel::Rayleigh { n_users } => {
                Ok(sample_rayleigh(*n_users, &mut key.channel_rng(j))?.power_gains())
            }
            UraChannel::Multicell(m) => Ok(m.sample(instant, 0)?.power_gains()),
        }
    }
}

/// Rate demands served by a URA policy over a random channel.
pub struct RateOracle {
    channel: UraChannel,
    policy: SharedPolicy,
    noise: f64,
    demands: DemandSpec,
    exec: Exec,
    instant: u64,
}

impl RateOracle {
    pub fn new(channel: UraChannel, policy: SharedPolicy, noise: f64, demands: DemandSpec, exec: Exec) -> Result<Self> {
        if !(noise > 0.0) {
            return Err(invalid("noise power must be positive"));
        }
        let mut o = Self {
            channel,
            policy,
            noise,
            demands: DemandSpec::rates(&[])?,
            exec,
            instant: 0,
        };
        o.set_demands(&demands)?;
        Ok(o)
    }

    pub fn policy(&self) -> &SharedPolicy {
        &self.policy
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Realized rates of one sample.
    pub fn sample_rates(&self, xi: &UsvSample, key: &BatchKey, j: usize, instant: u64) -> Result<Vec<f64>> {
        let g = self.channel.draw(key, j, instant)?;
        let p = policy_ura_gains(self.policy.as_ref(), &g, xi, self.noise)?;
        masked_rates(&g, p.as_slice(), self.noise, xi)
    }

    fn batch(&self, samples: &[UsvSample], key: BatchKey, base: u64) -> Result<BatchOutcome> {
        let rows = self.exec.try_map(samples.len(), |j| {
            let r = self.sample_rates(&samples[j], &key, j, base + j as u64)?;
            let g = scaled_rate_gap(&self.demands, &r)?.0;
            Ok((g, r))
        })?;
        let (gaps, utilities) = rows.into_iter().unzip();
        BatchOutcome::from_samples(gaps, utilities)
    }
}

impl GapOracle for RateOracle {
    fn n_users(&self) -> usize {
        self.channel.n_users()
    }

    fn set_demands(&mut self, demands: &DemandSpec) -> Result<()> {
        if demands.len() != self.n_users() {
            return Err(invalid(format!(
                "{} demands for {} users",
                demands.len(),
                self.n_users()
            )));
        }
        demands.require_rates()?;
        self.demands = demands.clone();
        Ok(())
    }

    fn evaluate(&mut self, _query: &Query, samples: &[UsvSample], key: BatchKey) -> Result<BatchOutcome> {
        let out = self.batch(samples, key, self.instant)?;
        self.instant += samples.len() as u64;
        Ok(out)
    }

    fn mean_field(&self, query: &Query, mc_samples: usize, key: BatchKey) -> Result<Option<Vec<f64>>> {
        let samples = sample_usv_keyed(query.kappa, &key, mc_samples)?;
        // Checkpoint draws live on a separate instant range so they never
        // reuse channels of the trajectory itself.
        let base = crate::rng::derive(key.seed, &[domain::CHANNEL, key.window, key.iteration]) | (1 << 62);
        Ok(Some(self.batch(&samples, key, base)?.mean_gap))
    }
}

/// `F(lambda) = b - a * lambda` plus optional Gaussian noise per sample.
/// The reported utility is `a * lambda + noise`.
#[derive(Clone, Debug)]
pub struct LinearOracle {
    b: Vec<f64>,
    slope: Vec<f64>,
    sigma: f64,
}

impl LinearOracle {
    pub fn new(slope: Vec<f64>, sigma: f64) -> Result<Self> {
        if slope.iter().any(|a| !a.is_finite()) || !(sigma >= 0.0) {
            return Err(invalid("linear oracle needs finite slopes and sigma >= 0"));
        }
        Ok(Self {
            b: vec![0.0; slope.len()],
            slope,
            sigma,
        })
    }

    pub fn exact(&self, lambda: &[f64]) -> Vec<f64> {
        self.b
            .iter()
            .zip(&self.slope)
            .zip(lambda)
            .map(|((b, a), l)| b - a * l)
            .collect()
    }
}

impl GapOracle for LinearOracle {
    fn n_users(&self) -> usize {
        self.slope.len()
    }

    fn set_demands(&mut self, demands: &DemandSpec) -> Result<()> {
        if demands.len() != self.n_users() {
            return Err(invalid("demand length does not match the oracle"));
        }
        self.b = demands.require_rates()?;
        Ok(())
    }

    fn evaluate(&mut self, query: &Query, samples: &[UsvSample], key: BatchKey) -> Result<BatchOutcome> {
        let exact = self.exact(query.lambda);
        let mut gaps = Vec::with_capacity(samples.len());
        let mut utilities = Vec::with_capacity(samples.len());
        for j in 0..samples.len() {
            let mut rng = key.sample_rng(j, domain::SYNTHETIC);
            let g: Vec<f64> = exact
                .iter()
                .map(|&f| {
                    let z: f64 = if self.sigma > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    f + self.sigma * z
                })
                .collect();
            utilities.push(self.b.iter().zip(&g).map(|(b, g)| b - g).collect());
            gaps.push(g);
        }
        BatchOutcome::from_samples(gaps, utilities)
    }

    fn mean_field(&self, query: &Query, _mc: usize, _key: BatchKey) -> Result<Option<Vec<f64>>> {
        Ok(Some(self.exact(query.lambda)))
    }
}

/// Interference-free users with fixed rates: user `i` gets `rate_i` whenever
/// active, so `F_i = u_i - kappa_i * rate_i`.
#[derive(Clone, Debug)]
pub struct BernoulliRateOracle {
    rates: Vec<f64>,
    u_min: Vec<f64>,
}

impl BernoulliRateOracle {
    pub fn new(rates: Vec<f64>) -> Self {
        let n = rates.len();
        Self { rates, u_min: vec![0.0; n] }
    }
}

impl GapOracle for BernoulliRateOracle {
    fn n_users(&self) -> usize {
        self.rates.len()
    }

    fn set_demands(&mut self, demands: &DemandSpec) -> Result<()> {
        if demands.len() != self.n_users() {
            return Err(invalid("demand length does not match the oracle"));
        }
        self.u_min = demands.require_rates()?;
        Ok(())
    }

    fn evaluate(&mut self, _query: &Query, samples: &[UsvSample], _key: BatchKey) -> Result<BatchOutcome> {
        let utilities: Vec<Vec<f64>> = samples
            .iter()
            .map(|xi| {
                self.rates
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| if xi.is_active(i) { r } else { 0.0 })
                    .collect()
            })
            .collect();
        let gaps = utilities
            .iter()
            .map(|u: &Vec<f64>| self.u_min.iter().zip(u).map(|(m, r)| m - r).collect())
            .collect();
        BatchOutcome::from_samples(gaps, utilities)
    }

    fn mean_field(&self, query: &Query, _mc: usize, _key: BatchKey) -> Result<Option<Vec<f64>>> {
        Ok(Some(
            self.u_min
                .iter()
                .zip(&self.rates)
                .zip(query.kappa)
                .map(|((u, r), k)| u - k * r)
                .collect(),
        ))
    }
}

/// Active users split one medium equally: user `i` gets
/// `rate_i / n_active` whenever active. The expected gap is exact.
#[derive(Clone, Debug)]
pub struct SharedMediumOracle {
    rates: Vec<f64>,
    u_min: Vec<f64>,
}

impl SharedMediumOracle {
    pub fn new(rates: Vec<f64>) -> Self {
        let n = rates.len();
        Self { rates, u_min: vec![0.0; n] }
    }

    /// `E[u_i] = kappa_i * rate_i * E[1 / (1 + S)]` where `S` counts the other
    /// active users.
    pub fn expected_utility(&self, kappa: &[f64]) -> Vec<f64> {
        let n = self.rates.len();
        (0..n)
            .map(|i| {
                let mut dist = vec![1.0];
                for (j, &k) in kappa.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    let mut next = vec![0.0; dist.len() + 1];
                    for (s, p) in dist.iter().enumerate() {
                        next[s] += p * (1.0 - k);
                        next[s + 1] += p * k;
                    }
                    dist = next;
                }
                let share: f64 = dist.iter().enumerate().map(|(s, p)| p / (1.0 + s as f64)).sum();
                kappa[i] * self.rates[i] * share
            })
            .collect()
    }
}

impl GapOracle for SharedMediumOracle {
    fn n_users(&self) -> usize {
        self.rates.len()
    }

    fn set_demands(&mut self, demands: &DemandSpec) -> Result<()> {
        if demands.len() != self.n_users() {
            return Err(invalid("demand length does not match the oracle"));
        }
        self.u_min = demands.require_rates()?;
        Ok(())
    }

    fn evaluate(&mut self, _query: &Query, samples: &[UsvSample], _key: BatchKey) -> Result<BatchOutcome> {
        let utilities: Vec<Vec<f64>> = samples
            .iter()
            .map(|xi| {
                let m = xi.n_active().max(1) as f64;
                self.rates
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| if xi.is_active(i) { r / m } else { 0.0 })
                    .collect()
            })
            .collect();
        let gaps = utilities
            .iter()
            .map(|u: &Vec<f64>| self.u_min.iter().zip(u).map(|(m, r)| m - r).collect())
            .collect();
        BatchOutcome::from_samples(gaps, utilities)
    }

    fn mean_field(&self, query: &Query, _mc: usize, _key: BatchKey) -> Result<Option<Vec<f64>>> {
        let eu = self.expected_utility(query.kappa);
        Ok(Some(self.u_min.iter().zip(eu).map(|(u, e)| u - e).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ura::MaxPower;
    use std::sync::Arc;

    #[test]
    fn rate_oracle_gap_matches_utilities() {
        let demands = DemandSpec::rates(&[0.5, 1.0, 0.0]).unwrap();
        let mut o = RateOracle::new(
            UraChannel::Rayleigh { n_users: 3 },
            Arc::new(MaxPower::new(1.0)),
            0.1,
            demands,
            Exec::Sequential,
        )
        .unwrap();
        let key = BatchKey::new(1, 0, 0, 0);
        let samples = sample_usv_keyed(&[1.0, 0.5, 1.0], &key, 8).unwrap();
        let out = o
            .evaluate(&Query { lambda: &[0.0; 3], kappa: &[1.0, 0.5, 1.0] }, &samples, key)
            .unwrap();
        for (g, u) in out.gaps.iter().zip(&out.utilities) {
            assert!((g[0] - (0.5 - u[0])).abs() < 1e-15);
            assert!((g[2] + u[2]).abs() < 1e-15);
        }
        for (xi, u) in samples.iter().zip(&out.utilities) {
            if !xi.is_active(1) {
                assert_eq!(u[1], 0.0);
            }
        }
    }

    #[test]
    fn rate_oracle_rejects_queue_demands() {
        use crate::constraints::Demand;
        let spec = DemandSpec::new(vec![Demand::Latency { d_max: 3, gap_scale: 1.0 }]).unwrap();
        let r = RateOracle::new(
            UraChannel::Rayleigh { n_users: 1 },
            Arc::new(MaxPower::new(1.0)),
            0.1,
            spec,
            Exec::Sequential,
        );
        assert!(r.is_err());
    }

    #[test]
    fn sequential_and_parallel_batches_agree() {
        let make = |exec| {
            RateOracle::new(
                UraChannel::Rayleigh { n_users: 4 },
                Arc::new(crate::ura::Wmmse::new(Default::default(), 1.0).unwrap()),
                10f64.powf(-1.5),
                DemandSpec::rates(&[1.0; 4]).unwrap(),
                exec,
            )
            .unwrap()
        };
        let key = BatchKey::new(9, 1, 2, 1);
        let samples = sample_usv_keyed(&[0.7; 4], &key, 32).unwrap();
        let q = Query { lambda: &[0.0; 4], kappa: &[0.7; 4] };
        let a = make(Exec::Sequential).evaluate(&q, &samples, key).unwrap();
        let b = make(Exec::Parallel).evaluate(&q, &samples, key).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shared_medium_expectation_matches_monte_carlo() {
        let mut o = SharedMediumOracle::new(vec![1.0, 2.0, 3.0]);
        o.set_demands(&DemandSpec::rates(&[0.5, 0.5, 0.5]).unwrap()).unwrap();
        let kappa = [0.3, 1.0, 0.6];
        let key = BatchKey::new(2, 0, 0, 0);
        let samples = sample_usv_keyed(&kappa, &key, 200_000).unwrap();
        let q = Query { lambda: &[0.0; 3], kappa: &kappa };
        let mc = o.evaluate(&q, &samples, key).unwrap().mean_gap;
        let exact = o.mean_field(&q, 0, key).unwrap().unwrap();
        for (a, b) in mc.iter().zip(&exact) {
            assert!((a - b).abs() < 0.01, "{mc:?} vs {exact:?}");
        }
    }

    #[test]
    fn linear_oracle_is_exact_without_noise() {
        let mut o = LinearOracle::new(vec![1.0, 0.5], 0.0).unwrap();
        o.set_demands(&DemandSpec::rates(&[2.0, 1.0]).unwrap()).unwrap();
        let key = BatchKey::new(0, 0, 0, 0);
        let q = Query { lambda: &[1.0, 4.0], kappa: &[1.0, 1.0] };
        let out = o.evaluate(&q, &[UsvSample::all_active(2)], key).unwrap();
        assert_eq!(out.mean_gap, vec![1.0, -1.0]);
        assert_eq!(o.mean_field(&q, 0, key).unwrap().unwrap(), vec![1.0, -1.0]);
    }
}
