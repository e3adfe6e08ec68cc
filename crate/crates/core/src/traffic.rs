//! Packet traffic over a multi-cell, multi-sub-channel deployment: Poisson
//! arrivals, queues served at the achieved rate, and the queue-based gap
//! oracle used for latency and stability demands.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::alcor::{BatchOutcome, GapOracle, Query, UsvSample};
use crate::channel::{GainMatrix, MulticellChannel};
use crate::constraints::{gap_queue, latency_threshold, Demand, DemandSpec};
use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::rng::{domain, phase, substream, BatchKey};
use crate::ura::{policy_ura_gains, SharedPolicy};
use crate::utility::masked_rates;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sensitivity {
    DelaySensitive { latency_ms: f64 },
    DelayTolerant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserTraffic {
    /// Mean packet arrivals per second.
    pub nu: f64,
    pub sensitivity: Sensitivity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    #[default]
    Random,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSpec {
    pub packet_bits: f64,
    pub bandwidth_hz: f64,
    pub n_subchannels: usize,
    /// Length of one channel instant in seconds.
    pub dt: f64,
    pub assignment: Assignment,
    pub users: Vec<UserTraffic>,
}

impl TrafficSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.packet_bits > 0.0 && self.bandwidth_hz > 0.0 && self.dt > 0.0) {
            return Err(invalid("packet size, bandwidth and dt must be positive"));
        }
        if self.n_subchannels == 0 {
            return Err(invalid("need at least one sub-channel"));
        }
        for u in &self.users {
            if !(u.nu > 0.0 && u.nu.is_finite()) {
                return Err(invalid(format!("arrival rate must be positive, got {}", u.nu)));
            }
            if let Sensitivity::DelaySensitive { latency_ms } = u.sensitivity {
                if !(latency_ms > 0.0) {
                    return Err(invalid("latency constraint must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    /// Latency users get `q - d_max` scaled by `1 / d_max`; tolerant users
    /// get `c - 3`.
    pub fn demands(&self) -> Result<DemandSpec> {
        let entries = self
            .users
            .iter()
            .map(|u| match u.sensitivity {
                Sensitivity::DelaySensitive { latency_ms } => {
                    let d_max = latency_threshold(latency_ms, u.nu)?;
                    Ok(Demand::Latency { d_max, gap_scale: 1.0 / d_max as f64 })
                }
                Sensitivity::DelayTolerant => Ok(Demand::Stability {
                    c_max: crate::constraints::DEFAULT_C_MAX,
                    gap_scale: 1.0,
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        DemandSpec::new(entries)
    }

    /// Bits served in one instant at `rate` bits/s/Hz.
    pub fn bits_per_instant(&self, rate: f64) -> f64 {
        rate * self.bandwidth_hz * self.dt
    }

    /// Random scenario: arrival rates uniform in `nu_range`, the first
    /// `n_sensitive` users delay-sensitive with latency uniform in
    /// `latency_range` ms.
    pub fn random<R: Rng + ?Sized>(
        n_users: usize,
        n_sensitive: usize,
        nu_range: (f64, f64),
        latency_range: (f64, f64),
        rng: &mut R,
    ) -> Self {
        let users = (0..n_users)
            .map(|i| {
                let nu = rng.random_range(nu_range.0..=nu_range.1);
                let sensitivity = if i < n_sensitive {
                    Sensitivity::DelaySensitive {
                        latency_ms: rng.random_range(latency_range.0..=latency_range.1),
                    }
                } else {
                    Sensitivity::DelayTolerant
                };
                UserTraffic { nu, sensitivity }
            })
            .collect();
        Self {
            packet_bits: 4000.0,
            bandwidth_hz: 1e6,
            n_subchannels: 5,
            dt: 0.01,
            assignment: Assignment::Random,
            users,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pub q: Vec<u64>,
    pub c: Vec<u32>,
    pub last_batch_len: Vec<u64>,
    /// Served bits not yet forming a whole packet.
    pub carry_bits: Vec<f64>,
}

impl QueueState {
    pub fn new(n: usize) -> Self {
        Self {
            q: vec![0; n],
            c: vec![0; n],
            last_batch_len: vec![0; n],
            carry_bits: vec![0.0; n],
        }
    }
}

/// Per-user packet flow of one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub arrivals: Vec<u64>,
    pub departures: Vec<u64>,
}

/// Arrivals first, then service: `R * BW * dt` bits plus the carried
/// fraction, in whole packets, never more than the queue holds. An empty
/// queue does not bank capacity.
pub fn step_traffic<R: Rng + ?Sized>(
    state: &mut QueueState,
    rates: &[f64],
    spec: &TrafficSpec,
    rng: &mut R,
) -> Result<Flow> {
    let n = spec.n_users();
    if rates.len() != n || state.q.len() != n {
        return Err(invalid("traffic state, rates and spec disagree on the number of users"));
    }
    let mut arrivals = Vec::with_capacity(n);
    let mut departures = Vec::with_capacity(n);
    for i in 0..n {
        let mean = spec.users[i].nu * spec.dt;
        let a = Poisson::new(mean)
            .map_err(|e| invalid(e.to_string()))?
            .sample(rng) as u64;
        state.q[i] += a;
        let bits = state.carry_bits[i] + spec.bits_per_instant(rates[i].max(0.0));
        let whole = (bits / spec.packet_bits).floor();
        let d = (whole as u64).min(state.q[i]);
        state.q[i] -= d;
        state.carry_bits[i] = if state.q[i] == 0 { 0.0 } else { bits - d as f64 * spec.packet_bits };
        arrivals.push(a);
        departures.push(d);
    }
    Ok(Flow { arrivals, departures })
}

/// Batch-boundary bookkeeping: a counter grows while the queue keeps growing.
pub fn update_growth_counters(state: &mut QueueState) {
    for i in 0..state.q.len() {
        if state.q[i] > state.last_batch_len[i] {
            state.c[i] += 1;
        } else {
            state.c[i] = 0;
        }
        state.last_batch_len[i] = state.q[i];
    }
}

/// Sub-channel of every active user; `None` for inactive users.
/// `gains[s]` is the channel on sub-channel `s`.
pub fn assign_subchannels<R: Rng + ?Sized>(
    xi: &UsvSample,
    n_subchannels: usize,
    strategy: Assignment,
    gains: &[GainMatrix],
    rng: &mut R,
) -> Result<Vec<Option<usize>>> {
    if n_subchannels == 0 {
        return Err(invalid("need at least one sub-channel"));
    }
    let n = xi.len();
    let mut out = vec![None; n];
    match strategy {
        Assignment::Random => {
            let ids: Vec<usize> = (0..n_subchannels).collect();
            for (i, slot) in out.iter_mut().enumerate() {
                if xi.is_active(i) {
                    *slot = ids.choose(rng).copied();
                }
            }
        }
        Assignment::Greedy => {
            if gains.len() != n_subchannels || gains.iter().any(|g| g.n() != n) {
                return Err(invalid("greedy assignment needs one channel per sub-channel"));
            }
            let best_direct = |i: usize| gains.iter().map(|g| g.direct(i)).fold(0.0, f64::max);
            let mut order: Vec<usize> = (0..n).filter(|&i| xi.is_active(i)).collect();
            order.sort_by(|&a, &b| best_direct(b).total_cmp(&best_direct(a)).then(a.cmp(&b)));
            for &i in &order {
                let mut best: Option<(usize, f64, f64)> = None;
                for (s, g) in gains.iter().enumerate() {
                    let interference: f64 = (0..n)
                        .filter(|&j| out[j] == Some(s))
                        .map(|j| g.get(i, j))
                        .sum();
                    let direct = g.direct(i);
                    let better = match best {
                        None => true,
                        Some((_, bi, bd)) => interference < bi || (interference == bi && direct > bd),
                    };
                    if better {
                        best = Some((s, interference, direct));
                    }
                }
                out[i] = best.map(|b| b.0);
            }
        }
    }
    Ok(out)
}

/// Rates when every user transmits only on its own sub-channel. The policy
/// runs separately on each sub-channel among the users placed there.
pub fn subchannel_rates(
    policy: &dyn crate::ura::UraPolicy,
    gains: &[GainMatrix],
    assignment: &[Option<usize>],
    noise: f64,
    exec: Exec,
) -> Result<Vec<f64>> {
    let n = assignment.len();
    let per_sub = exec.try_map(gains.len(), |s| {
        let xi = UsvSample::new(assignment.iter().map(|a| *a == Some(s)).collect());
        if xi.n_active() == 0 {
            return Ok(vec![0.0; n]);
        }
        let p = policy_ura_gains(policy, &gains[s], &xi, noise)?;
        masked_rates(&gains[s], p.as_slice(), noise, &xi)
    })?;
    let mut rates = vec![0.0; n];
    for (i, a) in assignment.iter().enumerate() {
        if let Some(s) = a {
            rates[i] = per_sub[*s][i];
        }
    }
    Ok(rates)
}

/// Stateful gap oracle: every sample is one instant of the shared timeline.
pub struct QueueOracle {
    channel: MulticellChannel,
    policy: SharedPolicy,
    noise: f64,
    spec: TrafficSpec,
    demands: DemandSpec,
    state: QueueState,
    instant: u64,
    seed: u64,
    exec: Exec,
    /// Queue lengths after every instant.
    pub history: Vec<Vec<u64>>,
}

impl QueueOracle {
    pub fn new(
        channel: MulticellChannel,
        policy: SharedPolicy,
        spec: TrafficSpec,
        seed: u64,
        exec: Exec,
    ) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_users();
        if channel.n_users() != n {
            return Err(invalid("topology and traffic spec disagree on the number of users"));
        }
        let noise = channel.params().noise_watts();
        let demands = spec.demands()?;
        Ok(Self {
            channel,
            policy,
            noise,
            spec,
            demands,
            state: QueueState::new(n),
            instant: 0,
            seed,
            exec,
            history: Vec::new(),
        })
    }

    pub fn spec(&self) -> &TrafficSpec {
        &self.spec
    }

    pub fn demands(&self) -> &DemandSpec {
        &self.demands
    }

    pub fn state(&self) -> &QueueState {
        &self.state
    }

    pub fn instant(&self) -> u64 {
        self.instant
    }

    /// One instant: channel draw, assignment among users that are both
    /// selected and backlogged, per-sub-channel allocation, service.
    fn advance(&mut self, xi: &UsvSample) -> Result<Vec<f64>> {
        let t = self.instant;
        let atten = self.channel.large_scale_db(t)?;
        let gains = (0..self.spec.n_subchannels)
            .map(|s| Ok(self.channel.sample_with(&atten, t, s)?.power_gains()))
            .collect::<Result<Vec<_>>>()?;
        let backlogged = UsvSample::new(
            (0..xi.len())
                .map(|i| xi.is_active(i) && self.state.q[i] > 0)
                .collect(),
        );
        let mut rng = substream(self.seed, &[domain::ASSIGN, t]);
        let assignment = assign_subchannels(
            &backlogged,
            self.spec.n_subchannels,
            self.spec.assignment,
            &gains,
            &mut rng,
        )?;
        let rates = subchannel_rates(self.policy.as_ref(), &gains, &assignment, self.noise, self.exec)?;
        let mut rng = substream(self.seed, &[domain::TRAFFIC, t]);
        step_traffic(&mut self.state, &rates, &self.spec, &mut rng)?;
        self.instant += 1;
        self.history.push(self.state.q.clone());
        Ok(rates)
    }
}

impl GapOracle for QueueOracle {
    fn n_users(&self) -> usize {
        self.spec.n_users()
    }

    fn set_demands(&mut self, demands: &DemandSpec) -> Result<()> {
        if demands.len() != self.n_users() {
            return Err(invalid("demand length does not match the number of users"));
        }
        self.demands = demands.clone();
        Ok(())
    }

    fn evaluate(&mut self, _query: &Query, samples: &[UsvSample], key: BatchKey) -> Result<BatchOutcome> {
        let mut gaps = Vec::with_capacity(samples.len());
        let mut utilities = Vec::with_capacity(samples.len());
        for xi in samples {
            let rates = self.advance(xi)?;
            gaps.push(gap_queue(&self.demands, &self.state.q, &self.state.c, &rates)?.0);
            utilities.push(rates);
        }
        // One solver iteration spans both batches; counters move once.
        if key.phase == phase::MAIN || key.phase == phase::BASELINE {
            update_growth_counters(&mut self.state);
        }
        BatchOutcome::from_samples(gaps, utilities)
    }

    fn mean_field(&self, _query: &Query, _mc: usize, _key: BatchKey) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

/// Least-squares slope of a series against its index.
pub fn trend(series: &[f64]) -> f64 {
    let m = series.len() as f64;
    if series.len() < 2 {
        return 0.0;
    }
    let mx = (m - 1.0) / 2.0;
    let my = series.iter().sum::<f64>() / m;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, y) in series.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{CellTopology, FadingParams};
    use crate::ura::MaxPower;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn spec(nu: &[f64]) -> TrafficSpec {
        TrafficSpec {
            packet_bits: 4000.0,
            bandwidth_hz: 1e6,
            n_subchannels: 5,
            dt: 0.01,
            assignment: Assignment::Random,
            users: nu
                .iter()
                .map(|&nu| UserTraffic { nu, sensitivity: Sensitivity::DelayTolerant })
                .collect(),
        }
    }

    #[test]
    fn poisson_mean_arrivals() {
        let s = spec(&[100.0]);
        let mut st = QueueState::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let total: u64 = (0..10_000)
            .map(|_| step_traffic(&mut st, &[0.0], &s, &mut rng).unwrap().arrivals[0])
            .sum();
        let mean = total as f64 / 1e4;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn zero_rate_never_serves() {
        let s = spec(&[300.0]);
        let mut st = QueueState::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut prev = 0;
        for _ in 0..500 {
            let f = step_traffic(&mut st, &[0.0], &s, &mut rng).unwrap();
            assert_eq!(f.departures[0], 0);
            assert!(st.q[0] >= prev);
            prev = st.q[0];
        }
    }

    #[test]
    fn four_bits_per_hertz_serves_ten_packets() {
        let s = spec(&[1e-9]);
        assert_eq!(s.bits_per_instant(4.0), 40_000.0);
        let mut st = QueueState::new(1);
        st.q[0] = 25;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = step_traffic(&mut st, &[4.0], &s, &mut rng).unwrap();
        assert_eq!(f.departures[0], 10);
        assert_eq!(st.q[0], 15);
    }

    #[test]
    fn carryover_accumulates_fractional_packets() {
        let s = spec(&[1e-9]);
        let mut st = QueueState::new(1);
        st.q[0] = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // 0.25 packets per instant.
        let served: u64 = (0..8)
            .map(|_| step_traffic(&mut st, &[0.1], &s, &mut rng).unwrap().departures[0])
            .sum();
        assert_eq!(served, 2);
    }

    #[test]
    fn flow_conservation() {
        let s = spec(&[150.0, 400.0, 50.0]);
        let mut st = QueueState::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in 0..2000 {
            let before = st.q.clone();
            let rates = [0.3 * (t % 7) as f64, 1.1, 0.05];
            let f = step_traffic(&mut st, &rates, &s, &mut rng).unwrap();
            for i in 0..3 {
                assert_eq!(before[i] + f.arrivals[i] - f.departures[i], st.q[i]);
            }
        }
    }

    #[test]
    fn overprovisioned_queue_stays_bounded() {
        // 4 packets offered per instant; 3.2 bits/s/Hz serves 8.
        let s = spec(&[400.0]);
        let mut st = QueueState::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0;
        for _ in 0..100_000 {
            step_traffic(&mut st, &[3.2], &s, &mut rng).unwrap();
            worst = worst.max(st.q[0]);
        }
        assert!(worst < 30, "{worst}");
    }

    #[test]
    fn growth_counter_examples() {
        let mut st = QueueState::new(1);
        st.last_batch_len[0] = 10;
        st.q[0] = 4;
        update_growth_counters(&mut st);
        assert_eq!(st.c[0], 0);
        for q in [5, 6, 9] {
            st.q[0] = q;
            update_growth_counters(&mut st);
        }
        assert_eq!(st.c[0], 3);
        update_growth_counters(&mut st);
        assert_eq!(st.c[0], 0);
    }

    #[test]
    fn greedy_separates_interferers() {
        let g = GainMatrix::new(2, vec![1.0, 10.0, 10.0, 1.0]).unwrap();
        let gains = vec![g.clone(), g];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = assign_subchannels(&UsvSample::from_bits(&[1, 1]), 2, Assignment::Greedy, &gains, &mut rng).unwrap();
        assert!(a[0].is_some() && a[1].is_some() && a[0] != a[1]);
        let single = assign_subchannels(&UsvSample::from_bits(&[0, 1]), 2, Assignment::Greedy, &gains, &mut rng).unwrap();
        assert_eq!(single[0], None);
        assert!(single[1].is_some());
    }

    #[test]
    fn random_assignment_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 5];
        let xi = UsvSample::from_bits(&[1]);
        for _ in 0..10_000 {
            let a = assign_subchannels(&xi, 5, Assignment::Random, &[], &mut rng).unwrap();
            counts[a[0].unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 0.2).abs() < 0.015, "{counts:?}");
        }
    }

    #[test]
    fn other_subchannels_do_not_interfere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gains: Vec<GainMatrix> = (0..2)
            .map(|_| crate::channel::sample_rayleigh(3, &mut rng).unwrap().power_gains())
            .collect();
        let assignment = [Some(0), Some(1), Some(1)];
        let full = subchannel_rates(&MaxPower::new(1.0), &gains, &assignment, 0.1, Exec::Sequential).unwrap();
        let alone = subchannel_rates(&MaxPower::new(1.0), &gains, &[Some(0), None, None], 0.1, Exec::Sequential).unwrap();
        assert_eq!(full[0], alone[0]);
    }

    #[test]
    fn queue_oracle_runs_and_keeps_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let topo = CellTopology::hexagonal(4, 7, 500.0, 50.0, &mut rng).unwrap();
        let params = FadingParams::default();
        let ch = MulticellChannel::new(topo, params, 3).unwrap();
        let s = spec(&[100.0, 200.0, 50.0, 300.0]);
        let mut o = QueueOracle::new(ch, Arc::new(MaxPower::new(6.3)), s, 7, Exec::Sequential).unwrap();
        let key = BatchKey::new(0, 0, 0, phase::MAIN);
        let samples = vec![UsvSample::all_active(4); 30];
        let out = o.evaluate(&Query { lambda: &[0.0; 4], kappa: &[1.0; 4] }, &samples, key).unwrap();
        assert_eq!(out.gaps.len(), 30);
        assert_eq!(o.history.len(), 30);
        assert_eq!(o.instant(), 30);
    }

    #[test]
    fn trend_of_a_line() {
        let s: Vec<f64> = (0..10).map(|i| 3.0 + 0.5 * i as f64).collect();
        assert!((trend(&s) - 0.5).abs() < 1e-12);
    }
}
