//! Distributed solver: every user keeps its own scalars and only learns the
//! others' pressure values through a simulated synchronous message bus.
//!
//! Two exchanges happen per iteration: the projected `lambda_i` (needed for
//! `kappa`) and the clamped anchor `max(0, lambda_bar_i)` (needed for
//! `kappa_bar`). Values travel as exact `f64`s in the simulator; the ledger
//! charges 32 bits per value as on a real link.

use serde::{Deserialize, Serialize};

use crate::alcor::{
    activate, anchor_coordinate, correction_coordinate, kappa_coordinate, AlcorState, GapOracle, Query,
    Schedule, StepReport, Stepper, UsvSample, KAPPA_OFFSET,
};
use crate::error::{invalid, Error, Result};
use crate::rng::{domain, phase, uniform, BatchKey};

/// Bits charged per scalar on the wire.
pub const WIRE_BITS: u64 = 32;

/// Change threshold of the change-triggered bus.
pub const CHANGE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusMode {
    /// Every user sends its value to every other user at every exchange.
    #[default]
    Broadcast,
    /// A user sends only when its value moved by more than [`CHANGE_TOL`].
    ChangeTriggered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Lambda,
    AnchorLambda,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusMessage {
    pub sender: usize,
    pub slot: Slot,
    pub payload: f64,
    /// Channel instant at which the exchange happens.
    pub timestamp: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverheadLedger {
    /// Per sender: bits delivered, summed over recipients.
    pub bits: Vec<u64>,
    /// Per sender: point-to-point deliveries.
    pub messages: Vec<u64>,
    /// Per sender: broadcasts, each reaching all other users at once.
    pub broadcasts: Vec<u64>,
    pub elapsed_s: f64,
}

impl OverheadLedger {
    pub fn new(n: usize) -> Self {
        Self {
            bits: vec![0; n],
            messages: vec![0; n],
            broadcasts: vec![0; n],
            elapsed_s: 0.0,
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.bits.iter().sum()
    }

    pub fn total_messages(&self) -> u64 {
        self.messages.iter().sum()
    }

    /// Mean per-user rate counting every delivery separately.
    pub fn delivery_bps(&self) -> f64 {
        self.per_user_rate(self.total_bits() as f64)
    }

    /// Mean per-user rate when one transmission reaches every peer.
    pub fn broadcast_bps(&self) -> f64 {
        let b: u64 = self.broadcasts.iter().sum();
        self.per_user_rate((b * WIRE_BITS) as f64)
    }

    fn per_user_rate(&self, bits: f64) -> f64 {
        if self.elapsed_s > 0.0 && !self.bits.is_empty() {
            bits / self.bits.len() as f64 / self.elapsed_s
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserAgent {
    pub id: usize,
    pub lambda: f64,
    pub lambda_bar: f64,
    pub h: f64,
    pub kappa: f64,
    pub kappa_bar: f64,
    pub prev_offset: f64,
    /// Last value received from every user for each slot; own entry unused.
    pub inbox_lambda: Vec<Option<f64>>,
    pub inbox_anchor: Vec<Option<f64>>,
    last_sent_lambda: f64,
    last_sent_anchor: f64,
}

impl UserAgent {
    /// Fresh agent. Every user starts from the same known all-zero state, so
    /// the inbox starts filled with zeros.
    pub fn new(id: usize, n: usize) -> Self {
        Self {
            id,
            lambda: 0.0,
            lambda_bar: 0.0,
            h: 0.0,
            kappa: 1.0,
            kappa_bar: 1.0,
            prev_offset: 0.0,
            inbox_lambda: vec![Some(0.0); n],
            inbox_anchor: vec![Some(0.0); n],
            last_sent_lambda: 0.0,
            last_sent_anchor: 0.0,
        }
    }

    /// Agent that has not heard from anybody yet.
    pub fn unsynchronized(id: usize, n: usize) -> Self {
        Self {
            inbox_lambda: vec![None; n],
            inbox_anchor: vec![None; n],
            ..Self::new(id, n)
        }
    }

    /// `max_l (c + value_l)` over the own value and the inbox.
    pub fn normalization(&self, slot: Slot, own: f64, c: f64) -> Result<f64> {
        let inbox = match slot {
            Slot::Lambda => &self.inbox_lambda,
            Slot::AnchorLambda => &self.inbox_anchor,
        };
        let mut norm = c;
        for (l, v) in inbox.iter().enumerate() {
            let x = if l == self.id {
                own
            } else {
                v.ok_or_else(|| {
                    Error::Protocol(format!("user {} has no {slot:?} value from user {l}", self.id))
                })?
            };
            norm = norm.max(c + x);
        }
        Ok(norm)
    }

    fn deliver(&mut self, msg: &BusMessage) {
        let slot = match msg.slot {
            Slot::Lambda => &mut self.inbox_lambda,
            Slot::AnchorLambda => &mut self.inbox_anchor,
        };
        slot[msg.sender] = Some(msg.payload);
    }
}

/// Synchronous bus with optional independent delivery drops.
#[derive(Clone, Debug)]
pub struct Bus {
    pub mode: BusMode,
    pub drop_prob: f64,
    pub seed: u64,
    /// Exchange indices (counted from 0 over the whole run) that are lost
    /// entirely.
    pub skip: Vec<u64>,
    exchanges: u64,
}

impl Bus {
    pub fn new(mode: BusMode, drop_prob: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&drop_prob) {
            return Err(invalid("drop probability must lie in [0, 1]"));
        }
        Ok(Self {
            mode,
            drop_prob,
            seed,
            skip: Vec::new(),
            exchanges: 0,
        })
    }

    pub fn lossless(mode: BusMode) -> Self {
        Self::new(mode, 0.0, 0).expect("valid")
    }

    pub fn exchanges(&self) -> u64 {
        self.exchanges
    }
}

/// One exchange of `slot`: every agent offers `values[i]`; the bus decides
/// who sends and what arrives. Returns the number of deliveries.
pub fn broadcast_lambda(
    agents: &mut [UserAgent],
    values: &[f64],
    slot: Slot,
    bus: &mut Bus,
    ledger: &mut OverheadLedger,
    timestamp: u64,
) -> Result<u64> {
    let n = agents.len();
    if values.len() != n || ledger.bits.len() != n {
        return Err(invalid("bus exchange sizes do not match the number of agents"));
    }
    if let Some(x) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite value {x} offered to the bus")));
    }
    let exchange = bus.exchanges;
    bus.exchanges += 1;
    let lost = bus.skip.contains(&exchange);
    let mut outgoing = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        let last = match slot {
            Slot::Lambda => &mut agents[i].last_sent_lambda,
            Slot::AnchorLambda => &mut agents[i].last_sent_anchor,
        };
        let send = match bus.mode {
            BusMode::Broadcast => true,
            BusMode::ChangeTriggered => (v - *last).abs() > CHANGE_TOL,
        };
        if send {
            *last = v;
            outgoing.push(BusMessage { sender: i, slot, payload: v, timestamp });
        }
    }
    let mut deliveries = 0;
    for msg in &outgoing {
        if n > 1 {
            ledger.broadcasts[msg.sender] += 1;
        }
        for r in 0..n {
            if r == msg.sender {
                continue;
            }
            ledger.messages[msg.sender] += 1;
            ledger.bits[msg.sender] += WIRE_BITS;
            deliveries += 1;
            if lost {
                continue;
            }
            if bus.drop_prob > 0.0 {
                let u = uniform(bus.seed, &[domain::BUS, exchange, msg.sender as u64, r as u64]);
                if u < bus.drop_prob {
                    continue;
                }
            }
            agents[r].deliver(msg);
        }
    }
    Ok(deliveries)
}

/// All agents plus the bus, driven in lock step.
pub struct DistributedAlcor {
    pub agents: Vec<UserAgent>,
    pub bus: Bus,
    pub ledger: OverheadLedger,
    pub kappa_offset: f64,
    /// Seconds per channel instant, for the ledger clock.
    pub instant_s: f64,
    instants: u64,
    view: AlcorState,
}

impl DistributedAlcor {
    pub fn new(n: usize, bus: Bus, kappa_offset: f64, instant_s: f64) -> Self {
        Self {
            agents: (0..n).map(|i| UserAgent::new(i, n)).collect(),
            bus,
            ledger: OverheadLedger::new(n),
            kappa_offset,
            instant_s,
            instants: 0,
            view: AlcorState::with_offset(n, kappa_offset),
        }
    }

    pub fn lossless(n: usize) -> Self {
        Self::new(n, Bus::lossless(BusMode::Broadcast), KAPPA_OFFSET, 0.01)
    }

    fn coins(&self, key: &BatchKey, batch: usize, kappa: impl Fn(&UserAgent) -> f64) -> Vec<UsvSample> {
        (0..batch)
            .map(|j| {
                UsvSample::new(
                    self.agents
                        .iter()
                        .map(|a| activate(key.coin(j, a.id), kappa(a)))
                        .collect(),
                )
            })
            .collect()
    }

    fn refresh_view(&mut self, k: usize) {
        let v = &mut self.view;
        v.lambda = self.agents.iter().map(|a| a.lambda).collect();
        v.lambda_bar = self.agents.iter().map(|a| a.lambda_bar).collect();
        v.h = self.agents.iter().map(|a| a.h).collect();
        v.kappa = self.agents.iter().map(|a| a.kappa).collect();
        v.kappa_bar = self.agents.iter().map(|a| a.kappa_bar).collect();
        v.prev_offset = self.agents.iter().map(|a| a.prev_offset).collect();
        v.k = k;
    }
}

/// One synchronous iteration of every agent.
pub fn distributed_step(
    sys: &mut DistributedAlcor,
    oracle: &mut dyn GapOracle,
    schedule: &Schedule,
    seed: u64,
    window: u64,
    horizon: usize,
) -> Result<StepReport> {
    let k = sys.view.k;
    let alpha = schedule.alpha_at(k);
    let gamma = schedule.gamma;
    let batch = schedule.batch_at(k, horizon);
    let c = sys.kappa_offset;

    let anchor_key = BatchKey::new(seed, window, k as u64, phase::ANCHOR);
    let anchor_samples = sys.coins(&anchor_key, batch, |a| a.kappa_bar);
    let anchor_lambda: Vec<f64> = sys.agents.iter().map(|a| a.lambda_bar.max(0.0)).collect();
    let kappa_bar: Vec<f64> = sys.agents.iter().map(|a| a.kappa_bar).collect();
    let anchor = oracle.evaluate(&Query { lambda: &anchor_lambda, kappa: &kappa_bar }, &anchor_samples, anchor_key)?;
    sys.instants += batch as u64;

    for a in sys.agents.iter_mut() {
        let g = anchor.mean_gap[a.id];
        if !g.is_finite() {
            return Err(Error::Numerical(format!("non-finite anchor gap for user {} at iteration {k}", a.id)));
        }
        a.h = anchor_coordinate(a.lambda_bar, a.prev_offset, g, gamma, alpha);
        a.lambda = a.h.max(0.0);
    }
    let lambdas: Vec<f64> = sys.agents.iter().map(|a| a.lambda).collect();
    broadcast_lambda(&mut sys.agents, &lambdas, Slot::Lambda, &mut sys.bus, &mut sys.ledger, sys.instants)?;
    for a in sys.agents.iter_mut() {
        let norm = a.normalization(Slot::Lambda, a.lambda, c)?;
        a.kappa = kappa_coordinate(a.lambda, norm, c);
    }

    let main_key = BatchKey::new(seed, window, k as u64, phase::MAIN);
    let main_samples = sys.coins(&main_key, batch, |a| a.kappa);
    let kappa: Vec<f64> = sys.agents.iter().map(|a| a.kappa).collect();
    let main = oracle.evaluate(&Query { lambda: &lambdas, kappa: &kappa }, &main_samples, main_key)?;
    sys.instants += batch as u64;

    for a in sys.agents.iter_mut() {
        let g = main.mean_gap[a.id];
        if !g.is_finite() {
            return Err(Error::Numerical(format!("non-finite main gap for user {} at iteration {k}", a.id)));
        }
        let next = correction_coordinate(a.lambda_bar, a.h, a.lambda, g, gamma, alpha);
        a.prev_offset = a.h - a.lambda_bar;
        a.lambda_bar = next;
    }
    let anchors: Vec<f64> = sys.agents.iter().map(|a| a.lambda_bar.max(0.0)).collect();
    broadcast_lambda(&mut sys.agents, &anchors, Slot::AnchorLambda, &mut sys.bus, &mut sys.ledger, sys.instants)?;
    for a in sys.agents.iter_mut() {
        let own = a.lambda_bar.max(0.0);
        let norm = a.normalization(Slot::AnchorLambda, own, c)?;
        a.kappa_bar = kappa_coordinate(own, norm, c);
    }

    sys.ledger.elapsed_s = sys.instants as f64 * sys.instant_s;
    sys.refresh_view(k + 1);
    Ok(StepReport { k, alpha, batch, anchor, main })
}

impl Stepper for DistributedAlcor {
    fn step(&mut self, oracle: &mut dyn GapOracle, schedule: &Schedule, seed: u64, window: u64, horizon: usize) -> Result<StepReport> {
        distributed_step(self, oracle, schedule, seed, window, horizon)
    }

    fn state(&self) -> &AlcorState {
        &self.view
    }

    fn start_window(&mut self, warm: bool) {
        if !warm {
            let n = self.agents.len();
            // Everybody knows everybody restarts from zero.
            self.agents = (0..n).map(|i| UserAgent::new(i, n)).collect();
            self.view = AlcorState::with_offset(n, self.kappa_offset);
        }
        self.view.k = 0;
    }

    fn overhead(&self) -> (u64, u64) {
        (self.ledger.total_bits(), self.ledger.total_messages())
    }
}
