//! Run configuration. Every section rejects unknown keys.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alcor::{AlphaSchedule, BatchSchedule, Method, Schedule, SolverConfig, Window, KAPPA_OFFSET};
use crate::channel::{dbm_to_watts, sample_rayleigh, CellTopology, FadingParams, GainMatrix};
use crate::constraints::{Demand, DemandSpec};
use crate::distributed::BusMode;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::rng::{domain, substream};
use crate::traffic::{Assignment, TrafficSpec, UserTraffic};
use crate::ura::{KappaMode, MaxPower, MlpPolicy, SharedPolicy, TrainConfig, Wmmse, WmmseConfig};

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Centralized,
    Distributed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultConfig {
    pub drop_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelConfig {
    /// IID `CN(0, 1)` gains; noise is `p_max / 10^(snr_db / 10)`.
    Rayleigh {
        n_users: usize,
        #[serde(default = "default_snr")]
        snr_db: f64,
    },
    Multicell {
        n_users: usize,
        #[serde(default = "default_cells")]
        n_cells: usize,
        #[serde(default = "default_radius")]
        cell_radius_m: f64,
        #[serde(default = "default_min_distance")]
        min_distance_m: f64,
        #[serde(default)]
        fading: FadingParams,
    },
}

fn default_snr() -> f64 {
    15.0
}
fn default_cells() -> usize {
    7
}
fn default_radius() -> f64 {
    500.0
}
fn default_min_distance() -> f64 {
    50.0
}

impl ChannelConfig {
    pub fn n_users(&self) -> usize {
        match *self {
            ChannelConfig::Rayleigh { n_users, .. } | ChannelConfig::Multicell { n_users, .. } => n_users,
        }
    }

    /// Noise power in watts for a transmitter limit of `p_max` watts.
    pub fn noise(&self, p_max: f64) -> f64 {
        match self {
            ChannelConfig::Rayleigh { snr_db, .. } => p_max / 10f64.powf(snr_db / 10.0),
            ChannelConfig::Multicell { fading, .. } => fading.noise_watts(),
        }
    }

    pub fn topology(&self, seed: u64) -> Result<CellTopology> {
        match self {
            ChannelConfig::Multicell { n_users, n_cells, cell_radius_m, min_distance_m, .. } => {
                let mut rng = substream(seed, &[domain::TOPOLOGY]);
                CellTopology::hexagonal(*n_users, *n_cells, *cell_radius_m, *min_distance_m, &mut rng)
            }
            ChannelConfig::Rayleigh { .. } => Err(cfg_err("a topology needs channel.kind = multicell")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UraKind {
    #[default]
    Wmmse,
    Maxpower,
    Mlp,
}

impl std::str::FromStr for UraKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wmmse" => Ok(UraKind::Wmmse),
            "maxpower" => Ok(UraKind::Maxpower),
            "mlp" => Ok(UraKind::Mlp),
            other => Err(cfg_err(format!("unknown URA back-end {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![400, 400, 200],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UraConfig {
    pub kind: UraKind,
    /// Watts; overridden by `p_max_dbm` when present.
    pub p_max: f64,
    pub p_max_dbm: Option<f64>,
    pub wmmse: WmmseConfig,
    pub mlp: MlpConfig,
    /// Checkpoint to load instead of training.
    pub policy_file: Option<PathBuf>,
}

impl Default for UraConfig {
    fn default() -> Self {
        Self {
            kind: UraKind::Wmmse,
            p_max: 1.0,
            p_max_dbm: None,
            wmmse: WmmseConfig::default(),
            mlp: MlpConfig::default(),
            policy_file: None,
        }
    }
}

impl UraConfig {
    pub fn p_max_watts(&self) -> f64 {
        self.p_max_dbm.map_or(self.p_max, dbm_to_watts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlcorConfig {
    pub gamma: f64,
    pub alpha: AlphaSchedule,
    pub batch: BatchSchedule,
    /// Iterations per window when a window does not say.
    #[serde(rename = "K")]
    pub k: usize,
    pub warm_start: bool,
    pub kappa_offset: f64,
    pub method: Method,
}

impl Default for AlcorConfig {
    fn default() -> Self {
        let s = Schedule::default();
        Self {
            gamma: s.gamma,
            alpha: s.alpha,
            batch: s.batch,
            k: 500,
            warm_start: true,
            kappa_offset: KAPPA_OFFSET,
            method: Method::Alcor,
        }
    }
}

impl AlcorConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule { gamma: self.gamma, alpha: self.alpha, batch: self.batch }
    }
}

/// Demands as plain rates or as typed entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DemandsConfig {
    Rates(Vec<f64>),
    Entries(Vec<Demand>),
}

impl DemandsConfig {
    pub fn to_spec(&self) -> Result<DemandSpec> {
        let spec = match self {
            DemandsConfig::Rates(r) => DemandSpec::rates(r),
            DemandsConfig::Entries(e) => DemandSpec::new(e.clone()),
        };
        spec.map_err(|e| cfg_err(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    #[serde(default)]
    pub demands: Option<DemandsConfig>,
    #[serde(default, rename = "K")]
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub packet_bits: f64,
    pub bandwidth_hz: f64,
    pub n_subchannels: usize,
    pub dt: f64,
    pub assignment: Assignment,
    /// Explicit users; when empty they are drawn from the ranges below.
    pub users: Vec<UserTraffic>,
    pub n_sensitive: usize,
    pub nu_range: (f64, f64),
    pub latency_range: (f64, f64),
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            packet_bits: 4000.0,
            bandwidth_hz: 1e6,
            n_subchannels: 5,
            dt: 0.01,
            assignment: Assignment::Random,
            users: Vec::new(),
            n_sensitive: 0,
            nu_range: (50.0, 400.0),
            latency_range: (20.0, 80.0),
        }
    }
}

impl TrafficConfig {
    pub fn spec(&self, n_users: usize, seed: u64) -> Result<TrafficSpec> {
        let users = if self.users.is_empty() {
            let mut rng: ChaCha8Rng = substream(seed, &[domain::TRAFFIC, u64::MAX]);
            TrafficSpec::random(n_users, self.n_sensitive, self.nu_range, self.latency_range, &mut rng).users
        } else {
            self.users.clone()
        };
        if users.len() != n_users {
            return Err(cfg_err(format!("traffic lists {} users, channel has {n_users}", users.len())));
        }
        let spec = TrafficSpec {
            packet_bits: self.packet_bits,
            bandwidth_hz: self.bandwidth_hz,
            n_subchannels: self.n_subchannels,
            dt: self.dt,
            assignment: self.assignment,
            users,
        };
        spec.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub kappas: Vec<f64>,
    pub draws: usize,
    pub backends: Vec<UraKind>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            kappas: vec![0.25, 0.5, 0.75, 1.0],
            draws: 1000,
            backends: vec![UraKind::Wmmse, UraKind::Maxpower],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub lipschitz_pairs: usize,
    pub lipschitz_samples: usize,
    /// Upper bound of the uniform draw of each lambda entry.
    pub lambda_max: f64,
    pub variance_samples: usize,
    pub variance_batch: usize,
    pub variance_batches: usize,
    pub bernoulli_draws: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            lipschitz_pairs: 50,
            lipschitz_samples: 10_000,
            lambda_max: 3.0,
            variance_samples: 5000,
            variance_batch: 25,
            variance_batches: 2000,
            bernoulli_draws: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateOracleKind {
    /// `F = b - lambda + sigma * noise` with `b` the first window's demands.
    Synthetic { sigma: f64 },
    /// The configured channel and URA back-end.
    Scenario,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateStudyConfig {
    pub oracle: RateOracleKind,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    pub checkpoints_per_decade: usize,
    pub checkpoint_samples: usize,
}

impl Default for RateStudyConfig {
    fn default() -> Self {
        Self {
            oracle: RateOracleKind::Synthetic { sigma: 1.0 },
            horizons: vec![100, 1000, 10_000],
            seeds: vec![1, 2, 3],
            checkpoints_per_decade: 10,
            checkpoint_samples: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub bus: BusMode,
    #[serde(default)]
    pub fault: FaultConfig,
    pub channel: ChannelConfig,
    #[serde(default)]
    pub ura: UraConfig,
    #[serde(default)]
    pub alcor: AlcorConfig,
    #[serde(default)]
    pub windows: Vec<WindowConfig>,
    #[serde(default)]
    pub traffic: TrafficConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub rate_study: RateStudyConfig,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n_users(&self) -> usize {
        self.channel.n_users()
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| cfg_err(e.to_string()));
        if self.n_users() == 0 {
            return Err(cfg_err("channel.n_users must be at least 1"));
        }
        if self.replications == 0 {
            return Err(cfg_err("replications must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.fault.drop_prob) {
            return Err(cfg_err("fault.drop_prob must lie in [0, 1]"));
        }
        if !(self.ura.p_max_watts() > 0.0) {
            return Err(cfg_err("ura.p_max must be positive"));
        }
        if !(self.alcor.kappa_offset > 0.0) {
            return Err(cfg_err("alcor.kappa_offset must be positive"));
        }
        wrap(self.alcor.schedule().validate())?;
        wrap(self.metrics.validate())?;
        wrap(self.ura.wmmse.validate())?;
        if let ChannelConfig::Multicell { fading, .. } = &self.channel {
            wrap(fading.validate())?;
        }
        for (w, win) in self.windows.iter().enumerate() {
            if let Some(d) = &win.demands {
                let spec = d.to_spec()?;
                if spec.len() != self.n_users() {
                    return Err(cfg_err(format!(
                        "window {w} lists {} demands for {} users",
                        spec.len(),
                        self.n_users()
                    )));
                }
            }
        }
        if self.bench.kappas.iter().any(|k| !(0.0..=1.0).contains(k)) || self.bench.draws == 0 {
            return Err(cfg_err("bench needs kappas in [0, 1] and at least one draw"));
        }
        if self.rate_study.horizons.contains(&0) || self.rate_study.seeds.is_empty() {
            return Err(cfg_err("rate_study needs positive horizons and at least one seed"));
        }
        Ok(())
    }

    pub fn solver(&self, seed: u64) -> SolverConfig {
        SolverConfig {
            schedule: self.alcor.schedule(),
            kappa_offset: self.alcor.kappa_offset,
            warm_start: self.alcor.warm_start,
            method: self.alcor.method,
            metrics: self.metrics.clone(),
            seed,
        }
    }

    /// Windows with rate demands; a window without demands is an error here.
    pub fn rate_windows(&self) -> Result<Vec<Window>> {
        if self.windows.is_empty() {
            return Err(cfg_err("at least one window with demands is required"));
        }
        self.windows
            .iter()
            .enumerate()
            .map(|(w, win)| {
                let d = win
                    .demands
                    .as_ref()
                    .ok_or_else(|| cfg_err(format!("window {w} has no demands")))?;
                Ok(Window { demands: d.to_spec()?, iterations: win.k.unwrap_or(self.alcor.k) })
            })
            .collect()
    }

    /// Builds the allocation policy; the MLP is loaded or trained here.
    pub fn policy(&self, seed: u64, exec: crate::exec::Exec) -> Result<SharedPolicy> {
        let p_max = self.ura.p_max_watts();
        Ok(match self.ura.kind {
            UraKind::Maxpower => Arc::new(MaxPower::new(p_max)),
            UraKind::Wmmse => Arc::new(Wmmse::new(self.ura.wmmse.clone(), p_max)?),
            UraKind::Mlp => Arc::new(self.mlp_policy(seed, exec)?),
        })
    }

    fn mlp_policy(&self, seed: u64, exec: crate::exec::Exec) -> Result<MlpPolicy> {
        let n = self.n_users();
        let p_max = self.ura.p_max_watts();
        if let Some(path) = &self.ura.policy_file {
            let p = MlpPolicy::load(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
            if p.n_users != n {
                return Err(cfg_err(format!("policy file is for {} users, channel has {n}", p.n_users)));
            }
            return Ok(p);
        }
        if !matches!(self.channel, ChannelConfig::Rayleigh { .. }) {
            return Err(cfg_err("in-process MLP training supports the rayleigh channel only; pass a policy file"));
        }
        let mut rng = substream(seed, &[domain::TRAIN, u64::MAX - 1]);
        let mut policy = MlpPolicy::new(n, &self.ura.mlp.hidden, p_max, &mut rng)?;
        let train = TrainConfig {
            noise: self.channel.noise(p_max),
            seed,
            ..self.ura.mlp.train.clone()
        };
        crate::ura::mlp_train(&mut policy, rayleigh_sampler(n), &train, exec)?;
        Ok(policy)
    }

    /// Uses the policy file only when the kind asks for it.
    pub fn kappa_mode(&self) -> KappaMode {
        self.ura.mlp.train.mode
    }
}

/// Channel sampler for policy training.
pub fn rayleigh_sampler(n: usize) -> impl Fn(&mut ChaCha8Rng) -> Result<GainMatrix> + Sync + Send {
    move |rng: &mut ChaCha8Rng| Ok(sample_rayleigh(n, rng)?.power_gains())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::from_json(r#"{"channel":{"kind":"rayleigh","n_users":5}}"#).unwrap();
        assert_eq!(c.replications, 1);
        assert_eq!(c.alcor.alpha, AlphaSchedule::Fixed(0.9));
        assert_eq!(c.alcor.batch, BatchSchedule::Fixed(25));
        assert!((c.channel.noise(1.0) - 10f64.powf(-1.5)).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"channel":{"kind":"rayleigh","n_users":5},"colour":1}"#,
            r#"{"channel":{"kind":"rayleigh","n_users":5,"x":0}}"#,
            r#"{"channel":{"kind":"rayleigh","n_users":5},"alcor":{"gama":1}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn schedules_parse() {
        let c = RunConfig::from_json(
            r#"{"channel":{"kind":"rayleigh","n_users":2},
                "alcor":{"gamma":3,"alpha":{"diminishing":{"a0":0.9,"atilde":1}},"batch":"growing","K":40},
                "windows":[{"demands":[0.5,1]},{"demands":[{"kind":"rate","u_min":0.2},{"kind":"rate","u_min":0}],"K":7}]}"#,
        )
        .unwrap();
        assert_eq!(c.alcor.batch, BatchSchedule::Growing);
        let w = c.rate_windows().unwrap();
        assert_eq!(w[0].iterations, 40);
        assert_eq!(w[1].iterations, 7);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for bad in [
            r#"{"channel":{"kind":"rayleigh","n_users":0}}"#,
            r#"{"channel":{"kind":"rayleigh","n_users":2},"windows":[{"demands":[1]}]}"#,
            r#"{"channel":{"kind":"rayleigh","n_users":2},"alcor":{"alpha":{"fixed":1.5}}}"#,
            r#"{"channel":{"kind":"rayleigh","n_users":2},"windows":[{"demands":[-1,0]}]}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::from_json(r#"{"channel":{"kind":"multicell","n_users":4},"windows":[{"demands":[1,1,1,1]}]}"#)
            .unwrap();
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, back);
    }
}
