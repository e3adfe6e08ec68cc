//! Per-user demands and the stochastic constraint gap `F = u_min - utility`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Consecutive-growth threshold used for delay-tolerant users.
pub const DEFAULT_C_MAX: u32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Demand {
    /// Minimum average utility in bits/s/Hz.
    Rate {
        u_min: f64,
        #[serde(default = "unit")]
        gap_scale: f64,
    },
    /// Queue-length threshold in packets.
    Latency {
        d_max: u64,
        #[serde(default = "unit")]
        gap_scale: f64,
    },
    /// At most `c_max` consecutive batches of queue growth.
    Stability {
        #[serde(default = "default_c_max")]
        c_max: u32,
        #[serde(default = "unit")]
        gap_scale: f64,
    },
}

fn unit() -> f64 {
    1.0
}

fn default_c_max() -> u32 {
    DEFAULT_C_MAX
}

impl Demand {
    pub fn rate(u_min: f64) -> Self {
        Demand::Rate { u_min, gap_scale: 1.0 }
    }

    pub fn gap_scale(&self) -> f64 {
        match *self {
            Demand::Rate { gap_scale, .. }
            | Demand::Latency { gap_scale, .. }
            | Demand::Stability { gap_scale, .. } => gap_scale,
        }
    }

    pub fn u_min(&self) -> Option<f64> {
        match *self {
            Demand::Rate { u_min, .. } => Some(u_min),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Demand::Rate { u_min, .. } => u_min >= 0.0 && u_min.is_finite(),
            Demand::Latency { d_max, .. } => d_max >= 1,
            Demand::Stability { c_max, .. } => c_max >= 1,
        };
        let scale = self.gap_scale();
        if !ok || !(scale > 0.0 && scale.is_finite()) {
            return Err(invalid(format!("invalid demand {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DemandSpec {
    entries: Vec<Demand>,
}

impl DemandSpec {
    pub fn new(entries: Vec<Demand>) -> Result<Self> {
        for d in &entries {
            d.validate()?;
        }
        Ok(Self { entries })
    }

    pub fn rates(u_min: &[f64]) -> Result<Self> {
        Self::new(u_min.iter().map(|&u| Demand::rate(u)).collect())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Demand] {
        &self.entries
    }

    pub fn gap_scales(&self) -> Vec<f64> {
        self.entries.iter().map(Demand::gap_scale).collect()
    }

    /// Rate demands, with zero for queue-based users.
    pub fn rate_floor(&self) -> Vec<f64> {
        self.entries.iter().map(|d| d.u_min().unwrap_or(0.0)).collect()
    }

    /// Rate demands, or an error if any user has a queue-based demand.
    pub fn require_rates(&self) -> Result<Vec<f64>> {
        self.entries
            .iter()
            .map(|d| d.u_min().ok_or_else(|| invalid("this oracle supports rate demands only")))
            .collect()
    }
}

/// One stochastic gap vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GapSample(pub Vec<f64>);

pub fn gap_rate(u_min: &[f64], realized: &[f64]) -> Result<GapSample> {
    if u_min.len() != realized.len() {
        return Err(invalid("demand and utility vectors differ in length"));
    }
    Ok(GapSample(u_min.iter().zip(realized).map(|(u, r)| u - r).collect()))
}

/// Queue-based gaps: `q - d_max` for latency users, `c - c_max` for
/// stability users. Rate users read `u_min - rate`.
pub fn gap_queue(spec: &DemandSpec, q: &[u64], c: &[u32], rates: &[f64]) -> Result<GapSample> {
    let n = spec.len();
    if q.len() != n || c.len() != n || rates.len() != n {
        return Err(invalid("queue state does not match the demand spec"));
    }
    Ok(GapSample(
        spec.entries
            .iter()
            .enumerate()
            .map(|(i, d)| {
                d.gap_scale()
                    * match *d {
                        Demand::Rate { u_min, .. } => u_min - rates[i],
                        Demand::Latency { d_max, .. } => q[i] as f64 - d_max as f64,
                        Demand::Stability { c_max, .. } => c[i] as f64 - c_max as f64,
                    }
            })
            .collect(),
    ))
}

/// Scaled rate gap, as fed to the solver.
pub fn scaled_rate_gap(spec: &DemandSpec, realized: &[f64]) -> Result<GapSample> {
    let u = spec.require_rates()?;
    let mut g = gap_rate(&u, realized)?;
    for (x, s) in g.0.iter_mut().zip(spec.gap_scales()) {
        *x *= s;
    }
    Ok(g)
}

/// Element-wise mean, summed in input order.
pub fn batch_mean_gap(samples: &[GapSample]) -> Result<GapSample> {
    let first = samples.first().ok_or_else(|| invalid("empty batch"))?;
    let n = first.0.len();
    let mut acc = vec![0.0; n];
    for s in samples {
        if s.0.len() != n {
            return Err(invalid("gap samples differ in length"));
        }
        for (a, x) in acc.iter_mut().zip(&s.0) {
            *a += x;
        }
    }
    let b = samples.len() as f64;
    Ok(GapSample(acc.into_iter().map(|a| a / b).collect()))
}

/// `ceil(latency_ms * nu / 1000)` packets, at least one.
pub fn latency_threshold(latency_ms: f64, arrival_rate: f64) -> Result<u64> {
    if !(latency_ms > 0.0 && arrival_rate > 0.0) {
        return Err(invalid("latency and arrival rate must be positive"));
    }
    Ok(((latency_ms * arrival_rate / 1000.0).ceil() as u64).max(1))
}
