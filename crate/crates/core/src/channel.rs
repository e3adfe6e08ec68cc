//! Channel realizations for the two evaluation scenarios and dB helpers.
//!
//! Row `i` of a channel matrix is receiver `i`, column `j` transmitter `j`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alcor::UsvSample;
use crate::error::{invalid, Result};
use crate::rng::{domain, substream};

/// Complex N×N channel of one time instant, optionally of one sub-channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMatrix {
    n_users: usize,
    gains: Vec<Complex64>,
    subchannel_id: Option<usize>,
}

impl ChannelMatrix {
    pub fn new(n_users: usize, gains: Vec<Complex64>) -> Result<Self> {
        if n_users == 0 {
            return Err(invalid("channel needs at least one user"));
        }
        if gains.len() != n_users * n_users {
            return Err(invalid(format!(
                "channel has {} entries, expected {}",
                gains.len(),
                n_users * n_users
            )));
        }
        if gains.iter().any(|g| !g.re.is_finite() || !g.im.is_finite()) {
            return Err(invalid("channel gains must be finite"));
        }
        Ok(Self {
            n_users,
            gains,
            subchannel_id: None,
        })
    }

    /// Builds a real-valued channel with amplitudes `sqrt(g_ij)`.
    pub fn from_power_gains(n_users: usize, power: &[f64]) -> Result<Self> {
        if power.iter().any(|&g| g < 0.0) {
            return Err(invalid("power gains must be nonnegative"));
        }
        Self::new(
            n_users,
            power.iter().map(|&g| Complex64::new(g.sqrt(), 0.0)).collect(),
        )
    }

    pub fn with_subchannel(mut self, id: usize) -> Self {
        self.subchannel_id = Some(id);
        self
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn subchannel_id(&self) -> Option<usize> {
        self.subchannel_id
    }

    pub fn gain(&self, rx: usize, tx: usize) -> Complex64 {
        self.gains[rx * self.n_users + tx]
    }

    pub fn gains(&self) -> &[Complex64] {
        &self.gains
    }

    /// `|h_ij|^2` for every entry.
    pub fn power_gains(&self) -> GainMatrix {
        GainMatrix {
            n: self.n_users,
            g: self.gains.iter().map(|h| h.norm_sqr()).collect(),
        }
    }
}

/// Real matrix of power gains `|h_ij|^2`, the only part of the channel the
/// rate model depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct GainMatrix {
    n: usize,
    g: Vec<f64>,
}

impl GainMatrix {
    pub fn new(n: usize, g: Vec<f64>) -> Result<Self> {
        if n == 0 || g.len() != n * n {
            return Err(invalid(format!(
                "gain matrix needs {}x{} entries, got {}",
                n,
                n,
                g.len()
            )));
        }
        if g.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(invalid("power gains must be finite and nonnegative"));
        }
        Ok(Self { n, g })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, rx: usize, tx: usize) -> f64 {
        self.g[rx * self.n + tx]
    }

    #[inline]
    pub fn direct(&self, i: usize) -> f64 {
        self.g[i * (self.n + 1)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.g
    }

    /// Zeroes rows and columns of inactive users.
    pub fn masked(&self, xi: &UsvSample) -> Result<Self> {
        if xi.len() != self.n {
            return Err(invalid(format!(
                "activation vector has {} entries for {} users",
                xi.len(),
                self.n
            )));
        }
        let mut g = self.g.clone();
        for i in 0..self.n {
            for j in 0..self.n {
                if !xi.is_active(i) || !xi.is_active(j) {
                    g[i * self.n + j] = 0.0;
                }
            }
        }
        Ok(Self { n: self.n, g })
    }
}

/// IID `CN(0,1)` channel: real and imaginary parts each `Normal(0, 1/2)`.
pub fn sample_rayleigh<R: Rng + ?Sized>(n_users: usize, rng: &mut R) -> Result<ChannelMatrix> {
    if n_users == 0 {
        return Err(invalid("n_users must be at least 1"));
    }
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid sigma");
    let gains = (0..n_users * n_users)
        .map(|_| Complex64::new(normal.sample(rng), normal.sample(rng)))
        .collect();
    ChannelMatrix::new(n_users, gains)
}

/// `H_xi`: rows and columns of deactivated users set to zero.
pub fn mask_channel(h: &ChannelMatrix, xi: &UsvSample) -> Result<ChannelMatrix> {
    let n = h.n_users;
    if xi.len() != n {
        return Err(invalid(format!(
            "activation vector has {} entries for {} users",
            xi.len(),
            n
        )));
    }
    let mut gains = h.gains.clone();
    for i in 0..n {
        for j in 0..n {
            if !xi.is_active(i) || !xi.is_active(j) {
                gains[i * n + j] = Complex64::new(0.0, 0.0);
            }
        }
    }
    Ok(ChannelMatrix {
        n_users: n,
        gains,
        subchannel_id: h.subchannel_id,
    })
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Small-scale fading law.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallScale {
    #[default]
    CircularGaussian,
}

/// Path loss, shadowing and noise of the multi-cell scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FadingParams {
    pub pathloss_fixed_db: f64,
    /// dB per decade of distance in km.
    pub pathloss_slope: f64,
    pub shadowing_sigma_db: f64,
    pub noise_power_dbm: f64,
    pub small_scale: SmallScale,
    /// Small-scale draws per large-scale draw.
    pub coherence_ratio: u64,
}

impl Default for FadingParams {
    fn default() -> Self {
        Self {
            pathloss_fixed_db: 120.9,
            pathloss_slope: 37.6,
            shadowing_sigma_db: 8.0,
            noise_power_dbm: -114.0,
            small_scale: SmallScale::CircularGaussian,
            coherence_ratio: 10,
        }
    }
}

impl FadingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.shadowing_sigma_db >= 0.0) {
            return Err(invalid("shadowing_sigma_db must be >= 0"));
        }
        if !(self.pathloss_slope > 0.0) {
            return Err(invalid("pathloss_slope must be > 0"));
        }
        if self.coherence_ratio == 0 {
            return Err(invalid("coherence_ratio must be >= 1"));
        }
        Ok(())
    }

    /// Large-scale attenuation in dB at `d_km` with shadowing `zeta_db`.
    pub fn attenuation_db(&self, d_km: f64, zeta_db: f64) -> Result<f64> {
        if !(d_km > 0.0) {
            return Err(invalid(format!("distance must be positive, got {d_km} km")));
        }
        Ok(self.pathloss_fixed_db + self.pathloss_slope * d_km.log10() + zeta_db)
    }

    pub fn sample_shadowing<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.shadowing_sigma_db == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, self.shadowing_sigma_db)
            .expect("validated sigma")
            .sample(rng)
    }

    pub fn noise_watts(&self) -> f64 {
        dbm_to_watts(self.noise_power_dbm)
    }
}

/// Cell layout: one transmitter per link at its cell center, receivers
/// scattered uniformly in the cell annulus `[min_distance_m, cell_radius_m]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTopology {
    pub n_cells: usize,
    pub cell_radius_m: f64,
    pub min_distance_m: f64,
    pub tx_positions: Vec<[f64; 2]>,
    pub rx_positions: Vec<[f64; 2]>,
}

impl CellTopology {
    /// Hexagonal cell centers with inter-site distance `2R`; link `i` lives in
    /// cell `i mod n_cells`.
    pub fn hexagonal<R: Rng + ?Sized>(
        n_links: usize,
        n_cells: usize,
        cell_radius_m: f64,
        min_distance_m: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_links == 0 || n_cells == 0 {
            return Err(invalid("topology needs at least one link and one cell"));
        }
        if !(min_distance_m > 0.0 && min_distance_m < cell_radius_m) {
            return Err(invalid("need 0 < min_distance_m < cell_radius_m"));
        }
        let centers = hex_centers(n_cells, 2.0 * cell_radius_m);
        let mut tx_positions = Vec::with_capacity(n_links);
        let mut rx_positions = Vec::with_capacity(n_links);
        for link in 0..n_links {
            let c = centers[link % n_cells];
            tx_positions.push(c);
            // rejection sampling inside the disk, outside the inner radius
            let p = loop {
                let x = rng.random_range(-cell_radius_m..cell_radius_m);
                let y = rng.random_range(-cell_radius_m..cell_radius_m);
                let r2 = x * x + y * y;
                if r2 <= cell_radius_m * cell_radius_m && r2 >= min_distance_m * min_distance_m
                {
                    break [c[0] + x, c[1] + y];
                }
            };
            rx_positions.push(p);
        }
        let topo = Self {
            n_cells,
            cell_radius_m,
            min_distance_m,
            tx_positions,
            rx_positions,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn n_links(&self) -> usize {
        self.tx_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tx_positions.len() != self.rx_positions.len() || self.tx_positions.is_empty() {
            return Err(invalid("topology needs matching, nonempty tx/rx lists"));
        }
        let eps = 1e-9;
        for i in 0..self.n_links() {
            let d = self.distance_m(i, i);
            if d < self.min_distance_m - eps || d > self.cell_radius_m + eps {
                return Err(invalid(format!(
                    "link {i}: receiver at {d:.2} m outside [{}, {}]",
                    self.min_distance_m, self.cell_radius_m
                )));
            }
        }
        Ok(())
    }

    /// Distance from transmitter `tx` to receiver `rx` in meters.
    pub fn distance_m(&self, rx: usize, tx: usize) -> f64 {
        let a = self.rx_positions[rx];
        let b = self.tx_positions[tx];
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }
}

fn hex_centers(n: usize, isd: f64) -> Vec<[f64; 2]> {
    // axial coordinates, ring by ring
    let mut out = vec![[0.0, 0.0]];
    let dirs: [(i64, i64); 6] = [(1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1)];
    let mut ring = 1i64;
    while out.len() < n {
        let (mut q, mut r) = (dirs[4].0 * ring, dirs[4].1 * ring);
        for d in dirs {
            for _ in 0..ring {
                let x = isd * (q as f64 + r as f64 / 2.0);
                let y = isd * (r as f64) * 3f64.sqrt() / 2.0;
                out.push([x, y]);
                q += d.0;
                r += d.1;
            }
        }
        ring += 1;
    }
    out.truncate(n);
    out
}

/// One multi-cell draw with fresh shadowing and small-scale fading:
/// `|h_ij|^2 = |g_ij|^2 / 10^(alpha_ij/10)`.
pub fn sample_multicell<R: Rng + ?Sized>(
    topology: &CellTopology,
    params: &FadingParams,
    rng: &mut R,
) -> Result<ChannelMatrix> {
    params.validate()?;
    let n = topology.n_links();
    let mut atten = Vec::with_capacity(n * n);
    for rx in 0..n {
        for tx in 0..n {
            let zeta = params.sample_shadowing(rng);
            atten.push(params.attenuation_db(topology.distance_m(rx, tx) / 1000.0, zeta)?);
        }
    }
    small_scale(n, &atten, rng)
}

fn small_scale<R: Rng + ?Sized>(n: usize, atten_db: &[f64], rng: &mut R) -> Result<ChannelMatrix> {
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid sigma");
    let gains = atten_db
        .iter()
        .map(|a| {
            let g = Complex64::new(normal.sample(rng), normal.sample(rng));
            g * 10f64.powf(-a / 20.0)
        })
        .collect();
    ChannelMatrix::new(n, gains)
}

/// Multi-cell channel process addressed by instant index. Large-scale
/// attenuation is redrawn every `coherence_ratio` instants and shared across
/// sub-channels; small-scale fading is independent per instant and
/// sub-channel.
#[derive(Clone, Debug)]
pub struct MulticellChannel {
    topology: CellTopology,
    params: FadingParams,
    seed: u64,
}

impl MulticellChannel {
    pub fn new(topology: CellTopology, params: FadingParams, seed: u64) -> Result<Self> {
        params.validate()?;
        topology.validate()?;
        Ok(Self {
            topology,
            params,
            seed,
        })
    }

    pub fn topology(&self) -> &CellTopology {
        &self.topology
    }

    pub fn params(&self) -> &FadingParams {
        &self.params
    }

    pub fn n_users(&self) -> usize {
        self.topology.n_links()
    }

    /// Attenuation (dB) for the coherence block containing `instant`.
    pub fn large_scale_db(&self, instant: u64) -> Result<Vec<f64>> {
        let block = instant / self.params.coherence_ratio;
        let mut rng = substream(self.seed, &[domain::LARGE_SCALE, block]);
        let n = self.n_users();
        let mut out = Vec::with_capacity(n * n);
        for rx in 0..n {
            for tx in 0..n {
                let zeta = self.params.sample_shadowing(&mut rng);
                out.push(
                    self.params
                        .attenuation_db(self.topology.distance_m(rx, tx) / 1000.0, zeta)?,
                );
            }
        }
        Ok(out)
    }

    pub fn sample(&self, instant: u64, subchannel: usize) -> Result<ChannelMatrix> {
        let atten = self.large_scale_db(instant)?;
        self.sample_with(&atten, instant, subchannel)
    }

    /// Small-scale draw on top of precomputed large-scale attenuation.
    pub fn sample_with(
        &self,
        atten_db: &[f64],
        instant: u64,
        subchannel: usize,
    ) -> Result<ChannelMatrix> {
        let mut rng = substream(
            self.seed,
            &[domain::CHANNEL, instant, subchannel as u64],
        );
        Ok(small_scale(self.n_users(), atten_db, &mut rng)?.with_subchannel(subchannel))
    }
}
