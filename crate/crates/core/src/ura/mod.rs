//! Unconstrained resource allocation among the active users.
//!
//! The solver only ever sees a [`UraPolicy`]: given the masked channel and the
//! activation vector it returns transmit powers. Three back-ends ship with the
//! crate: full power, WMMSE and a small MLP trained on the expected sum rate.

mod mlp;
mod wmmse;

use std::sync::Arc;

pub use mlp::{
    mlp_forward, mlp_train, Dense, KappaMode, MlpPolicy, TrainConfig, TrainTrace,
    TrainingDescriptor, POLICY_FORMAT, POLICY_VERSION,
};
pub use wmmse::{wmmse_allocate, wmmse_with_trace, Wmmse, WmmseConfig, WmmseTrace};

use crate::alcor::UsvSample;
use crate::channel::{ChannelMatrix, GainMatrix};
use crate::error::{invalid, Error, Result};
use crate::utility::PowerVector;

pub trait UraPolicy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Name and hyperparameters, recorded in run summaries.
    fn descriptor(&self) -> serde_json::Value;

    fn p_max(&self) -> f64;

    /// Powers for the active users. `gains` is already masked; entries of
    /// inactive users in the result are ignored.
    fn allocate(&self, gains: &GainMatrix, xi: &UsvSample, noise: f64) -> Result<Vec<f64>>;
}

/// Every active user transmits at `p_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxPower {
    pub p_max: f64,
}

impl MaxPower {
    pub fn new(p_max: f64) -> Self {
        Self { p_max }
    }
}

pub fn max_power_allocate(xi: &UsvSample, p_max: f64) -> Vec<f64> {
    (0..xi.len())
        .map(|i| if xi.is_active(i) { p_max } else { 0.0 })
        .collect()
}

impl UraPolicy for MaxPower {
    fn name(&self) -> &'static str {
        "maxpower"
    }

    fn descriptor(&self) -> serde_json::Value {
        serde_json::json!({ "name": self.name(), "p_max": self.p_max })
    }

    fn p_max(&self) -> f64 {
        self.p_max
    }

    fn allocate(&self, _gains: &GainMatrix, xi: &UsvSample, _noise: f64) -> Result<Vec<f64>> {
        Ok(max_power_allocate(xi, self.p_max))
    }
}

/// Runs `policy` on `H_xi` and enforces the box and the off-branch
/// (`p_i = 0` whenever `xi_i = 0`).
pub fn policy_ura_gains(
    policy: &dyn UraPolicy,
    gains: &GainMatrix,
    xi: &UsvSample,
    noise: f64,
) -> Result<PowerVector> {
    let n = gains.n();
    if xi.len() != n {
        return Err(invalid(format!(
            "activation vector has {} entries for {} users",
            xi.len(),
            n
        )));
    }
    let p_max = policy.p_max();
    if xi.n_active() == 0 {
        return Ok(PowerVector::zeros(n, p_max));
    }
    let masked = gains.masked(xi)?;
    let raw = policy.allocate(&masked, xi, noise)?;
    if raw.len() != n {
        return Err(invalid(format!(
            "{} returned {} powers for {} users",
            policy.name(),
            raw.len(),
            n
        )));
    }
    let mut p = Vec::with_capacity(n);
    for (i, &x) in raw.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Numerical(format!(
                "{} produced non-finite power for user {i}",
                policy.name()
            )));
        }
        p.push(if xi.is_active(i) { x.clamp(0.0, p_max) } else { 0.0 });
    }
    PowerVector::new(p, p_max)
}

pub fn policy_ura(
    policy: &dyn UraPolicy,
    h: &ChannelMatrix,
    xi: &UsvSample,
    noise: f64,
) -> Result<PowerVector> {
    policy_ura_gains(policy, &h.power_gains(), xi, noise)
}

pub type SharedPolicy = Arc<dyn UraPolicy>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_rayleigh;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn max_power_examples() {
        assert_eq!(max_power_allocate(&UsvSample::from_bits(&[1, 1, 0]), 1.0), vec![1.0, 1.0, 0.0]);
        assert_eq!(max_power_allocate(&UsvSample::from_bits(&[0, 0]), 1.0), vec![0.0, 0.0]);
        assert_eq!(max_power_allocate(&UsvSample::from_bits(&[1, 1]), 2.5), vec![2.5, 2.5]);
    }

    fn backends() -> Vec<SharedPolicy> {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        vec![
            Arc::new(MaxPower::new(1.0)),
            Arc::new(Wmmse::new(WmmseConfig::default(), 1.0).unwrap()),
            Arc::new(MlpPolicy::new(4, &[8, 8], 1.0, &mut rng).unwrap()),
        ]
    }

    #[test]
    fn masking_contract_for_every_backend() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = sample_rayleigh(4, &mut rng).unwrap();
        for policy in backends() {
            let xi = UsvSample::from_bits(&[1, 0, 1, 0]);
            let p = policy_ura(policy.as_ref(), &h, &xi, 0.03).unwrap();
            assert_eq!(p.as_slice()[1], 0.0, "{}", policy.name());
            assert_eq!(p.as_slice()[3], 0.0, "{}", policy.name());
            assert!(p.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));

            let none = policy_ura(policy.as_ref(), &h, &UsvSample::from_bits(&[0; 4]), 0.03).unwrap();
            assert!(none.as_slice().iter().all(|&x| x == 0.0));

            let all = UsvSample::from_bits(&[1; 4]);
            let direct = policy.allocate(&h.power_gains(), &all, 0.03).unwrap();
            let through = policy_ura(policy.as_ref(), &h, &all, 0.03).unwrap();
            assert_eq!(direct, through.into_vec(), "{}", policy.name());
        }
    }

    #[test]
    fn backends_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = sample_rayleigh(4, &mut rng).unwrap();
        let xi = UsvSample::from_bits(&[1, 1, 0, 1]);
        for (a, b) in backends().into_iter().zip(backends()) {
            assert_eq!(
                policy_ura(a.as_ref(), &h, &xi, 0.03).unwrap(),
                policy_ura(b.as_ref(), &h, &xi, 0.03).unwrap()
            );
        }
    }
}
