//! Shannon-rate utilities, their power gradients and masked sum utility.

use std::f64::consts::LN_2;

use crate::alcor::UsvSample;
use crate::channel::{ChannelMatrix, GainMatrix};
use crate::error::{invalid, Result};

/// Transmit powers in watts, each inside `[0, p_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerVector {
    p: Vec<f64>,
    p_max: f64,
}

impl PowerVector {
    pub fn new(p: Vec<f64>, p_max: f64) -> Result<Self> {
        if !(p_max > 0.0) || !p_max.is_finite() {
            return Err(invalid(format!("p_max must be positive, got {p_max}")));
        }
        if let Some(x) = p.iter().find(|&&x| !(0.0..=p_max).contains(&x)) {
            return Err(invalid(format!("power {x} outside [0, {p_max}]")));
        }
        Ok(Self { p, p_max })
    }

    pub fn zeros(n: usize, p_max: f64) -> Self {
        Self {
            p: vec![0.0; n],
            p_max,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.p
    }
}

fn check(g: &GainMatrix, p: &[f64], noise: f64) -> Result<()> {
    if !(noise > 0.0) {
        return Err(invalid(format!("noise power must be positive, got {noise}")));
    }
    if p.len() != g.n() {
        return Err(invalid(format!(
            "{} powers for {} users",
            p.len(),
            g.n()
        )));
    }
    Ok(())
}

/// Interference-plus-noise seen by receiver `i`.
#[inline]
fn interference(g: &GainMatrix, p: &[f64], noise: f64, i: usize) -> f64 {
    let mut acc = noise;
    for (j, &pj) in p.iter().enumerate() {
        if j != i {
            acc += g.get(i, j) * pj;
        }
    }
    acc
}

/// `R_i = log2(1 + |h_ii|^2 p_i / (noise + sum_{j != i} |h_ij|^2 p_j))`.
pub fn rates_from_gains(g: &GainMatrix, p: &[f64], noise: f64) -> Result<Vec<f64>> {
    check(g, p, noise)?;
    Ok((0..g.n())
        .map(|i| (1.0 + g.direct(i) * p[i] / interference(g, p, noise, i)).log2())
        .collect())
}

pub fn rates(h: &ChannelMatrix, p: &[f64], noise: f64) -> Result<Vec<f64>> {
    rates_from_gains(&h.power_gains(), p, noise)
}

/// Jacobian `dR_i/dp_j`, row-major N×N.
pub fn rate_gradient_from_gains(g: &GainMatrix, p: &[f64], noise: f64) -> Result<Vec<f64>> {
    check(g, p, noise)?;
    let n = g.n();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let int = interference(g, p, noise, i);
        let sig = g.direct(i) * p[i];
        let tot = int + sig;
        for j in 0..n {
            out[i * n + j] = if i == j {
                g.direct(i) / (LN_2 * tot)
            } else {
                -g.get(i, j) * sig / (LN_2 * int * tot)
            };
        }
    }
    Ok(out)
}

pub fn rate_gradient(h: &ChannelMatrix, p: &[f64], noise: f64) -> Result<Vec<f64>> {
    rate_gradient_from_gains(&h.power_gains(), p, noise)
}

/// Powers with inactive users forced to zero.
pub fn masked_powers(p: &[f64], xi: &UsvSample) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(i, &x)| if xi.is_active(i) { x } else { 0.0 })
        .collect()
}

/// Per-user rates on `H_xi` with inactive users silent; inactive users get 0.
pub fn masked_rates(g: &GainMatrix, p: &[f64], noise: f64, xi: &UsvSample) -> Result<Vec<f64>> {
    let gm = g.masked(xi)?;
    let pm = masked_powers(p, xi);
    let mut r = rates_from_gains(&gm, &pm, noise)?;
    for (i, ri) in r.iter_mut().enumerate() {
        if !xi.is_active(i) {
            *ri = 0.0;
        }
    }
    Ok(r)
}

/// `sum_i xi_i R_i` on the masked channel.
pub fn sum_utility(h: &ChannelMatrix, p: &[f64], noise: f64, xi: &UsvSample) -> Result<f64> {
    Ok(masked_rates(&h.power_gains(), p, noise, xi)?.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_rayleigh;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gm(n: usize, g: &[f64]) -> GainMatrix {
        GainMatrix::new(n, g.to_vec()).unwrap()
    }

    #[test]
    fn rate_examples() {
        assert_relative_eq!(rates_from_gains(&gm(1, &[1.0]), &[1.0], 1.0).unwrap()[0], 1.0);
        let r = rates_from_gains(&gm(2, &[1.0; 4]), &[1.0, 1.0], 1.0).unwrap();
        assert_relative_eq!(r[0], 1.5f64.log2(), epsilon = 1e-15);
        assert_relative_eq!(r[1], 0.585, epsilon = 1e-3);
        let r = rates_from_gains(&gm(2, &[1.0; 4]), &[1.0, 0.0], 1.0).unwrap();
        assert_eq!(r, vec![1.0, 0.0]);
        assert!(rates_from_gains(&gm(1, &[1.0]), &[1.0], 0.0).is_err());
        assert!(rates_from_gains(&gm(1, &[1.0]), &[1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn gradient_single_user() {
        let d = rate_gradient_from_gains(&gm(1, &[1.0]), &[1.0], 1.0).unwrap();
        assert_relative_eq!(d[0], 1.0 / (2.0 * LN_2), epsilon = 1e-15);
        assert_relative_eq!(d[0], 0.7213, epsilon = 1e-4);
    }

    /// Central differences on random instances.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.random_range(1..6);
            let g = sample_rayleigh(n, &mut rng).unwrap().power_gains();
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let noise = rng.random_range(0.01..1.0);
            let jac = rate_gradient_from_gains(&g, &p, noise).unwrap();
            let step = 1e-6;
            for j in 0..n {
                let mut up = p.clone();
                let mut dn = p.clone();
                up[j] += step;
                dn[j] -= step;
                let ru = rates_from_gains(&g, &up, noise).unwrap();
                let rd = rates_from_gains(&g, &dn, noise).unwrap();
                for i in 0..n {
                    let fd = (ru[i] - rd[i]) / (2.0 * step);
                    let an = jac[i * n + j];
                    let scale = an.abs().max(fd.abs()).max(1e-3);
                    assert!((an - fd).abs() / scale < 1e-5, "i={i} j={j} an={an} fd={fd}");
                    if i != j {
                        assert!(an <= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn sum_utility_examples() {
        let h = ChannelMatrix::from_power_gains(2, &[1.0; 4]).unwrap();
        let all = UsvSample::from_bits(&[1, 1]);
        let none = UsvSample::from_bits(&[0, 0]);
        let one = UsvSample::from_bits(&[1, 0]);
        let plain: f64 = rates(&h, &[1.0, 1.0], 1.0).unwrap().iter().sum();
        assert_relative_eq!(sum_utility(&h, &[1.0, 1.0], 1.0, &all).unwrap(), plain);
        assert_eq!(sum_utility(&h, &[1.0, 1.0], 1.0, &none).unwrap(), 0.0);
        assert_relative_eq!(sum_utility(&h, &[1.0, 1.0], 1.0, &one).unwrap(), 1.0);
    }

    #[test]
    fn power_vector_box() {
        assert!(PowerVector::new(vec![0.0, 1.0], 1.0).is_ok());
        assert!(PowerVector::new(vec![1.1], 1.0).is_err());
        assert!(PowerVector::new(vec![-0.1], 1.0).is_err());
        assert!(PowerVector::new(vec![0.1], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn deactivation_never_hurts_others(seed in 0u64..10_000, off in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = sample_rayleigh(4, &mut rng).unwrap().power_gains();
            let p: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let all = UsvSample::from_bits(&[1, 1, 1, 1]);
            let mut bits = [1u8; 4];
            bits[off] = 0;
            let with = masked_rates(&g, &p, 0.1, &all).unwrap();
            let without = masked_rates(&g, &p, 0.1, &UsvSample::from_bits(&bits)).unwrap();
            for i in 0..4 {
                if i != off {
                    prop_assert!(without[i] >= with[i]);
                }
            }
        }

        #[test]
        fn sinr_scale_invariance(seed in 0u64..10_000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = sample_rayleigh(3, &mut rng).unwrap().power_gains();
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let scaled = GainMatrix::new(3, g.as_slice().iter().map(|x| x * scale).collect()).unwrap();
            let a = rates_from_gains(&g, &p, 0.2).unwrap();
            let b = rates_from_gains(&scaled, &p, 0.2 * scale).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
            }
        }
    }
}
