use proptest::prelude::*;

use alcor_core::alcor::{
    alcor_step, kappa_from_lambda, kappa_from_lambda_with, sample_usv_keyed, AlcorState, AlphaSchedule,
    BatchSchedule, GapOracle, LinearOracle, Schedule, UsvSample,
};
use alcor_core::channel::{mask_channel, sample_rayleigh, GainMatrix};
use alcor_core::constraints::{batch_mean_gap, DemandSpec, GapSample};
use alcor_core::metrics::{residual_sq, violation};
use alcor_core::rng::{phase, substream, BatchKey};
use alcor_core::traffic::{
    step_traffic, update_growth_counters, Assignment, QueueState, Sensitivity, TrafficSpec, UserTraffic,
};
use alcor_core::ura::{max_power_allocate, wmmse_allocate, WmmseConfig};
use alcor_core::utility::{masked_rates, rates_from_gains};

fn lambdas(max_n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..50.0, 1..=max_n)
}

fn gains(n: usize, seed: u64) -> GainMatrix {
    sample_rayleigh(n, &mut substream(seed, &[n as u64])).unwrap().power_gains()
}

fn bits(n: usize, mask: u32) -> UsvSample {
    UsvSample::new((0..n).map(|i| mask >> i & 1 == 1).collect())
}

proptest! {
    #[test]
    fn kappa_lies_in_unit_interval_with_unit_maximum(l in lambdas(12), c in 0.01f64..5.0) {
        let k = kappa_from_lambda_with(&l, c).unwrap();
        prop_assert!(k.iter().all(|&x| x > 0.0 && x <= 1.0));
        prop_assert_eq!(k.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn kappa_preserves_the_order_of_lambda(l in lambdas(12)) {
        let k = kappa_from_lambda(&l).unwrap();
        for i in 0..l.len() {
            for j in 0..l.len() {
                if l[i] <= l[j] {
                    prop_assert!(k[i] <= k[j]);
                }
            }
        }
    }

    #[test]
    fn kappa_is_constant_along_rays_of_one_plus_lambda(l in lambdas(8), t in 1.0f64..10.0) {
        let scaled: Vec<f64> = l.iter().map(|x| t * (1.0 + x) - 1.0).collect();
        let a = kappa_from_lambda(&l).unwrap();
        let b = kappa_from_lambda(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn keyed_activations_are_reproducible(seed in any::<u64>(), k in prop::collection::vec(0.0f64..=1.0, 1..8)) {
        let key = BatchKey::new(seed, 0, 3, phase::MAIN);
        let a = sample_usv_keyed(&k, &key, 10).unwrap();
        prop_assert_eq!(&a, &sample_usv_keyed(&k, &key, 10).unwrap());
        for xi in &a {
            for (i, &ki) in k.iter().enumerate() {
                if ki == 0.0 { prop_assert!(!xi.is_active(i)); }
                if ki == 1.0 { prop_assert!(xi.is_active(i)); }
            }
        }
    }

    #[test]
    fn masking_zeroes_exactly_the_inactive_rows_and_columns(n in 1usize..7, mask in any::<u32>(), seed in any::<u64>()) {
        let h = sample_rayleigh(n, &mut substream(seed, &[])).unwrap();
        let xi = bits(n, mask);
        let m = mask_channel(&h, &xi).unwrap();
        for i in 0..n {
            for j in 0..n {
                let kept = xi.is_active(i) && xi.is_active(j);
                prop_assert_eq!(m.gain(i, j), if kept { h.gain(i, j) } else { num_complex::Complex64::new(0.0, 0.0) });
            }
        }
        prop_assert_eq!(mask_channel(&m, &xi).unwrap(), m);
    }

    #[test]
    fn inactive_users_get_no_power_and_no_rate(n in 1usize..7, mask in any::<u32>(), seed in 0u64..1000) {
        let g = gains(n, seed);
        let xi = bits(n, mask);
        let noise = 0.03;
        for p in [
            max_power_allocate(&xi, 1.0),
            wmmse_allocate(&g.masked(&xi).unwrap(), &xi, noise, 1.0, &WmmseConfig::default()).unwrap(),
        ] {
            let r = masked_rates(&g, &p, noise, &xi).unwrap();
            for i in 0..n {
                if !xi.is_active(i) {
                    prop_assert_eq!(p[i], 0.0);
                    prop_assert_eq!(r[i], 0.0);
                }
                prop_assert!(r[i] >= 0.0 && r[i].is_finite());
            }
        }
    }

    #[test]
    fn wmmse_is_feasible_and_no_worse_than_its_start(n in 2usize..8, seed in 0u64..1000) {
        let g = gains(n, seed);
        let on = UsvSample::all_active(n);
        let noise = 0.03;
        let p = wmmse_allocate(&g, &on, noise, 1.0, &WmmseConfig::default()).unwrap();
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let sr: f64 = rates_from_gains(&g, &p, noise).unwrap().iter().sum();
        let full: f64 = rates_from_gains(&g, &vec![1.0; n], noise).unwrap().iter().sum();
        prop_assert!(sr >= full - 1e-9);
    }

    #[test]
    fn batch_mean_is_linear(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..30), s in -3.0f64..3.0) {
        let samples: Vec<GapSample> = rows.iter().cloned().map(GapSample).collect();
        let scaled: Vec<GapSample> = rows.iter().map(|r| GapSample(r.iter().map(|x| s * x).collect())).collect();
        let a = batch_mean_gap(&samples).unwrap().0;
        let b = batch_mean_gap(&scaled).unwrap().0;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((s * x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn residual_vanishes_iff_complementarity_holds(
        pts in prop::collection::vec((prop_oneof![Just(0.0), 0.1f64..5.0], -2.0f64..2.0), 1..10)
    ) {
        let (l, f): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let certificate = l.iter().zip(&f).all(|(&li, &fi)| if li > 0.0 { fi == 0.0 } else { fi <= 0.0 });
        prop_assert_eq!(residual_sq(&l, &f) == 0.0, certificate);
        prop_assert!(residual_sq(&l, &f) >= 0.0);
    }

    #[test]
    fn violation_is_a_percentage_and_zero_when_demands_are_met(
        u in prop::collection::vec(0.0f64..3.0, 1..10), extra in 0.0f64..1.0
    ) {
        let met: Vec<f64> = u.iter().map(|x| x + extra).collect();
        prop_assert_eq!(violation(&u, &met), 0.0);
        let zero = vec![0.0; u.len()];
        let v = violation(&u, &zero);
        prop_assert!((0.0..=100.0).contains(&v));
    }

    #[test]
    fn solver_state_stays_feasible(
        slope in prop::collection::vec(-1.0f64..2.0, 1..6), seed in any::<u64>(), gamma in 0.05f64..3.0
    ) {
        let n = slope.len();
        let mut oracle = LinearOracle::new(slope, 0.5).unwrap();
        oracle.set_demands(&DemandSpec::rates(&vec![1.0; n]).unwrap()).unwrap();
        let schedule = Schedule { gamma, alpha: AlphaSchedule::Fixed(0.9), batch: BatchSchedule::Fixed(4) };
        let mut state = AlcorState::new(n);
        for _ in 0..30 {
            alcor_step(&mut state, &mut oracle, &schedule, seed, 0, 30).unwrap();
            prop_assert!(state.lambda.iter().all(|&l| l >= 0.0));
            prop_assert_eq!(&state.kappa, &kappa_from_lambda(&state.lambda).unwrap());
            prop_assert!(state.check().is_ok());
        }
    }

    #[test]
    fn packets_are_conserved(
        nu in prop::collection::vec(10.0f64..500.0, 1..5),
        rates in prop::collection::vec(0.0f64..4.0, 50),
        seed in any::<u64>()
    ) {
        let n = nu.len();
        let spec = TrafficSpec {
            packet_bits: 4000.0,
            bandwidth_hz: 1e6,
            n_subchannels: 5,
            dt: 0.01,
            assignment: Assignment::Random,
            users: nu.iter().map(|&nu| UserTraffic { nu, sensitivity: Sensitivity::DelayTolerant }).collect(),
        };
        let mut state = QueueState::new(n);
        let mut rng = substream(seed, &[]);
        let (mut arrived, mut served) = (vec![0u64; n], vec![0u64; n]);
        for (t, &r) in rates.iter().enumerate() {
            let flow = step_traffic(&mut state, &vec![r; n], &spec, &mut rng).unwrap();
            for i in 0..n {
                arrived[i] += flow.arrivals[i];
                served[i] += flow.departures[i];
            }
            if t % 5 == 4 {
                update_growth_counters(&mut state);
            }
        }
        for i in 0..n {
            prop_assert_eq!(arrived[i], served[i] + state.q[i]);
        }
    }
}
