use proptest::prelude::*;

use ra_sim_core::coop::backhaul::{decode, encode};
use ra_sim_core::coop::dequant::truncated_normal_mean;
use ra_sim_core::coop::{correlation_coefficient, majority_vote, Quantizer};
use ra_sim_core::frame::{demodulate, modulate};
use ra_sim_core::linalg::{pinv_solve, CMat, C64};
use ra_sim_core::metrics::{aep, ber};
use ra_sim_core::oamp::scalar_posterior;
use ra_sim_core::scene::steering_from_frequencies;
use ra_sim_core::FrameConfig;

fn c64() -> impl Strategy<Value = C64> {
    (-5.0f64..5.0, -5.0f64..5.0).prop_map(|(re, im)| C64::new(re, im))
}

fn cmat(rows: usize, cols: usize) -> impl Strategy<Value = CMat> {
    proptest::collection::vec(c64(), rows * cols).prop_map(move |v| CMat::from_vec(rows, cols, v))
}

proptest! {
    #[test]
    fn quantizer_bin_contains_its_input(bits in 1u32..=8, scale in 0.01f64..10.0, x in -100.0f64..100.0) {
        let q = Quantizer::new(bits, scale).unwrap();
        let idx = q.index(x);
        prop_assert!(idx < q.levels());
        let (lo, hi) = q.bounds(idx);
        prop_assert!(lo < x + 1e-9 * scale && x <= hi + 1e-9 * scale);
        let p = q.point(idx);
        prop_assert!(lo <= p && p <= hi);
    }

    #[test]
    fn backhaul_roundtrip_preserves_indices(bits in 1u32..=9, m in cmat(5, 3)) {
        let q = Quantizer::for_observation(bits, &m).unwrap();
        let bytes = encode(&q, &m);
        let d = decode(&bytes, bits, 5, 3).unwrap();
        prop_assert_eq!(d.quantizer, q);
        for n in 0..5 {
            for r in 0..3 {
                prop_assert_eq!(d.at(n, r), q.quantize(m[(n, r)]));
            }
        }
        prop_assert!(decode(&bytes[..bytes.len() - 1], bits, 5, 3).is_err());
    }

    #[test]
    fn truncated_mean_stays_in_its_interval(mu in -50.0f64..50.0, s in 0.01f64..10.0,
                                             a in -20.0f64..20.0, w in 0.001f64..10.0,
                                             open in 0usize..3) {
        let (lo, hi) = match open {
            0 => (a, a + w),
            1 => (f64::NEG_INFINITY, a),
            _ => (a, f64::INFINITY),
        };
        let m = truncated_normal_mean(mu, s, lo, hi);
        prop_assert!(m.is_finite());
        prop_assert!(lo - 1e-9 <= m && m <= hi + 1e-9, "{} not in ({}, {})", m, lo, hi);
    }

    #[test]
    fn posterior_is_a_valid_distribution(r in c64(), tau in 1e-6f64..10.0, rho in 0.0f64..=1.0,
                                          mu in c64(), gamma in 1e-6f64..10.0) {
        let p = scalar_posterior(r, tau, rho, mu, gamma);
        prop_assert!((0.0..=1.0).contains(&p.lambda));
        prop_assert!(p.var >= 0.0 && p.b >= 0.0);
        prop_assert!(p.mean.re.is_finite() && p.mean.im.is_finite());
    }

    #[test]
    fn error_rates_are_fractions(truth in proptest::collection::vec(any::<bool>(), 1..40),
                                  flips in proptest::collection::vec(any::<bool>(), 40)) {
        let est: Vec<bool> = truth.iter().zip(&flips).map(|(t, f)| t ^ f).collect();
        let a = aep(&est, &truth);
        prop_assert!((0.0..=1.0).contains(&a));
        let active: Vec<usize> = (0..truth.len()).filter(|&k| truth[k]).collect();
        let sent: Vec<Vec<u8>> = truth.iter().map(|&t| if t { vec![1, 0, 1] } else { vec![] }).collect();
        let decoded: Vec<(usize, &[u8])> = (0..truth.len()).filter(|&k| est[k]).map(|k| (k, &[1u8, 1, 1][..])).collect();
        match ber(&sent, &active, &decoded) {
            Some(b) => prop_assert!((0.0..=1.0).contains(&b)),
            None => prop_assert!(active.is_empty()),
        }
    }

    #[test]
    fn unanimous_votes_are_kept(v in proptest::collection::vec(any::<bool>(), 1..30), q in 1usize..6) {
        prop_assert_eq!(majority_vote(&vec![v.clone(); q]).unwrap(), v);
    }

    #[test]
    fn correlation_is_bounded(b in proptest::collection::vec(c64(), 2..12), nr in 1usize..128, dt in -1.0f64..1.0) {
        let half = b.len() / 2;
        let c = correlation_coefficient(&b[..half], &b[half..2 * half], nr, dt);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn steering_vectors_have_unit_modulus(mx in -3.0f64..3.0, my in -3.0f64..3.0, nx in 1usize..6, ny in 1usize..6) {
        let a = steering_from_frequencies(mx, my, nx, ny);
        prop_assert_eq!(a.len(), nx * ny);
        for v in a.iter() {
            prop_assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_modulation_roundtrip(seed in any::<u64>(), used in 1usize..32, extra in 0usize..16) {
        let cfg = FrameConfig::new(8, used + extra, used, 2, 1);
        let bits: Vec<u8> = (0..cfg.bits_per_frame()).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
        let f = modulate(&bits, &cfg).unwrap();
        prop_assert_eq!(demodulate(&f.data_time, &cfg), bits);
    }

    #[test]
    fn pinv_solution_satisfies_normal_equations(a in cmat(9, 3), b in cmat(9, 2)) {
        let sol = pinv_solve(&a, &b, 1e-10);
        let resid = a.adjoint() * (&a * &sol.x - &b);
        let scale = a.norm() * a.norm() * (sol.x.norm() + 1.0) + a.norm() * b.norm();
        prop_assert!(resid.norm() <= 1e-9 * scale);
    }
}
