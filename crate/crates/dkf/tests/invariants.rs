mod common;

use dkf::banded::{band_project, collapse_offband, complete, lband_invert, BandProfile};
use dkf::config::{DynamicsConfig, ExperimentConfig, ModelConfig, SensorsConfig};
use dkf::dici::{
    dici_or_central, error_bound_trial, jor_inverse, jor_multiplier, random_lbanded_spd, random_spd, JorConfig,
};
use dkf::linalg::{jor_spectral_radius, spectral_norm};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn banded_inverse_round_trip(seed in any::<u64>(), n in 3usize..30, l in 1usize..6) {
        prop_assume!(l < n);
        let z = random_lbanded_spd(n, l, &mut common::rng(seed)).unwrap();
        let s = z.clone().try_inverse().unwrap();
        let back = lband_invert(&band_project(&s, l).unwrap()).unwrap().to_dense();
        prop_assert!(rel_frobenius(&back, &z) < 1e-9);
        let full = complete(&band_project(&s, l).unwrap(), usize::MAX).unwrap();
        prop_assert!(rel_frobenius(&full, &s) < 1e-9);
    }

    #[test]
    fn collapse_recovers_offband(seed in any::<u64>(), n in 4usize..20, l in 1usize..3) {
        prop_assume!(l + 1 < n);
        let z = random_lbanded_spd(n, l, &mut common::rng(seed)).unwrap();
        let s = z.try_inverse().unwrap();
        let band = band_project(&s, l).unwrap();
        let scale = s.amax();
        for i in 0..n {
            for j in (i + l + 1)..n {
                let v = collapse_offband(&band, i, j).unwrap();
                prop_assert!((v - s[(i, j)]).abs() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn band_csv_round_trip(seed in any::<u64>(), n in 1usize..15, l in 0usize..4) {
        prop_assume!(l < n);
        let s = random_spd(n, &mut common::rng(seed));
        let b = band_project(&s, l).unwrap();
        let back = BandProfile::from_csv(&b.to_csv()).unwrap();
        prop_assert_eq!(back, b);
    }

    #[test]
    fn jor_error_recursion(seed in any::<u64>(), n in 2usize..15) {
        let z = random_spd(n, &mut common::rng(seed));
        let exact = z.clone().try_inverse().unwrap();
        let p = jor_multiplier(&z, 0.1).unwrap();
        let r = jor_inverse(&z, &JorConfig::budget(0.1, 20), Some(&exact)).unwrap();
        let e0 = DMatrix::from_diagonal(&z.diagonal().map(|v| 1.0 / v)) - &exact;
        let mut e = e0;
        for (t, &err) in r.errors.iter().enumerate().skip(1) {
            e = &p * e;
            prop_assert!((spectral_norm(&e) - err).abs() <= 1e-9 * (1.0 + err), "t = {}", t);
        }
        prop_assert!(jor_spectral_radius(&z, 0.1) < 1.0);
    }

    // Small systems (n < 20, L = 2) do produce rare counterexamples, so the
    // property is only checked at moderate size.
    #[test]
    fn dici_no_worse_than_jor(seed in any::<u64>(), n in 40usize..=50, l in 3usize..=5) {
        let z = random_lbanded_spd(n, l, &mut common::rng(seed)).unwrap();
        let (diffs, _) = error_bound_trial(&z, l, 0.1, 15).unwrap();
        for d in diffs {
            prop_assert!(d >= -1e-10);
        }
    }

    #[test]
    fn dici_fixed_point_is_banded_inverse(seed in any::<u64>(), n in 4usize..12) {
        let z = random_lbanded_spd(n, 1, &mut common::rng(seed)).unwrap();
        let zb = band_project(&z, 1).unwrap();
        let cfg = JorConfig { gamma: 0.1, max_iter: 500_000, tol: 1e-13, window: 10 };
        let (s, _) = dici_or_central(&zb, &cfg, None).unwrap();
        let exact = band_project(&z.try_inverse().unwrap(), 1).unwrap();
        prop_assert!(s.max_abs_diff(&exact) < 1e-8 * (1.0 + exact.to_dense().amax()));
    }

    #[test]
    fn model_config_round_trip(n in 2usize..200, band in 0usize..10, count in 1usize..8, seed in any::<u64>(),
                               density in 0.0f64..1.0, q in 0.01f64..10.0) {
        let cfg = ModelConfig {
            s0_scale: 1.0 + q,
            reorder: seed % 2 == 0,
            dynamics: DynamicsConfig::Random { n, band, density, symmetric: seed % 3 == 0, q, seed },
            sensors: SensorsConfig::Span { count, span: n.min(3), r: q, seed: seed ^ 1 },
        };
        let text = cfg.to_toml();
        let back = ModelConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn experiment_config_round_trip(seed in any::<u64>(), trials in 1usize..1000, gamma in 0.001f64..0.5) {
        let cfg = ExperimentConfig { seed, trials, gamma, ..Default::default() };
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(back.to_toml(), text);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}
