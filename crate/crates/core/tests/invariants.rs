use std::f64::consts::PI;

use proptest::prelude::*;
use sqamp::fit::{contrast_and_noise, extract_populations, fit_state_model};
use sqamp::gaussian::{apply_displacement, apply_squeeze, coherent_amplitudes};
use sqamp::open_system::lindblad_evolve;
use sqamp::{
    amplify_displacement, bsb_signal, displaced_squeezed_populations, number_operator,
    psrsb_exact_pdown, CMatrix, CVector, DensityOperator, Displacement, EvolveOptions,
    ExperimentConfig, FitInit, FockSpace, MotionalState, NoiseParams, RabiTrace, SqueezeParam,
    StateModel, C64,
};

fn cplx(abs: f64, arg: f64) -> C64 {
    C64::from_polar(abs, arg)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn squeeze_then_unsqueeze_is_identity(r in 0.0..1.5f64, theta in -PI..PI, a in 0.0..1.0f64, ph in -PI..PI) {
        let v = CVector::from_vec(coherent_amplitudes(cplx(a, ph), 128));
        let xi = SqueezeParam::new(r, theta);
        let back = apply_squeeze(xi.inverse(), &apply_squeeze(xi, &v));
        prop_assert!((&back - &v).norm() < 1e-9);
    }

    #[test]
    fn displacement_preserves_norm(a in 0.0..2.0f64, ph in -PI..PI) {
        let v = CVector::from_vec(coherent_amplitudes(cplx(0.5, 0.3), 128));
        let out = apply_displacement(Displacement::new(cplx(a, ph)), &v);
        prop_assert!((out.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gain_is_linear_in_alpha(a in 0.0..1.0f64, ph in -PI..PI, k in 0.1..5.0f64, r in 0.0..2.5f64, theta in -PI..PI) {
        let xi = SqueezeParam::new(r, theta);
        let lhs = amplify_displacement(cplx(a, ph) * k, xi);
        let rhs = amplify_displacement(cplx(a, ph), xi) * k;
        prop_assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
        prop_assert!((amplify_displacement(cplx(a, ph), SqueezeParam::new(0.0, theta)) - cplx(a, ph)).norm() < 1e-15);
    }

    #[test]
    fn populations_form_a_distribution(a in 0.0..2.0f64, ph in -PI..PI, r in 0.0..1.5f64, theta in -PI..PI) {
        let p = displaced_squeezed_populations(Displacement::new(cplx(a, ph)), SqueezeParam::new(r, theta), 256);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn psrsb_fringe_is_antisymmetric(a in 0.0..2.0f64, ph in -PI..PI, phi in -PI..PI) {
        let sp = FockSpace::new(64).unwrap();
        let p = psrsb_exact_pdown(cplx(a, ph), phi, sp).unwrap();
        let q = psrsb_exact_pdown(cplx(a, ph), phi + PI, sp).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p + q - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrast_noise_is_symmetric(p in 0.0..1.0f64, q in 0.0..1.0f64, shots in 1u32..1000) {
        let (c, s) = contrast_and_noise(p, q, shots);
        let (c2, s2) = contrast_and_noise(1.0 - q, 1.0 - p, shots);
        prop_assert!((c - c2).abs() < 1e-12);
        prop_assert!((s - s2).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn exact_mixtures_are_recovered(w in proptest::collection::vec(0.0..1.0f64, 5)) {
        let total: f64 = w.iter().sum::<f64>() + 0.1;
        let pops: Vec<f64> = w.iter().map(|x| x / total).collect();
        let omega = 2.0 * PI * 1.1e3;
        let times: Vec<f64> = (0..80).map(|k| k as f64 * 5e-6).collect();
        let y = bsb_signal(&pops, omega, 0.0, &times);
        let tr = RabiTrace::new(times, y, 300).unwrap();
        let fit = extract_populations(&tr, omega, 0.0, 4).unwrap();
        for (a, b) in fit.params.iter().zip(&pops) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn lindblad_preserves_trace_and_positivity(heat in 0.0..50.0f64, deph in 0.0..50.0f64, a in 0.0..1.5f64) {
        let sp = FockSpace::new(24).unwrap();
        let psi = MotionalState::from_amps(sp, CVector::from_vec(coherent_amplitudes(cplx(a, 0.4), 24))).unwrap();
        let rho = DensityOperator::from_motional(&psi);
        let h = number_operator(sp) * C64::new(1e3, 0.0);
        let out = lindblad_evolve(&rho, &h, NoiseParams::new(heat, deph).unwrap(), 2e-3, &EvolveOptions::default()).unwrap();
        prop_assert!((out.trace() - 1.0).abs() < 1e-8);
        prop_assert!(out.min_eigenvalue() > -1e-9);
        prop_assert!(out.hermiticity_error() < 1e-10);
    }

    #[test]
    fn fit_stderr_matches_covariance(alpha in 0.1..1.5f64) {
        let omega = 2.0 * PI * 1.1e3;
        let times: Vec<f64> = (0..60).map(|k| k as f64 * 5e-6).collect();
        let y = sqamp::fit::model_pdown(StateModel::Coherent, &[alpha, omega, 100.0], &times);
        let y: Vec<f64> = y.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        let tr = RabiTrace::new(times, y, 300).unwrap();
        let mut init = FitInit::new(omega, 100.0);
        init.set("alpha", alpha).unwrap();
        let fit = fit_state_model(&tr, StateModel::Coherent, &init).unwrap();
        let cov = fit.covariance_matrix();
        for (i, se) in fit.stderr.iter().enumerate() {
            prop_assert!((se - cov[(i, i)].sqrt()).abs() <= 1e-12 * se.max(1e-300));
        }
    }

    #[test]
    fn config_text_round_trips(g in 1.0..100.0f64, shots in 1u32..1000, seed in any::<u64>(), us in proptest::collection::vec(0.0..20.0f64, 1..5)) {
        let cfg = ExperimentConfig { g_khz: g, shots, seed: Some(seed), gain_us: us, ..ExperimentConfig::default() };
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn trace_csv_round_trips(p in proptest::collection::vec(0.0..1.0f64, 1..30), shots in 1u32..1000) {
        let times: Vec<f64> = (0..p.len()).map(|k| k as f64 * 2.5e-6).collect();
        let tr = RabiTrace::new(times, p, shots).unwrap();
        let back = RabiTrace::from_csv(tr.to_csv().as_bytes()).unwrap();
        prop_assert_eq!(back.shots_per_point, tr.shots_per_point);
        for (a, b) in back.pdown.iter().zip(&tr.pdown) {
            prop_assert_eq!(a, b);
        }
        for (a, b) in back.times.iter().zip(&tr.times) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }
}

#[test]
fn zero_hamiltonian_keeps_pure_state() {
    let sp = FockSpace::new(16).unwrap();
    let rho = DensityOperator::from_motional(&MotionalState::fock(sp, 3));
    let out = lindblad_evolve(&rho, &CMatrix::zeros(16, 16), NoiseParams::none(), 1e-3, &EvolveOptions::default()).unwrap();
    assert!(out.trace_distance(&rho).unwrap() < 1e-12);
}
