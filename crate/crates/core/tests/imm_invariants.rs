use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use immrm::imm::{
    kf_measurement_update, time_update, FilterConfig, GiwEstimate, ImmFilter, ModeBank, Variant,
};
use immrm::linalg::{is_spd, is_symmetric};
use immrm::model::{build_ct_scenario, simulate_truth, true_measurement_cov, TruthConfig};
use immrm::GaussianEstimate;

fn start(truth: &TruthConfig) -> GaussianEstimate {
    GaussianEstimate::new(
        truth.x0.clone(),
        DMatrix::from_diagonal(&DVector::from_vec(vec![100.0, 10.0, 100.0, 10.0])),
    )
    .unwrap()
}

fn filter_for(truth: &TruthConfig, variant: Variant) -> ImmFilter {
    let model = build_ct_scenario(truth).unwrap();
    let mut cfg = FilterConfig::new(variant);
    if variant == Variant::KnownR {
        cfg.known_r = Some(true_measurement_cov(truth.r));
    }
    let bank = ModeBank::uniform(
        cfg.initial_estimate(start(truth)).unwrap(),
        model.num_modes(),
    )
    .unwrap();
    ImmFilter::new(model, cfg, bank).unwrap()
}

fn assert_simplex(p: &[f64]) {
    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn long_run_stays_healthy() {
    let truth = TruthConfig {
        horizon: 1000,
        ..TruthConfig::default()
    };
    let model = build_ct_scenario(&truth).unwrap();
    let traj = simulate_truth(&model, &truth, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();

    for variant in Variant::ALL {
        let mut filter = filter_for(&truth, variant);
        for (k, z) in traj.measurements.iter().enumerate() {
            let out = filter
                .step(z)
                .unwrap_or_else(|e| panic!("{variant} step {k}: {e}"));
            assert_simplex(&out.mode_probs);
            assert!(is_spd(&out.fused_state.cov), "{variant} step {k}");
            assert!(is_spd(&out.fused_r), "{variant} step {k}");
            assert!(out.fused_state.mean.iter().all(|v| v.is_finite()));
            for e in &out.per_mode.estimates {
                assert!(is_symmetric(&e.gaussian.cov));
                assert!(is_spd(&e.gaussian.cov), "{variant} step {k}");
                if let Some(iw) = &e.iw {
                    assert!(is_spd(iw.scale()));
                }
            }
        }
    }
}

#[test]
fn degrees_grow_by_one_per_update() {
    let truth = TruthConfig::default();
    let model = build_ct_scenario(&truth).unwrap();
    let traj = simulate_truth(&model, &truth, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    for variant in [Variant::Kl, Variant::Mm] {
        let mut filter = filter_for(&truth, variant);
        let nu0 = filter.config.prior_degree;
        for (k, z) in traj.measurements.iter().enumerate() {
            let out = filter.step(z).unwrap();
            let degrees: Vec<f64> = out
                .per_mode
                .estimates
                .iter()
                .map(|e| e.iw.as_ref().unwrap().degree())
                .collect();
            for d in &degrees {
                assert_eq!(*d, nu0 + (k + 1) as f64);
            }
            let fused = out.fused_iw.unwrap().degree();
            let lo = degrees.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = degrees.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo - 1e-12 <= fused && fused <= hi + 1e-12);
        }
    }
}

#[test]
fn identical_known_r_modes_reduce_to_one_kalman_filter() {
    let truth = TruthConfig {
        turn_rates: vec![0.05; 3],
        ..TruthConfig::default()
    };
    let model = build_ct_scenario(&truth).unwrap();
    let traj = simulate_truth(&model, &truth, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let r = true_measurement_cov(truth.r);
    let mut imm = filter_for(&truth, Variant::KnownR);
    let mut kf = start(&truth);
    for z in &traj.measurements {
        let out = imm.step(z).unwrap();
        let pred = time_update(
            &GiwEstimate {
                gaussian: kf.clone(),
                iw: None,
            },
            &model.modes[0],
            1.0,
        )
        .unwrap();
        kf = kf_measurement_update(&pred.gaussian, z, &model.measurement, &r)
            .unwrap()
            .estimate;
        assert!((out.fused_state.mean - &kf.mean).amax() < 1e-10);
        assert!((out.fused_state.cov - &kf.cov).amax() < 1e-10);
    }
}

#[test]
fn equalized_degrees_make_kl_and_mm_coincide() {
    let truth = TruthConfig::default();
    let model = build_ct_scenario(&truth).unwrap();
    let traj = simulate_truth(&model, &truth, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
    let run = |variant: Variant| {
        let mut f = filter_for(&truth, variant);
        f.config.equalize_degrees = true;
        traj.measurements
            .iter()
            .map(|z| f.step(z).unwrap().fused_r)
            .collect::<Vec<_>>()
    };
    let (kl, mm) = (run(Variant::Kl), run(Variant::Mm));
    assert_eq!(kl.len(), 100);
    for (a, b) in kl.iter().zip(&mm) {
        assert!((a - b).amax() <= 1e-10);
    }
}
