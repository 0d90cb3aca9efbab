use std::time::Instant;

use osse_core::case::{build_synthetic_reach, CaseSpec, DomainCase};
use osse_core::control::*;
use osse_core::swe::{HydroState, Hydrograph, RatingCurve, H_DRY};
use proptest::prelude::*;

fn small_case() -> DomainCase {
    build_synthetic_reach(&CaseSpec { nx: 60, ny: 24, ..CaseSpec::default() }).unwrap()
}

fn forcing(case: &DomainCase) -> Forcing {
    let rc = RatingCurve::new(30.0 * 100.0 * 5e-4f64.sqrt(), case.zb[case.outlet_stage_cell()], 5.0 / 3.0).unwrap();
    Forcing {
        baseline: Hydrograph::new(vec![(0.0, 150.0), (3600.0, 400.0), (7200.0, 200.0), (86400.0, 180.0)]).unwrap(),
        outlet: rc,
        dt_max: 30.0,
    }
}

fn wet_start(case: &DomainCase) -> HydroState {
    let mut s = HydroState::dry(case.grid.len(), 0.0);
    for k in 0..s.h.len() {
        if case.is_channel(k) {
            s.h[k] = 2.0;
        }
    }
    s
}

#[test]
fn prior_sample_statistics() {
    let spec = PerturbationSpec::with_defaults(3, 4, 42, true);
    let n = 10_000;
    let ks: Vec<f64> = (0..n).map(|i| spec.draw_raw(i).ks[0]).collect();
    let mean = ks.iter().sum::<f64>() / n as f64;
    let std = (ks.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    assert!((mean - 30.0).abs() < 0.1, "mean {mean}");
    assert!((std - 3.0).abs() < 0.1, "std {std}");
}

#[test]
fn identity_control_keeps_baseline() {
    let case = small_case();
    let f = forcing(&case);
    let cv = ControlVector::new(vec![30.0; 3], 1.0, vec![0.0; 4]);
    let start = wet_start(&case);
    let (inputs, state) = apply_control(&cv, &case, &f, &start).unwrap();
    assert_eq!(inputs.ks, cv.ks);
    assert_eq!(inputs.inflow.as_ref().unwrap(), &f.baseline);
    assert_eq!(state, start);
}

#[test]
fn large_negative_dh_dries_subdomain() {
    let case = small_case();
    let f = forcing(&case);
    let mut start = wet_start(&case);
    for k in 0..start.h.len() {
        if case.subdomain[k] == 2 {
            start.h[k] = 0.25 + 0.75 * (k % 7) as f64 / 6.0;
            start.qx[k] = 0.1;
        }
    }
    let cv = ControlVector::new(vec![30.0; 3], 1.0, vec![0.0, -5.0, 0.0, 0.0]);
    let (_, s) = apply_control(&cv, &case, &f, &start).unwrap();
    for k in 0..s.h.len() {
        assert!(s.h[k] >= 0.0);
        if case.subdomain[k] == 2 {
            assert_eq!(s.h[k], 0.0);
            assert_eq!(s.qx[k], 0.0);
        } else {
            assert_eq!(s.h[k], start.h[k]);
        }
    }
}

#[test]
fn inflow_multiplier_scales_volume() {
    let case = small_case();
    let f = forcing(&case);
    let cv = ControlVector::new(vec![30.0; 3], 1.2, vec![0.0; 4]);
    let (inputs, _) = apply_control(&cv, &case, &f, &wet_start(&case)).unwrap();
    // trapezoid areas of the baseline by hand
    let base = 0.5 * (150.0 + 400.0) * 3600.0 + 0.5 * (400.0 + 200.0) * 3600.0 + 0.5 * (200.0 + 180.0) * 79200.0;
    let v = inputs.inflow.unwrap().volume(0.0, 86400.0);
    assert!((v / base - 1.2).abs() < 1e-12, "{}", v / base);
}

#[test]
fn identical_members_give_identical_output() {
    let case = small_case();
    let f = forcing(&case);
    let spec = PerturbationSpec::with_defaults(3, 4, 1, false);
    let mut ens = sample_prior(&spec, 2, &wet_start(&case)).unwrap();
    ens.members[1] = ens.members[0].clone();
    let runs = propagate(&ens, &case, &f, 1800.0, &[900.0, 1800.0], |_, s| s.h.clone()).unwrap();
    assert_eq!(runs[0].records, runs[1].records);
    assert_eq!(runs[0].restart, runs[1].restart);
}

#[test]
fn permuted_members_permute_output() {
    let case = small_case();
    let f = forcing(&case);
    let spec = PerturbationSpec::with_defaults(3, 4, 2, true);
    let ens = sample_prior(&spec, 3, &wet_start(&case)).unwrap();
    let mut rev = ens.clone();
    rev.members.reverse();
    rev.states.reverse();
    let a = propagate(&ens, &case, &f, 1200.0, &[1200.0], |_, s| s.h.clone()).unwrap();
    let b = propagate(&rev, &case, &f, 1200.0, &[1200.0], |_, s| s.h.clone()).unwrap();
    for i in 0..3 {
        assert_eq!(a[i].records, b[2 - i].records);
    }
}

#[test]
fn twenty_members_over_six_hours() {
    let case = build_synthetic_reach(&CaseSpec::default()).unwrap();
    let f = forcing(&case);
    let spec = PerturbationSpec::with_defaults(3, 4, 3, true);
    let ens = sample_prior(&spec, 20, &wet_start(&case)).unwrap();
    let t = Instant::now();
    let runs = propagate(&ens, &case, &f, 6.0 * 3600.0, &[], |_, _| ()).unwrap();
    println!(
        "20 members x 6 h: {:.1} s on {} thread(s)",
        t.elapsed().as_secs_f64(),
        rayon::current_num_threads()
    );
    assert_eq!(runs.len(), 20);
    assert!(runs.iter().all(|r| r.restart.t == 6.0 * 3600.0));
}

proptest! {
    #[test]
    fn flatten_bijection(ks in prop::collection::vec(5.0f64..60.0, 1..5), q in 0.2f64..3.0, dh in prop::collection::vec(-2.0f64..2.0, 1..6)) {
        let cv = ControlVector::new(ks.clone(), q, dh.clone());
        let back = ControlVector::unflatten(&cv.flatten(), ks.len(), dh.len()).unwrap();
        prop_assert_eq!(back, cv);
    }

    #[test]
    fn prior_respects_bounds(seed in any::<u64>(), std in 0.1f64..40.0) {
        let mut spec = PerturbationSpec::with_defaults(3, 4, seed, true);
        spec.std = ControlVector::new(vec![std; 3], std, vec![std; 4]);
        let ens = sample_prior(&spec, 8, &HydroState::dry(4, 0.0)).unwrap();
        prop_assert!(ens.members.iter().all(|m| m.within_bounds()));
    }

    #[test]
    fn dh_never_touches_riverbed(dh in prop::collection::vec(-3.0f64..3.0, 4), depth in 0.0f64..2.0) {
        let case = small_case();
        let f = forcing(&case);
        let mut start = wet_start(&case);
        for k in 0..start.h.len() {
            if !case.is_channel(k) {
                start.h[k] = if k % 3 == 0 { 0.0 } else { depth };
            }
        }
        let cv = ControlVector::new(vec![30.0; 3], 1.0, dh);
        let (_, s) = apply_control(&cv, &case, &f, &start).unwrap();
        for k in 0..s.h.len() {
            prop_assert!(s.h[k] >= 0.0);
            if case.is_channel(k) || start.h[k] < H_DRY {
                prop_assert_eq!(s.h[k], start.h[k]);
            }
        }
    }
}
