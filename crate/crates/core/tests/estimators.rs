mod common;

use ivate::estimators::{crude, tsls, ResultRow, RESULTS_HEADER};
use ivate::simulate::{generate_with, stream_rng, DgpParams, Scenario};
use ivate::{ErrorKind, Estimator, EstimatorConfig, Fitter, ObservedSample};

use common::{enumerated, enumerated_truth, Stratum, STRATA};

const TOL: f64 = 1e-8;

fn treated_share(st: &Stratum) -> f64 {
    st.pz * st.pd[1] + (1.0 - st.pz) * st.pd[0]
}

#[test]
fn late_and_ett_match_the_enumerated_law() {
    let ds = enumerated(&STRATA);
    let cfg = EstimatorConfig::uniform(vec![0, 1]);
    let le = Fitter::new(&ds, &cfg).late_ett().unwrap();

    let num: f64 = STRATA.iter().map(|s| s.mass * (s.py[1] - s.py[0])).sum();
    let den: f64 = STRATA.iter().map(|s| s.mass * (s.pd[1] - s.pd[0])).sum();
    assert!((le.late - num / den).abs() < TOL, "{} vs {}", le.late, num / den);

    let treated: f64 = STRATA.iter().map(|s| s.mass * treated_share(s)).sum();
    let ett: f64 = STRATA
        .iter()
        .map(|s| s.mass * treated_share(s) * s.wald())
        .sum::<f64>()
        / treated;
    assert!((le.ett - ett).abs() < TOL, "{} vs {ett}", le.ett);
}

#[test]
fn crude_is_the_treated_minus_untreated_mean() {
    let ds = enumerated(&STRATA);
    let (mut y1, mut n1, mut y0, mut n0) = (0.0, 0.0, 0.0, 0.0);
    for s in &STRATA {
        for z in 0..2 {
            let fz = if z == 1 { s.pz } else { 1.0 - s.pz };
            let m = s.mass * fz;
            n1 += m * s.pd[z];
            y1 += m * s.pd[z] * s.py[z];
            n0 += m * (1.0 - s.pd[z]);
            y0 += m * (1.0 - s.pd[z]) * s.py[z];
        }
    }
    let r = crude(&ds, false).unwrap();
    assert!((r.delta_hat - (y1 / n1 - y0 / n0)).abs() < 1e-12);
}

#[test]
fn crude_sandwich_is_the_two_sample_binomial_se() {
    // 30 treated with 12 events, 50 untreated with 10 events
    let mut rows = Vec::new();
    for i in 0..80 {
        let d = (i < 30) as u8;
        let y = if d == 1 { (i < 12) as u8 } else { (i < 40) as u8 };
        rows.push(ObservedSample {
            z: (i % 2) as u8,
            d,
            y: y as f64,
            x: vec![1.0],
            w: 1.0,
        });
    }
    let ds = ivate::Dataset::from_samples(rows, vec![], true).unwrap();
    let r = crude(&ds, true).unwrap();
    let (p1, p0): (f64, f64) = (12.0 / 30.0, 10.0 / 50.0);
    let se = (p1 * (1.0 - p1) / 30.0 + p0 * (1.0 - p0) / 50.0).sqrt();
    assert!((r.delta_hat - (p1 - p0)).abs() < 1e-12);
    assert!((r.se.unwrap() - se).abs() < 1e-8, "{:?} vs {se}", r.se);
}

#[test]
fn continuous_outcome_scales_the_effect() {
    let binary = enumerated(&STRATA);
    let y: Vec<f64> = binary.y().iter().map(|v| 3.0 * v - 1.0).collect();
    let ds = binary.with_outcome(y, false).unwrap();
    let truth = 3.0 * enumerated_truth(&STRATA);
    let cfg = EstimatorConfig::uniform(vec![0, 1]);
    let fitter = Fitter::new(&ds, &cfg);
    for est in [Estimator::Ipw, Estimator::G, Estimator::Mr] {
        let r = fitter.estimate(est).unwrap();
        assert!((r.delta_hat - truth).abs() < TOL, "{est}: {} vs {truth}", r.delta_hat);
        assert_eq!(r.in_bounds, None);
    }
    let err = fitter.estimate(Estimator::BReg).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Usage);
    assert!(err.to_string().starts_with("b-reg"));
}

#[test]
fn two_stage_least_squares_without_instrument_effect_fails() {
    let mut rows = Vec::new();
    for k in 0..8u8 {
        rows.push(ObservedSample {
            z: k & 1,
            d: (k >> 1) & 1,
            y: ((k >> 2) & 1) as f64,
            x: vec![1.0],
            w: 1.0,
        });
    }
    let ds = ivate::Dataset::from_samples(rows, vec![], true).unwrap();
    let err = tsls(&ds, None, false).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Numerical);
}

/// An all-correct draw whose mr estimating equations have no exact root.
fn hard_sample() -> ivate::Dataset {
    generate_with(&DgpParams::default(), 500, &mut stream_rng(1, 9)).unwrap().0
}

#[test]
fn strict_fit_reports_non_convergence() {
    let ds = hard_sample();
    let cfg = Scenario::ALL_CORRECT.estimator_config();
    let strict = EstimatorConfig {
        accept_nonconverged: false,
        ..cfg.clone()
    };
    let err = Fitter::new(&ds, &strict).estimate(Estimator::Mr).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Numerical);
    assert!(err.to_string().starts_with("mr: "));

    let lenient = cfg.with_sandwich(true);
    let r = Fitter::new(&ds, &lenient).estimate(Estimator::Mr).unwrap();
    assert!(!r.converged);
    assert!(r.delta_hat.is_finite());
    assert!(r.warnings.iter().any(|w| w.contains("best iterate")));
    assert!(r.se.is_none());
    assert!(r.warnings.iter().any(|w| w.contains("sandwich variance omitted")));
}

#[test]
fn bounded_estimators_stay_in_the_unit_interval() {
    for (_, sc) in Scenario::NAMED {
        let cfg = sc.estimator_config();
        for r in 0..8 {
            let (ds, _) = generate_with(&DgpParams::default(), 300, &mut stream_rng(21, r)).unwrap();
            let fitter = Fitter::new(&ds, &cfg);
            for est in Estimator::IV.into_iter().filter(|e| e.bounded()) {
                if let Ok(rep) = fitter.estimate(est) {
                    assert!(rep.delta_hat.abs() <= 1.0, "{sc} {est}: {}", rep.delta_hat);
                    assert_eq!(rep.in_bounds, Some(true));
                }
            }
        }
    }
}

#[test]
fn registry_round_trips() {
    for e in Estimator::ALL {
        assert_eq!(Estimator::parse(e.tag()).unwrap(), e);
    }
    assert_eq!(Estimator::parse("b_mr").unwrap_err().kind(), ErrorKind::Usage);
}

#[test]
fn result_rows_serialize_exactly() {
    let row = ResultRow {
        label: "b-mr".into(),
        estimate: 0.1 + 0.2,
        se: None,
        ci: Some((-0.25, 0.5)),
        in_bounds: Some(true),
        converged: false,
    };
    assert_eq!(RESULTS_HEADER.split(',').count(), row.csv_line().split(',').count());
    assert_eq!(row.csv_line(), "b-mr,0.30000000000000004,NA,-0.25,0.5,true,false");
}
