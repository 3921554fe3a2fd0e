//! Percentile bootstrap.
//!
//! Replicate `r` draws its rows from a ChaCha20 stream keyed by `(seed, r)`,
//! so results do not depend on thread count or scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{EstimateReport, Estimator, EstimatorConfig, Fitter};

/// Largest tolerated fraction of failed replicates under drop-and-report.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailurePolicy {
    DropAndReport,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub ci_level: f64,
    pub failure_policy: FailurePolicy,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> BootstrapConfig {
        BootstrapConfig {
            replicates,
            seed,
            ci_level: 0.95,
            failure_policy: FailurePolicy::DropAndReport,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("bootstrap needs at least one replicate".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config(format!(
                "confidence level {} not in (0, 1)",
                self.ci_level
            )));
        }
        Ok(())
    }
}

/// Replicate estimates of one statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub ci: (f64, f64),
    /// Successful replicate values in replicate order.
    pub values: Vec<f64>,
    pub failed: usize,
}

/// Type-7 (linear interpolation) sample quantile.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Config("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile level {q} not in [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, q))
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Row indices of bootstrap replicate `r`.
pub fn resample_rows(n: usize, seed: u64, r: usize) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

fn percentile_ci(values: &[f64], level: f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    (quantile_sorted(&v, a), quantile_sorted(&v, 1.0 - a))
}

fn summarize(outcomes: Vec<Result<f64>>, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    let total = outcomes.len();
    let mut values = Vec::with_capacity(total);
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok(v) if v.is_finite() => values.push(v),
            Ok(_) | Err(_) => {
                if cfg.failure_policy == FailurePolicy::Abort {
                    return Err(Error::UnstableBootstrap { failed: 1, total });
                }
                failed += 1;
            }
        }
    }
    if values.is_empty() || failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(Error::UnstableBootstrap { failed, total });
    }
    Ok(BootstrapResult {
        ci: percentile_ci(&values, cfg.ci_level),
        values,
        failed,
    })
}

/// Bootstraps an arbitrary statistic of the dataset.
pub fn bootstrap_statistic<F>(ds: &Dataset, stat: F, cfg: &BootstrapConfig) -> Result<BootstrapResult>
where
    F: Fn(&Dataset) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let outcomes: Vec<Result<f64>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let rows = resample_rows(ds.n(), cfg.seed, r);
            stat(&ds.resample(&rows)?)
        })
        .collect();
    summarize(outcomes, cfg)
}

/// Bootstraps several estimators at once; each replicate's resample is
/// shared by all of them.
pub fn bootstrap_estimators(
    ds: &Dataset,
    est_cfg: &EstimatorConfig,
    estimators: &[Estimator],
    cfg: &BootstrapConfig,
) -> Result<Vec<Result<BootstrapResult>>> {
    cfg.validate()?;
    let quiet = EstimatorConfig {
        sandwich: false,
        ..est_cfg.clone()
    };
    let per_rep: Vec<Vec<Result<f64>>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let rows = resample_rows(ds.n(), cfg.seed, r);
            match ds.resample(&rows) {
                Ok(rep) => {
                    let fitter = Fitter::new(&rep, &quiet);
                    estimators
                        .iter()
                        .map(|&e| fitter.estimate(e).map(|rep| rep.delta_hat))
                        .collect()
                }
                Err(e) => estimators.iter().map(|_| Err(e.clone())).collect(),
            }
        })
        .collect();
    Ok((0..estimators.len())
        .map(|k| {
            let col = per_rep.iter().map(|v| v[k].clone()).collect();
            summarize(col, cfg)
        })
        .collect())
}

/// Fits `est` on the full data and attaches a percentile bootstrap interval.
pub fn bootstrap_ci(
    ds: &Dataset,
    est: Estimator,
    est_cfg: &EstimatorConfig,
    cfg: &BootstrapConfig,
) -> Result<EstimateReport> {
    let mut report = Fitter::new(ds, est_cfg).estimate(est)?;
    let mut results = bootstrap_estimators(ds, est_cfg, &[est], cfg)?;
    let boot = results.remove(0).map_err(|e| e.in_estimator(est.tag()))?;
    report.ci = Some(boot.ci);
    if boot.failed > 0 {
        report.warnings.push(format!(
            "{} of {} bootstrap replicates failed and were dropped",
            boot.failed, cfg.replicates
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ObservedSample;

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 1.0).unwrap(), 3.0);
        assert_eq!(quantile(&[0.0, 10.0], 0.25).unwrap(), 2.5);
        assert!(quantile(&[], 0.5).is_err());
    }

    fn toy(ys: &[f64]) -> Dataset {
        let samples = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| ObservedSample {
                z: (i % 2) as u8,
                d: ((i / 2) % 2) as u8,
                y,
                x: vec![1.0],
                w: 1.0,
            })
            .collect();
        Dataset::from_samples(samples, vec![], false).unwrap()
    }

    fn mean_y(ds: &Dataset) -> Result<f64> {
        Ok(ds.weighted_mean(|u| u.y))
    }

    #[test]
    fn degenerate_ci_is_a_point() {
        let ds = toy(&[3.0; 12]);
        let b = bootstrap_statistic(&ds, mean_y, &BootstrapConfig::new(50, 1)).unwrap();
        assert_eq!(b.ci, (3.0, 3.0));
    }

    #[test]
    fn same_seed_same_interval() {
        let ds = toy(&[1.0, 5.0, 2.0, 8.0, 3.0, 0.0, 4.0, 9.0]);
        let a = bootstrap_statistic(&ds, mean_y, &BootstrapConfig::new(200, 9)).unwrap();
        let b = bootstrap_statistic(&ds, mean_y, &BootstrapConfig::new(200, 9)).unwrap();
        assert_eq!(a.ci.0.to_bits(), b.ci.0.to_bits());
        assert_eq!(a.ci.1.to_bits(), b.ci.1.to_bits());
        let c = bootstrap_statistic(&ds, mean_y, &BootstrapConfig::new(200, 10)).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn higher_level_is_wider() {
        let ds = toy(&[1.0, 5.0, 2.0, 8.0, 3.0, 0.0, 4.0, 9.0]);
        let mut cfg = BootstrapConfig::new(300, 4);
        cfg.ci_level = 0.8;
        let narrow = bootstrap_statistic(&ds, mean_y, &cfg).unwrap();
        cfg.ci_level = 0.99;
        let wide = bootstrap_statistic(&ds, mean_y, &cfg).unwrap();
        assert!(wide.ci.0 <= narrow.ci.0 && wide.ci.1 >= narrow.ci.1);
    }

    #[test]
    fn replicates_keep_size_and_weight_convention() {
        let rows = resample_rows(37, 5, 3);
        assert_eq!(rows.len(), 37);
        assert!(rows.iter().all(|&r| r < 37));
        let ds = toy(&[1.0; 37]);
        let rep = ds.resample(&rows).unwrap();
        assert_eq!(rep.n(), 37);
        let mean_w: f64 = rep.weights().iter().sum::<f64>() / 37.0;
        assert!((mean_w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_many_failures_is_an_error() {
        let ds = toy(&[1.0, 2.0, 3.0, 4.0]);
        let r = bootstrap_statistic(
            &ds,
            |_| Err(Error::Config("always".into())),
            &BootstrapConfig::new(10, 1),
        );
        assert!(matches!(r, Err(Error::UnstableBootstrap { failed: 10, total: 10 })));
    }

    #[test]
    fn abort_policy_stops_on_first_failure() {
        let ds = toy(&[1.0, 2.0, 3.0, 4.0]);
        let mut cfg = BootstrapConfig::new(10, 1);
        cfg.failure_policy = FailurePolicy::Abort;
        let r = bootstrap_statistic(
            &ds,
            |d| if d.y()[0] > 2.0 { Err(Error::Config("x".into())) } else { Ok(1.0) },
            &cfg,
        );
        assert!(matches!(r, Err(Error::UnstableBootstrap { .. })));
    }

    #[test]
    fn invalid_config_rejected() {
        let ds = toy(&[1.0, 2.0]);
        let mut cfg = BootstrapConfig::new(0, 1);
        assert!(bootstrap_statistic(&ds, mean_y, &cfg).is_err());
        cfg.replicates = 5;
        cfg.ci_level = 1.0;
        assert!(bootstrap_statistic(&ds, mean_y, &cfg).is_err());
    }
}
