//! Estimators of the average Wald estimand `Delta = E_X delta(X)`.
//!
//! A [`Fitter`] owns one dataset and one configuration and caches every
//! nuisance fit, so running several estimators on the same data fits the
//! propensity, likelihood and doubly robust nuisance equations once.

use std::cell::{OnceCell, RefCell};
use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;

use crate::data::{Dataset, Design};
use crate::error::{Error, Result};
use crate::linalg::solve_square;
use crate::mestimate::{
    mean_residual, sandwich_variance, solve, solve_or_best, EstimatingSystem, FnSystem,
};
use crate::nuisance::{
    bernoulli_unit_score, fit_outcome_2mle, fit_outcome_baseline, fit_propensity,
    fit_propensity_ensemble, fit_treatment_2mle, outcome_prob, BaselineFit, NuisanceFit,
    MleOptions, OutcomeFit, Propensity, TreatmentFit, TreatmentModel, ENSEMBLE_RIDGE, LOG_OP_CLAMP,
    PROB_CLAMP,
};
use crate::param::{baseline_prob, expit, Link};

/// Positivity screen: smaller propensities or `|delta_d|` draw a warning.
pub const POSITIVITY_WARN: f64 = 0.01;
/// `|delta_d(x; beta_dr)|` below this draws an instability warning for mr.
pub const MR_INSTABILITY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    BReg,
    Ipw,
    BIpw,
    G,
    Mr,
    BMr,
    Crude,
    Tsls,
}

impl Estimator {
    /// The six IV estimators, in reporting order.
    pub const IV: [Estimator; 6] = [
        Estimator::BReg,
        Estimator::Ipw,
        Estimator::BIpw,
        Estimator::G,
        Estimator::Mr,
        Estimator::BMr,
    ];

    pub const ALL: [Estimator; 8] = [
        Estimator::BReg,
        Estimator::Ipw,
        Estimator::BIpw,
        Estimator::G,
        Estimator::Mr,
        Estimator::BMr,
        Estimator::Crude,
        Estimator::Tsls,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Estimator::BReg => "b-reg",
            Estimator::Ipw => "ipw",
            Estimator::BIpw => "b-ipw",
            Estimator::G => "g",
            Estimator::Mr => "mr",
            Estimator::BMr => "b-mr",
            Estimator::Crude => "crude",
            Estimator::Tsls => "2sls",
        }
    }

    pub fn parse(s: &str) -> Result<Estimator> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator '{s}'")))
    }

    /// Guaranteed to lie in `[-1, 1]` for a binary outcome.
    pub fn bounded(self) -> bool {
        matches!(
            self,
            Estimator::BReg | Estimator::BIpw | Estimator::G | Estimator::BMr
        )
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PropensityColumns {
    Single(Vec<usize>),
    Ensemble(Vec<Vec<usize>>),
}

/// Column overrides for the index functions of the estimating equations.
/// `None` uses the design of the parameter being estimated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndexColumns {
    /// beta_ipw equation
    pub h1: Option<Vec<usize>>,
    /// b-ipw working-model equation
    pub h2: Option<Vec<usize>>,
    /// g-estimation equation
    pub h3: Option<Vec<usize>>,
    /// beta_dr equation
    pub h: Option<Vec<usize>>,
    /// alpha_dr equation; for b-mr the first column is replaced by `1/delta_d`
    pub g: Option<Vec<usize>>,
}

/// Which dataset columns (0 = intercept) enter each working model.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    /// `delta(X; alpha)`
    pub delta: Vec<usize>,
    /// `delta_d(X; beta)`
    pub delta_d: Vec<usize>,
    /// `OP^D(X; eta)`
    pub op_d: Vec<usize>,
    /// `OP^Y(X; zeta)`
    pub op_y: Vec<usize>,
    /// `p0_y(X; iota)` for a continuous outcome; defaults to `op_y`.
    pub baseline: Option<Vec<usize>>,
    pub propensity: PropensityColumns,
    /// b-ipw working model; defaults to `delta_d`.
    pub working: Option<Vec<usize>>,
    pub index: IndexColumns,
    pub delta_d_link: Link,
    /// Exogenous regressors of 2SLS; defaults to every column.
    pub tsls_covariates: Option<Vec<usize>>,
    /// Attach sandwich standard errors.
    pub sandwich: bool,
    /// Keep the best iterate of a likelihood or estimating equation that does
    /// not converge, reporting `converged = false`, instead of failing.
    pub accept_nonconverged: bool,
}

impl EstimatorConfig {
    /// Every model uses the same columns.
    pub fn uniform(cols: Vec<usize>) -> EstimatorConfig {
        EstimatorConfig {
            delta: cols.clone(),
            delta_d: cols.clone(),
            op_d: cols.clone(),
            op_y: cols.clone(),
            baseline: None,
            propensity: PropensityColumns::Single(cols),
            working: None,
            index: IndexColumns::default(),
            delta_d_link: Link::Tanh,
            tsls_covariates: None,
            sandwich: false,
            accept_nonconverged: false,
        }
    }

    /// Every model uses every column of `ds`.
    pub fn all_columns(ds: &Dataset) -> EstimatorConfig {
        EstimatorConfig::uniform((0..ds.p()).collect())
    }

    pub fn with_sandwich(mut self, on: bool) -> EstimatorConfig {
        self.sandwich = on;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub estimator: Estimator,
    pub delta_hat: f64,
    /// `|delta_hat| <= 1`; `None` for a continuous outcome.
    pub in_bounds: Option<bool>,
    pub converged: bool,
    pub nuisance_fits: Vec<NuisanceFit>,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// Per-unit estimated influence values (mr only).
    pub influence_values: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

pub const RESULTS_HEADER: &str = "estimator,delta_hat,se,ci_lo,ci_hi,in_bounds,converged";

/// One line of a results table. Also used for the plug-in LATE and ETT,
/// which are not [`Estimator`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub label: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub in_bounds: Option<bool>,
    pub converged: bool,
}

impl From<&EstimateReport> for ResultRow {
    fn from(r: &EstimateReport) -> ResultRow {
        ResultRow {
            label: r.estimator.tag().to_string(),
            estimate: r.delta_hat,
            se: r.se,
            ci: r.ci,
            in_bounds: r.in_bounds,
            converged: r.converged,
        }
    }
}

fn opt_cell<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl ResultRow {
    /// CSV line under [`RESULTS_HEADER`]; numbers use the shortest
    /// representation that reads back exactly.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.label,
            self.estimate,
            opt_cell(self.se),
            opt_cell(self.ci.map(|c| c.0)),
            opt_cell(self.ci.map(|c| c.1)),
            opt_cell(self.in_bounds),
            self.converged
        )
    }
}

pub fn write_results_csv<W: std::io::Write>(rows: &[ResultRow], mut w: W) -> Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Human-readable table: method, point estimate, interval.
pub fn results_table(rows: &[ResultRow], level: f64) -> String {
    let ci_head = format!("{}% CI", 100.0 * level);
    let mut s = format!("{:<8} {:>14} {:>22}  notes\n", "Method", "Point Estimate", ci_head);
    for r in rows {
        let ci = r.ci.map_or_else(String::new, |(lo, hi)| format!("({lo:.3}, {hi:.3})"));
        let mut notes = Vec::new();
        if let Some(se) = r.se {
            notes.push(format!("se {se:.3}"));
        }
        if r.in_bounds == Some(false) {
            notes.push("outside [-1, 1]".to_string());
        }
        if !r.converged {
            notes.push("not converged".to_string());
        }
        s.push_str(&format!(
            "{:<8} {:>14.3} {:>22}  {}\n",
            r.label,
            r.estimate,
            ci,
            notes.join("; ")
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LateEtt {
    pub late: f64,
    pub ett: f64,
}

/// Designs of all working models and index functions.
#[derive(Debug, Clone)]
pub struct Designs {
    pub alpha: Design,
    pub beta: Design,
    pub eta: Design,
    pub zeta: Design,
    pub working: Design,
    pub h1: Design,
    pub h2: Design,
    pub h3: Design,
    pub h: Design,
    pub g: Design,
}

fn cached<'c, T>(cell: &'c OnceCell<Result<T>>, init: impl FnOnce() -> Result<T>) -> Result<&'c T> {
    match cell.get_or_init(init) {
        Ok(v) => Ok(v),
        Err(e) => Err(e.clone()),
    }
}

#[inline]
fn write_scaled(out: &mut [f64], row: &[f64], c: f64) {
    for (o, x) in out.iter_mut().zip(row) {
        *o = c * x;
    }
}

#[inline]
fn dot(row: &[f64], coef: &[f64]) -> f64 {
    row.iter().zip(coef).map(|(a, b)| a * b).sum()
}

/// Caching estimation context for one dataset and configuration.
pub struct Fitter<'a> {
    ds: &'a Dataset,
    cfg: &'a EstimatorConfig,
    designs: OnceCell<Result<Designs>>,
    propensity: OnceCell<Result<Propensity>>,
    f_obs: OnceCell<Result<Vec<f64>>>,
    treatment: OnceCell<Result<TreatmentFit>>,
    outcome: OnceCell<Result<OutcomeFit>>,
    baseline: OnceCell<Result<BaselineFit>>,
    p0_y: OnceCell<Result<Vec<f64>>>,
    beta_ipw: OnceCell<Result<Vec<f64>>>,
    beta_dr: OnceCell<Result<Vec<f64>>>,
    /// Unbounded and bounded `alpha_dr`.
    alpha_dr: [OnceCell<Result<Vec<f64>>>; 2],
    /// Components that returned a best iterate rather than a solution.
    unconverged: RefCell<BTreeSet<&'static str>>,
}

impl<'a> Fitter<'a> {
    pub fn new(ds: &'a Dataset, cfg: &'a EstimatorConfig) -> Fitter<'a> {
        Fitter {
            ds,
            cfg,
            designs: OnceCell::new(),
            propensity: OnceCell::new(),
            f_obs: OnceCell::new(),
            treatment: OnceCell::new(),
            outcome: OnceCell::new(),
            baseline: OnceCell::new(),
            p0_y: OnceCell::new(),
            beta_ipw: OnceCell::new(),
            beta_dr: OnceCell::new(),
            alpha_dr: [OnceCell::new(), OnceCell::new()],
            unconverged: RefCell::new(BTreeSet::new()),
        }
    }

    fn mle_options(&self) -> MleOptions {
        MleOptions {
            accept_nonconverged: self.cfg.accept_nonconverged,
            ..MleOptions::default()
        }
    }

    /// Root of `sys` from zero, or its best iterate when that is allowed.
    fn root<S: EstimatingSystem>(&self, sys: &S, name: &'static str) -> Result<Vec<f64>> {
        let init = vec![0.0; sys.dim()];
        if !self.cfg.accept_nonconverged {
            return Ok(solve(sys, self.ds, &init)?.theta_hat);
        }
        let r = solve_or_best(sys, self.ds, &init)?;
        if !r.converged {
            self.unconverged.borrow_mut().insert(name);
        }
        Ok(r.theta_hat)
    }

    /// Whether every component `est` relies on converged.
    fn components_converged(&self, est: Estimator) -> bool {
        let lik = |v: &mut bool| {
            if let Some(Ok(t)) = self.treatment.get() {
                *v &= t.fit.converged;
            }
            if let Some(Ok(o)) = self.outcome.get() {
                *v &= o.fit.converged;
            }
        };
        let set = self.unconverged.borrow();
        let mut ok = true;
        let names: &[&str] = match est {
            Estimator::BReg => {
                lik(&mut ok);
                &[]
            }
            Estimator::Ipw => &["beta_ipw"],
            Estimator::BIpw => &["beta_ipw", "alpha_working"],
            Estimator::G => &["alpha_g"],
            Estimator::Mr => {
                lik(&mut ok);
                &["beta_dr", "alpha_dr"]
            }
            Estimator::BMr => {
                lik(&mut ok);
                &["beta_dr", "alpha_dr_bounded"]
            }
            Estimator::Crude | Estimator::Tsls => &[],
        };
        ok && names.iter().all(|n| !set.contains(n))
    }

    pub fn dataset(&self) -> &Dataset {
        self.ds
    }

    pub fn config(&self) -> &EstimatorConfig {
        self.cfg
    }

    /// Link of `delta(X; alpha)`: tanh for a binary outcome, identity otherwise.
    pub fn delta_link(&self) -> Link {
        if self.ds.binary_outcome() {
            Link::Tanh
        } else {
            Link::Identity
        }
    }

    pub fn designs(&self) -> Result<&Designs> {
        cached(&self.designs, || {
            let ds = self.ds;
            let c = self.cfg;
            let alpha = ds.design(&c.delta)?;
            let beta = ds.design(&c.delta_d)?;
            let working = ds.design(c.working.as_deref().unwrap_or(&c.delta_d))?;
            let idx = |o: &Option<Vec<usize>>, base: &Design, name: &str| -> Result<Design> {
                match o {
                    None => Ok(base.clone()),
                    Some(cols) => {
                        let d = ds.design(cols)?;
                        if d.k() != base.k() {
                            return Err(Error::Config(format!(
                                "index function {name} has {} columns, parameter has {}",
                                d.k(),
                                base.k()
                            )));
                        }
                        Ok(d)
                    }
                }
            };
            Ok(Designs {
                h1: idx(&c.index.h1, &beta, "h1")?,
                h2: idx(&c.index.h2, &working, "h2")?,
                h3: idx(&c.index.h3, &alpha, "h3")?,
                h: idx(&c.index.h, &beta, "h")?,
                g: idx(&c.index.g, &alpha, "g")?,
                eta: ds.design(&c.op_d)?,
                zeta: ds.design(&c.op_y)?,
                alpha,
                beta,
                working,
            })
        })
    }

    pub fn propensity(&self) -> Result<&Propensity> {
        cached(&self.propensity, || match &self.cfg.propensity {
            PropensityColumns::Single(cols) => fit_propensity(self.ds, cols),
            PropensityColumns::Ensemble(cands) => fit_propensity_ensemble(self.ds, cands),
        })
    }

    /// `f(Z_i | X_i)` for every unit.
    pub fn f_obs(&self) -> Result<&[f64]> {
        cached(&self.f_obs, || {
            let prop = self.propensity()?;
            let f: Vec<f64> = (0..self.ds.n())
                .map(|i| prop.density(i, self.ds.z()[i]))
                .collect();
            if f.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Positivity("fitted f(Z|X) is zero for some unit".into()));
            }
            Ok(f)
        })
        .map(|v| v.as_slice())
    }

    /// `(2 Z_i - 1) / f(Z_i | X_i)`.
    fn signed_inverse(&self) -> Result<Vec<f64>> {
        let f = self.f_obs()?;
        Ok(self
            .ds
            .z()
            .iter()
            .zip(f)
            .map(|(z, f)| (2.0 * z - 1.0) / f)
            .collect())
    }

    pub fn treatment(&self) -> Result<&TreatmentFit> {
        cached(&self.treatment, || {
            fit_treatment_2mle(
                self.ds,
                &self.cfg.delta_d,
                &self.cfg.op_d,
                self.cfg.delta_d_link,
                self.mle_options(),
            )
        })
    }

    pub fn outcome(&self) -> Result<&OutcomeFit> {
        cached(&self.outcome, || {
            fit_outcome_2mle(
                self.ds,
                self.treatment()?,
                &self.cfg.delta,
                &self.cfg.op_y,
                self.mle_options(),
            )
        })
    }

    pub fn baseline(&self) -> Result<&BaselineFit> {
        cached(&self.baseline, || {
            fit_outcome_baseline(self.ds, self.cfg.baseline.as_deref().unwrap_or(&self.cfg.op_y))
        })
    }

    pub fn p0_d(&self) -> Result<Vec<f64>> {
        let t = self.treatment()?;
        Ok((0..self.ds.n()).map(|i| t.p0_d(i)).collect())
    }

    /// Plug-in `p0_y`: likelihood-based for a binary outcome, least squares otherwise.
    pub fn p0_y(&self) -> Result<&[f64]> {
        cached(&self.p0_y, || {
            if self.ds.binary_outcome() {
                let o = self.outcome()?;
                Ok((0..self.ds.n()).map(|i| o.p0_y(i)).collect())
            } else {
                let b = self.baseline()?;
                Ok((0..self.ds.n()).map(|i| b.p0_y(i)).collect())
            }
        })
        .map(|v| v.as_slice())
    }

    pub fn beta_ipw(&self) -> Result<&[f64]> {
        cached(&self.beta_ipw, || {
            let d = self.designs()?;
            let s = self.signed_inverse()?;
            let sys = BetaIpwEq {
                h: &d.h1,
                beta: &d.beta,
                link: self.cfg.delta_d_link,
                d: self.ds.d(),
                s: &s,
            };
            self.root(&sys, "beta_ipw")
        })
        .map(|v| v.as_slice())
    }

    pub fn beta_dr(&self) -> Result<&[f64]> {
        cached(&self.beta_dr, || {
            let d = self.designs()?;
            let s = self.signed_inverse()?;
            let p0d = self.p0_d()?;
            let sys = BetaDrEq {
                h: &d.h,
                beta: &d.beta,
                link: self.cfg.delta_d_link,
                d: self.ds.d(),
                z: self.ds.z(),
                p0d: &p0d,
                s: &s,
            };
            self.root(&sys, "beta_dr")
        })
        .map(|v| v.as_slice())
    }

    fn propensity_fits(&self) -> Vec<NuisanceFit> {
        self.propensity.get().and_then(|r| r.as_ref().ok()).map(|p| p.fits()).unwrap_or_default()
    }

    fn likelihood_fits(&self) -> Vec<NuisanceFit> {
        let mut v = Vec::new();
        if let Some(Ok(t)) = self.treatment.get() {
            v.push(t.fit.clone());
        }
        if let Some(Ok(o)) = self.outcome.get() {
            v.push(o.fit.clone());
        }
        if let Some(Ok(b)) = self.baseline.get() {
            v.push(b.fit.clone());
        }
        v
    }

    fn positivity_warnings(&self, warnings: &mut Vec<String>) -> Result<()> {
        let min_f = self.f_obs()?.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_f < POSITIVITY_WARN {
            warnings.push(format!("minimum fitted f(Z|X) is {min_f:.3e}"));
        }
        if let Some(w) = self.propensity()?.ensemble_warning() {
            warnings.push(w);
        }
        Ok(())
    }

    fn delta_d_warning(&self, beta: &[f64], what: &str, warnings: &mut Vec<String>) -> Result<f64> {
        let d = self.designs()?;
        let link = self.cfg.delta_d_link;
        let min = (0..self.ds.n())
            .map(|i| link.apply(d.beta.dot(i, beta)).abs())
            .fold(f64::INFINITY, f64::min);
        if min < POSITIVITY_WARN {
            warnings.push(format!("minimum |delta_d| from {what} is {min:.3e}"));
        }
        Ok(min)
    }

    fn report(&self, est: Estimator, delta_hat: f64, mut warnings: Vec<String>) -> EstimateReport {
        let converged = self.components_converged(est);
        if !converged {
            warnings.push("a nuisance or estimating equation did not converge; best iterate used".into());
        }
        let mut fits = self.propensity_fits();
        if matches!(est, Estimator::BReg | Estimator::Mr | Estimator::BMr) {
            fits.extend(self.likelihood_fits());
        }
        if est == Estimator::BReg {
            fits.retain(|f| f.model != crate::nuisance::NuisanceModel::Propensity);
        }
        EstimateReport {
            estimator: est,
            delta_hat,
            in_bounds: self.ds.binary_outcome().then_some(delta_hat.abs() <= 1.0),
            converged,
            nuisance_fits: fits,
            se: None,
            ci: None,
            influence_values: None,
            warnings,
        }
    }

    /// Runs one estimator, wrapping any failure with the estimator's tag.
    pub fn estimate(&self, est: Estimator) -> Result<EstimateReport> {
        self.estimate_inner(est).map_err(|e| e.in_estimator(est.tag()))
    }

    fn estimate_inner(&self, est: Estimator) -> Result<EstimateReport> {
        let mut report = match est {
            Estimator::BReg => self.b_reg()?,
            Estimator::Ipw => self.ipw()?,
            Estimator::BIpw => self.b_ipw()?,
            Estimator::G => self.g()?,
            Estimator::Mr => self.mr(false)?,
            Estimator::BMr => self.mr(true)?,
            Estimator::Crude => return crude(self.ds, self.cfg.sandwich),
            Estimator::Tsls => {
                return tsls(self.ds, self.cfg.tsls_covariates.as_deref(), self.cfg.sandwich)
            }
        };
        if self.cfg.sandwich && !report.converged {
            // the sandwich formula assumes the estimating equations are solved
            report
                .warnings
                .push("sandwich variance omitted: fit did not converge".into());
        } else if self.cfg.sandwich {
            match self.sandwich_se(est) {
                Ok(se) => report.se = Some(se),
                Err(e) => report.warnings.push(format!("sandwich variance unavailable: {e}")),
            }
        }
        Ok(report)
    }

    fn b_reg(&self) -> Result<EstimateReport> {
        if !self.ds.binary_outcome() {
            return Err(Error::Config("b-reg requires a binary outcome".into()));
        }
        let o = self.outcome()?;
        let delta = self.ds.weighted_mean_index(|i| o.delta(i));
        Ok(self.report(Estimator::BReg, delta, Vec::new()))
    }

    fn ipw(&self) -> Result<EstimateReport> {
        let mut warnings = Vec::new();
        self.positivity_warnings(&mut warnings)?;
        let beta = self.beta_ipw()?;
        self.delta_d_warning(beta, "beta_ipw", &mut warnings)?;
        let target = self.ipw_target(beta)?;
        let delta = self.ds.weighted_mean_index(|i| target[i]);
        Ok(self.report(Estimator::Ipw, delta, warnings))
    }

    /// `Y (2Z - 1) / (delta_d(X; beta) f(Z|X))`.
    fn ipw_target(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let d = self.designs()?;
        let f = self.f_obs()?;
        let link = self.cfg.delta_d_link;
        let (z, y) = (self.ds.z(), self.ds.y());
        let t: Vec<f64> = (0..self.ds.n())
            .map(|i| y[i] * (2.0 * z[i] - 1.0) / (link.apply(d.beta.dot(i, beta)) * f[i]))
            .collect();
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Positivity("delta_d(X; beta_ipw) is zero for some unit".into()));
        }
        Ok(t)
    }

    fn alpha_working(&self) -> Result<Vec<f64>> {
        let d = self.designs()?;
        let target = self.ipw_target(self.beta_ipw()?)?;
        let sys = WorkingEq {
            h: &d.h2,
            working: &d.working,
            link: self.delta_link(),
            target: &target,
        };
        self.root(&sys, "alpha_working")
    }

    fn b_ipw(&self) -> Result<EstimateReport> {
        let mut warnings = Vec::new();
        self.positivity_warnings(&mut warnings)?;
        let beta = self.beta_ipw()?;
        self.delta_d_warning(beta, "beta_ipw", &mut warnings)?;
        let a = self.alpha_working()?;
        let d = self.designs()?;
        let link = self.delta_link();
        let delta = self.ds.weighted_mean_index(|i| link.apply(d.working.dot(i, &a)));
        Ok(self.report(Estimator::BIpw, delta, warnings))
    }

    pub fn alpha_g(&self) -> Result<Vec<f64>> {
        let d = self.designs()?;
        let s = self.signed_inverse()?;
        let sys = GEq {
            h: &d.h3,
            alpha: &d.alpha,
            link: self.delta_link(),
            y: self.ds.y(),
            d: self.ds.d(),
            s: &s,
        };
        self.root(&sys, "alpha_g")
    }

    fn g(&self) -> Result<EstimateReport> {
        let mut warnings = Vec::new();
        self.positivity_warnings(&mut warnings)?;
        let a = self.alpha_g()?;
        let d = self.designs()?;
        let link = self.delta_link();
        let delta = self.ds.weighted_mean_index(|i| link.apply(d.alpha.dot(i, &a)));
        Ok(self.report(Estimator::G, delta, warnings))
    }

    /// Index function for alpha_dr; for b-mr its first column is `1/delta_d(X; beta_dr)`.
    fn g_design(&self, bounded: bool) -> Result<Design> {
        let d = self.designs()?;
        if !bounded {
            return Ok(d.g.clone());
        }
        let beta = self.beta_dr()?;
        let k = d.g.k();
        let link = self.cfg.delta_d_link;
        let mut rows = Vec::with_capacity(self.ds.n() * k);
        for i in 0..self.ds.n() {
            rows.push(1.0 / link.apply(d.beta.dot(i, beta)));
            rows.extend_from_slice(&d.g.row(i)[1..]);
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Positivity("delta_d(X; beta_dr) is zero for some unit".into()));
        }
        Ok(Design::from_rows(k, rows))
    }

    pub fn alpha_dr(&self, bounded: bool) -> Result<Vec<f64>> {
        cached(&self.alpha_dr[bounded as usize], || self.solve_alpha_dr(bounded)).cloned()
    }

    fn solve_alpha_dr(&self, bounded: bool) -> Result<Vec<f64>> {
        let d = self.designs()?;
        let s = self.signed_inverse()?;
        let p0d = self.p0_d()?;
        let p0y = self.p0_y()?;
        let g = self.g_design(bounded)?;
        let sys = AlphaDrEq {
            g: &g,
            alpha: &d.alpha,
            link: self.delta_link(),
            y: self.ds.y(),
            d: self.ds.d(),
            p0y,
            p0d: &p0d,
            s: &s,
        };
        self.root(&sys, if bounded { "alpha_dr_bounded" } else { "alpha_dr" })
    }

    fn mr(&self, bounded: bool) -> Result<EstimateReport> {
        let est = if bounded { Estimator::BMr } else { Estimator::Mr };
        let mut warnings = Vec::new();
        self.positivity_warnings(&mut warnings)?;
        let beta = self.beta_dr()?.to_vec();
        let min_dd = self.delta_d_warning(&beta, "beta_dr", &mut warnings)?;
        let alpha = self.alpha_dr(bounded)?;
        let d = self.designs()?;
        let link = self.delta_link();
        if bounded {
            let delta = self.ds.weighted_mean_index(|i| link.apply(d.alpha.dot(i, &alpha)));
            return Ok(self.report(est, delta, warnings));
        }
        if min_dd < MR_INSTABILITY {
            warnings.push("delta_d(X; beta_dr) is nearly zero; mr may be unstable".into());
        }
        let summand = self.mr_summand(&beta, &alpha)?;
        let delta = self.ds.weighted_mean_index(|i| summand[i]);
        let mut report = self.report(est, delta, warnings);
        report.influence_values = Some(summand.iter().map(|s| s - delta).collect());
        Ok(report)
    }

    /// Per-unit terms whose weighted mean is the mr estimate.
    pub fn mr_summand(&self, beta_dr: &[f64], alpha_dr: &[f64]) -> Result<Vec<f64>> {
        let d = self.designs()?;
        let s = self.signed_inverse()?;
        let p0d = self.p0_d()?;
        let p0y = self.p0_y()?;
        let (ld, la) = (self.cfg.delta_d_link, self.delta_link());
        let (y, dd) = (self.ds.y(), self.ds.d());
        Ok((0..self.ds.n())
            .map(|i| {
                let delta = la.apply(d.alpha.dot(i, alpha_dr));
                let delta_d = ld.apply(d.beta.dot(i, beta_dr));
                (y[i] - dd[i] * delta - p0y[i] + p0d[i] * delta) * s[i] / delta_d + delta
            })
            .collect())
    }

    /// Plug-in LATE (ratio of averaged risk differences) and ETT from the
    /// likelihood fits.
    pub fn late_ett(&self) -> Result<LateEtt> {
        if !self.ds.binary_outcome() {
            return Err(Error::Config("late-ett requires a binary outcome".into()));
        }
        let t = self.treatment()?;
        let o = self.outcome()?;
        let num = self.ds.weighted_mean_index(|i| o.delta(i) * t.delta_d(i));
        let den = self.ds.weighted_mean_index(|i| t.delta_d(i));
        if den == 0.0 {
            return Err(Error::ZeroDenominator("average delta_d is zero".into()));
        }
        let (mut sw, mut swd) = (0.0, 0.0);
        for i in 0..self.ds.n() {
            if self.ds.d()[i] == 1.0 {
                sw += self.ds.weights()[i];
                swd += self.ds.weights()[i] * o.delta(i);
            }
        }
        if sw == 0.0 {
            return Err(Error::DegenerateData("no treated units for ETT".into()));
        }
        Ok(LateEtt {
            late: num / den,
            ett: swd / sw,
        })
    }

    /// Sandwich standard error of `Delta` from the jointly stacked nuisance
    /// and estimator equations.
    pub fn sandwich_se(&self, est: Estimator) -> Result<f64> {
        let (sys, theta) = self.stacked(est)?;
        let v = sandwich_variance(&sys, self.ds, &theta)?;
        let q = theta.len();
        let var = v[(q - 1, q - 1)];
        if !(var >= 0.0) {
            return Err(Error::Singular {
                label: sys.label().to_string(),
                detail: "negative variance".into(),
            });
        }
        Ok(var.sqrt())
    }

    /// The stacked system for `est` together with its solution.
    pub fn stacked(&self, est: Estimator) -> Result<(Stacked<'_>, Vec<f64>)> {
        let d = self.designs()?;
        let mut theta = Vec::new();
        let mut lay = Layout::default();
        let needs_prop = !matches!(est, Estimator::BReg);
        let needs_lik = matches!(est, Estimator::BReg | Estimator::Mr | Estimator::BMr);
        let mut prop_designs = PropDesigns::None;
        if needs_prop {
            lay.prop = theta.len();
            match self.propensity()? {
                Propensity::Single { design, fit } => {
                    theta.extend_from_slice(&fit.coefficients);
                    prop_designs = PropDesigns::Single(design);
                }
                Propensity::Ensemble(e) => {
                    for f in &e.candidates {
                        theta.extend_from_slice(&f.coefficients);
                    }
                    theta.extend_from_slice(e.weights());
                    prop_designs = PropDesigns::Ensemble(&e.designs);
                }
            }
        }
        let mut baseline = None;
        if needs_lik {
            let t = self.treatment()?;
            lay.treat = Some(theta.len());
            theta.extend_from_slice(&t.fit.coefficients);
            lay.outcome = Some(theta.len());
            if self.ds.binary_outcome() {
                theta.extend_from_slice(&self.outcome()?.fit.coefficients);
            } else {
                let b = self.baseline()?;
                theta.extend_from_slice(&b.fit.coefficients);
                baseline = Some(&b.design);
            }
        }
        lay.main1 = theta.len();
        let delta_hat;
        match est {
            Estimator::BReg => {
                delta_hat = self.b_reg()?.delta_hat;
            }
            Estimator::Ipw | Estimator::BIpw => {
                theta.extend_from_slice(self.beta_ipw()?);
                lay.main2 = theta.len();
                if est == Estimator::BIpw {
                    theta.extend(self.alpha_working()?);
                    delta_hat = self.b_ipw()?.delta_hat;
                } else {
                    delta_hat = self.ipw()?.delta_hat;
                }
            }
            Estimator::G => {
                theta.extend(self.alpha_g()?);
                delta_hat = self.g()?.delta_hat;
            }
            Estimator::Mr | Estimator::BMr => {
                theta.extend_from_slice(self.beta_dr()?);
                lay.main2 = theta.len();
                theta.extend(self.alpha_dr(est == Estimator::BMr)?);
                delta_hat = self.mr(est == Estimator::BMr)?.delta_hat;
            }
            Estimator::Crude | Estimator::Tsls => {
                return Err(Error::Config(format!("{est} has no stacked IV system")));
            }
        }
        lay.delta = theta.len();
        theta.push(delta_hat);
        let sys = Stacked {
            ds: self.ds,
            d,
            prop: prop_designs,
            baseline,
            est,
            link_dd: self.cfg.delta_d_link,
            link_delta: self.delta_link(),
            lay,
            label: format!("stacked {est}"),
        };
        Ok((sys, theta))
    }
}

struct BetaIpwEq<'a> {
    h: &'a Design,
    beta: &'a Design,
    link: Link,
    d: &'a [f64],
    s: &'a [f64],
}

impl EstimatingSystem for BetaIpwEq<'_> {
    fn dim(&self) -> usize {
        self.beta.k()
    }
    fn label(&self) -> &str {
        "beta_ipw"
    }
    fn unit_residual(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        let c = self.d[i] * self.s[i] - self.link.apply(self.beta.dot(i, theta));
        write_scaled(out, self.h.row(i), c);
    }
}

struct WorkingEq<'a> {
    h: &'a Design,
    working: &'a Design,
    link: Link,
    target: &'a [f64],
}

impl EstimatingSystem for WorkingEq<'_> {
    fn dim(&self) -> usize {
        self.working.k()
    }
    fn label(&self) -> &str {
        "alpha_working"
    }
    fn unit_residual(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        let c = self.target[i] - self.link.apply(self.working.dot(i, theta));
        write_scaled(out, self.h.row(i), c);
    }
}

struct GEq<'a> {
    h: &'a Design,
    alpha: &'a Design,
    link: Link,
    y: &'a [f64],
    d: &'a [f64],
    s: &'a [f64],
}

impl EstimatingSystem for GEq<'_> {
    fn dim(&self) -> usize {
        self.alpha.k()
    }
    fn label(&self) -> &str {
        "alpha_g"
    }
    fn unit_residual(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        let delta = self.link.apply(self.alpha.dot(i, theta));
        let c = (self.y[i] - self.d[i] * delta) * self.s[i];
        write_scaled(out, self.h.row(i), c);
    }
}

struct BetaDrEq<'a> {
    h: &'a Design,
    beta: &'a Design,
    link: Link,
    d: &'a [f64],
    z: &'a [f64],
    p0d: &'a [f64],
    s: &'a [f64],
}

impl EstimatingSystem for BetaDrEq<'_> {
    fn dim(&self) -> usize {
        self.beta.k()
    }
    fn label(&self) -> &str {
        "beta_dr"
    }
    fn unit_residual(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        let dd = self.link.apply(self.beta.dot(i, theta));
        let c = (self.d[i] - dd * self.z[i] - self.p0d[i]) * self.s[i];
        write_scaled(out, self.h.row(i), c);
    }
}

struct AlphaDrEq<'a> {
    g: &'a Design,
    alpha: &'a Design,
    link: Link,
    y: &'a [f64],
    d: &'a [f64],
    p0y: &'a [f64],
    p0d: &'a [f64],
    s: &'a [f64],
}

impl EstimatingSystem for AlphaDrEq<'_> {
    fn dim(&self) -> usize {
        self.alpha.k()
    }
    fn label(&self) -> &str {
        "alpha_dr"
    }
    fn unit_residual(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        let delta = self.link.apply(self.alpha.dot(i, theta));
        let c = (self.y[i] - self.d[i] * delta - self.p0y[i] + self.p0d[i] * delta) * self.s[i];
        write_scaled(out, self.g.row(i), c);
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Layout {
    prop: usize,
    treat: Option<usize>,
    outcome: Option<usize>,
    main1: usize,
    main2: usize,
    delta: usize,
}

enum PropDesigns<'a> {
    None,
    Single(&'a Design),
    Ensemble(&'a [Design]),
}

/// All nuisance and estimator equations of one estimator stacked into one
/// system, so that the sandwich variance accounts for nuisance estimation.
pub struct Stacked<'a> {
    ds: &'a Dataset,
    d: &'a Designs,
    prop: PropDesigns<'a>,
    baseline: Option<&'a Design>,
    est: Estimator,
    link_dd: Link,
    link_delta: Link,
    lay: Layout,
    label: String,
}

impl Stacked<'_> {
    /// Writes the propensity equations and returns `f(Z_i | X_i)`.
    fn propensity_block(&self, i: usize, theta: &[f64], out: &mut [f64]) -> f64 {
        let z = self.ds.z()[i];
        let o = self.lay.prop;
        let p = match self.prop {
            PropDesigns::None => return f64::NAN,
            PropDesigns::Single(des) => {
                let k = des.k();
                let p = expit(des.dot(i, &theta[o..o + k]));
                write_scaled(&mut out[o..o + k], des.row(i), z - p);
                p
            }
            PropDesigns::Ensemble(designs) => {
                let j = designs.len();
                let mut off = o;
                let mut probs = Vec::with_capacity(j);
                for des in designs {
                    let k = des.k();
                    let p = expit(des.dot(i, &theta[off..off + k]));
                    write_scaled(&mut out[off..off + k], des.row(i), z - p);
                    probs.push(p);
                    off += k;
                }
                let a = &theta[off..off + j];
                let mix = dot(&probs, a);
                for m in 0..j {
                    out[off + m] = probs[m] * (z - mix) - ENSEMBLE_RIDGE * a[m];
                }
                mix.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
            }
        };
        if z == 1.0 {
            p
        } else {
            1.0 - p
        }
    }
}

impl EstimatingSystem for Stacked<'_> {
    fn dim(&self) -> usize {
        self.lay.delta + 1
    }

    fn label(&self) -> &str {
        &self.label
    }

    fn unit_residual(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        let ds = self.ds;
        let d = self.d;
        let (z, dd, y) = (ds.z()[i], ds.d()[i], ds.y()[i]);
        let f = self.propensity_block(i, theta, out);
        let s = (2.0 * z - 1.0) / f;

        let (mut p0d, mut p0y, mut delta_2mle) = (f64::NAN, f64::NAN, f64::NAN);
        if let (Some(ot), Some(oo)) = (self.lay.treat, self.lay.outcome) {
            let kt = d.beta.k() + d.eta.k();
            let model = TreatmentModel {
                beta: &d.beta,
                eta: &d.eta,
                link: self.link_dd,
                z: ds.z(),
                d: ds.d(),
                weights: ds.weights(),
            };
            let tp = &theta[ot..ot + kt];
            bernoulli_unit_score(&model, i, tp, &mut out[ot..ot + kt]);
            let kb = d.beta.k();
            let delta_d = self.link_dd.apply(d.beta.dot(i, &tp[..kb]));
            let op_d = d.eta.dot(i, &tp[kb..]).clamp(-LOG_OP_CLAMP, LOG_OP_CLAMP).exp();
            p0d = baseline_prob(delta_d, op_d);
            match self.baseline {
                None => {
                    let ko = d.alpha.k() + d.zeta.k();
                    let op = &theta[oo..oo + ko];
                    let slot = &mut out[oo..oo + ko];
                    let p = outcome_prob(d.alpha.row(i), d.zeta.row(i), delta_d, z, op, slot);
                    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    let c = if pc == p { (y - p) / (p * (1.0 - p)) } else { 0.0 };
                    slot.iter_mut().for_each(|v| *v *= c);
                    let ka = d.alpha.k();
                    delta_2mle = d.alpha.dot(i, &op[..ka]).tanh();
                    let op_y = d.zeta.dot(i, &op[ka..]).clamp(-LOG_OP_CLAMP, LOG_OP_CLAMP).exp();
                    p0y = baseline_prob(delta_2mle * delta_d, op_y);
                }
                Some(bd) => {
                    let k = bd.k();
                    let iota = &theta[oo..oo + k];
                    p0y = bd.dot(i, iota);
                    write_scaled(&mut out[oo..oo + k], bd.row(i), (1.0 - z) * (y - p0y));
                }
            }
        }

        let (m1, m2, od) = (self.lay.main1, self.lay.main2, self.lay.delta);
        let summand = match self.est {
            Estimator::BReg => delta_2mle,
            Estimator::Ipw | Estimator::BIpw => {
                let kb = d.beta.k();
                let beta = &theta[m1..m1 + kb];
                let delta_d = self.link_dd.apply(d.beta.dot(i, beta));
                write_scaled(&mut out[m1..m1 + kb], d.h1.row(i), dd * s - delta_d);
                let target = y * s / delta_d;
                if self.est == Estimator::Ipw {
                    target
                } else {
                    let kw = d.working.k();
                    let a = &theta[m2..m2 + kw];
                    let dw = self.link_delta.apply(d.working.dot(i, a));
                    write_scaled(&mut out[m2..m2 + kw], d.h2.row(i), target - dw);
                    dw
                }
            }
            Estimator::G => {
                let ka = d.alpha.k();
                let delta = self.link_delta.apply(d.alpha.dot(i, &theta[m1..m1 + ka]));
                write_scaled(&mut out[m1..m1 + ka], d.h3.row(i), (y - dd * delta) * s);
                delta
            }
            Estimator::Mr | Estimator::BMr => {
                let kb = d.beta.k();
                let ka = d.alpha.k();
                let delta_d = self.link_dd.apply(d.beta.dot(i, &theta[m1..m1 + kb]));
                write_scaled(&mut out[m1..m1 + kb], d.h.row(i), (dd - delta_d * z - p0d) * s);
                let delta = self.link_delta.apply(d.alpha.dot(i, &theta[m2..m2 + ka]));
                let r = y - dd * delta - p0y + p0d * delta;
                write_scaled(&mut out[m2..m2 + ka], d.g.row(i), r * s);
                if self.est == Estimator::BMr {
                    out[m2] = r * s / delta_d;
                    delta
                } else {
                    r * s / delta_d + delta
                }
            }
            Estimator::Crude | Estimator::Tsls => unreachable!("no stacked system"),
        };
        out[od] = summand - theta[od];
    }
}

/// Weighted difference in mean outcome between treated and untreated units.
pub fn crude(ds: &Dataset, sandwich: bool) -> Result<EstimateReport> {
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
    for u in ds.units() {
        if u.d == 1.0 {
            s1 += u.w * u.y;
            n1 += u.w;
        } else {
            s0 += u.w * u.y;
            n0 += u.w;
        }
    }
    if n1 == 0.0 || n0 == 0.0 {
        return Err(Error::DegenerateData("crude contrast needs both treatment arms".into())
            .in_estimator("crude"));
    }
    let (mu1, mu0) = (s1 / n1, s0 / n0);
    let delta = mu1 - mu0;
    let mut report = bare_report(ds, Estimator::Crude, delta);
    if sandwich {
        let (d, y) = (ds.d().to_vec(), ds.y().to_vec());
        let sys = FnSystem {
            dim: 3,
            label: "crude".into(),
            f: move |i: usize, t: &[f64], out: &mut [f64]| {
                out[0] = d[i] * (y[i] - t[0]);
                out[1] = (1.0 - d[i]) * (y[i] - t[1]);
                out[2] = t[0] - t[1] - t[2];
            },
        };
        report.se = sandwich_variance(&sys, ds, &[mu1, mu0, delta])
            .ok()
            .map(|v| v[(2, 2)].max(0.0).sqrt());
    }
    Ok(report)
}

fn bare_report(ds: &Dataset, est: Estimator, delta: f64) -> EstimateReport {
    EstimateReport {
        estimator: est,
        delta_hat: delta,
        in_bounds: ds.binary_outcome().then_some(delta.abs() <= 1.0),
        converged: true,
        nuisance_fits: Vec::new(),
        se: None,
        ci: None,
        influence_values: None,
        warnings: Vec::new(),
    }
}

/// Two-stage least squares with a linear first stage of `D` on `(Z, X)`;
/// returns the coefficient of the fitted treatment. With one instrument this
/// equals the just-identified IV solution `(V'WR)^{-1} V'Wy`, `V = (Z, X)`,
/// `R = (D, X)`.
pub fn tsls(ds: &Dataset, covariates: Option<&[usize]>, sandwich: bool) -> Result<EstimateReport> {
    let all: Vec<usize> = (0..ds.p()).collect();
    let cols = covariates.unwrap_or(&all);
    let xd = ds.design(cols).map_err(|e| e.in_estimator("2sls"))?;
    let k = xd.k() + 1;
    let n = ds.n();
    let (z, d, y, w) = (ds.z(), ds.d(), ds.y(), ds.weights());
    let mut vr = DMatrix::<f64>::zeros(k, k);
    let mut vy = vec![0.0; k];
    let mut v = vec![0.0; k];
    let mut r = vec![0.0; k];
    for i in 0..n {
        v[0] = z[i];
        r[0] = d[i];
        v[1..].copy_from_slice(xd.row(i));
        r[1..].copy_from_slice(xd.row(i));
        for a in 0..k {
            vy[a] += w[i] * v[a] * y[i];
            for b in 0..k {
                vr[(a, b)] += w[i] * v[a] * r[b];
            }
        }
    }
    let coef = solve_square(&vr, &vy).ok_or_else(|| {
        Error::Singular {
            label: "2sls".into(),
            detail: "second-stage design is singular".into(),
        }
        .in_estimator("2sls")
    })?;
    let mut report = bare_report(ds, Estimator::Tsls, coef[0]);
    if sandwich {
        let xd2 = xd.clone();
        let (z, d, y) = (z.to_vec(), d.to_vec(), y.to_vec());
        let sys = FnSystem {
            dim: k,
            label: "2sls".into(),
            f: move |i: usize, t: &[f64], out: &mut [f64]| {
                let x = xd2.row(i);
                let resid = y[i] - t[0] * d[i] - dot(x, &t[1..]);
                out[0] = z[i] * resid;
                write_scaled(&mut out[1..], x, resid);
            },
        };
        let check = mean_residual(&sys, ds, &coef);
        debug_assert!(check.iter().all(|c| c.abs() < 1e-6));
        report.se = sandwich_variance(&sys, ds, &coef)
            .ok()
            .map(|v| v[(0, 0)].max(0.0).sqrt());
    }
    Ok(report)
}

/// Runs several estimators sharing one set of nuisance fits.
pub fn estimate_all(
    ds: &Dataset,
    cfg: &EstimatorConfig,
    estimators: &[Estimator],
) -> Vec<(Estimator, Result<EstimateReport>)> {
    let fitter = Fitter::new(ds, cfg);
    estimators.iter().map(|&e| (e, fitter.estimate(e))).collect()
}

pub fn estimate_b_reg(ds: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    Fitter::new(ds, cfg).estimate(Estimator::BReg)
}

pub fn estimate_ipw(ds: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    Fitter::new(ds, cfg).estimate(Estimator::Ipw)
}

pub fn estimate_b_ipw(ds: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    Fitter::new(ds, cfg).estimate(Estimator::BIpw)
}

pub fn estimate_g(ds: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    Fitter::new(ds, cfg).estimate(Estimator::G)
}

pub fn estimate_mr(ds: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    Fitter::new(ds, cfg).estimate(Estimator::Mr)
}

pub fn estimate_b_mr(ds: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    Fitter::new(ds, cfg).estimate(Estimator::BMr)
}

pub fn estimate_crude(ds: &Dataset) -> Result<EstimateReport> {
    crude(ds, false)
}

pub fn estimate_2sls(ds: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    tsls(ds, cfg.tsls_covariates.as_deref(), cfg.sandwich)
}

pub fn estimate_late_ett_plugin(ds: &Dataset, cfg: &EstimatorConfig) -> Result<LateEtt> {
    Fitter::new(ds, cfg).late_ett().map_err(|e| e.in_estimator("late-ett"))
}
