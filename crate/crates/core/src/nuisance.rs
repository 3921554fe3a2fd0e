//! Maximum-likelihood fits of the nuisance models.
//!
//! * instrument propensity `P(Z=1|X) = expit(gamma'X)`;
//! * two-step treatment/outcome likelihoods in the odds-product
//!   parameterization: first `(beta, eta)` from `D | Z, X`, then
//!   `(alpha, zeta)` from `Y | Z, X` with `beta` held at its first-step value;
//! * the continuous-outcome baseline `E[Y|Z=0,X] = iota'X`;
//! * a two-step ensemble of candidate propensity models.
//!
//! All log-likelihoods are weighted empirical means, so gradients and the
//! `1e-8` convergence tolerance are on the per-unit scale regardless of `n`.

use nalgebra::DMatrix;

use crate::data::{Dataset, Design};
use crate::error::{Error, Result};
use crate::linalg::{solve_spd, sup_norm, weighted_least_squares};
use crate::param::{baseline_prob, baseline_prob_derivs, expit, Link};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` inside likelihoods.
pub const PROB_CLAMP: f64 = 1e-10;
/// Log odds-product predictors are clamped to `+-LOG_OP_CLAMP`.
pub const LOG_OP_CLAMP: f64 = 30.0;
/// Ridge added to the ensemble second-step normal equations.
pub const ENSEMBLE_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleOptions {
    pub gradient_tol: f64,
    pub max_iter: usize,
    /// Return the best iterate, marked unconverged, instead of a
    /// non-convergence or separation error.
    pub accept_nonconverged: bool,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            gradient_tol: 1e-8,
            max_iter: 200,
            accept_nonconverged: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuisanceModel {
    /// `gamma`
    Propensity,
    /// `(beta, eta)`
    Treatment,
    /// `(alpha, zeta)`
    Outcome,
    /// `iota`
    OutcomeBaseline,
    /// mixture weights of an ensemble propensity
    Ensemble,
}

impl NuisanceModel {
    pub fn tag(self) -> &'static str {
        match self {
            NuisanceModel::Propensity => "gamma",
            NuisanceModel::Treatment => "beta_eta",
            NuisanceModel::Outcome => "alpha_zeta",
            NuisanceModel::OutcomeBaseline => "iota",
            NuisanceModel::Ensemble => "ensemble",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFit {
    pub coefficients: Vec<f64>,
    pub model: NuisanceModel,
    pub solver: &'static str,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub log_likelihood: Option<f64>,
}

/// A Bernoulli likelihood whose success probability is a smooth function of
/// the parameters.
pub trait BernoulliModel {
    fn dim(&self) -> usize;
    fn n(&self) -> usize;
    fn response(&self, i: usize) -> f64;
    fn weight(&self, i: usize) -> f64;
    /// Success probability for unit `i`, writing `dp/dparams` into `dp`.
    fn prob(&self, i: usize, params: &[f64], dp: &mut [f64]) -> f64;
}

/// Weighted mean log-likelihood, optionally with its gradient and expected
/// information.
pub fn bernoulli_eval<M: BernoulliModel + ?Sized>(
    model: &M,
    params: &[f64],
    mut grad: Option<&mut [f64]>,
    mut info: Option<&mut DMatrix<f64>>,
) -> f64 {
    let q = model.dim();
    let n = model.n();
    let mut dp = vec![0.0; q];
    let mut ll = 0.0;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    if let Some(h) = info.as_deref_mut() {
        h.fill(0.0);
    }
    for i in 0..n {
        let w = model.weight(i);
        let y = model.response(i);
        let p = model.prob(i, params, &mut dp);
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        ll += w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        if pc != p {
            continue;
        }
        let v = p * (1.0 - p);
        if let Some(g) = grad.as_deref_mut() {
            let s = w * (y - p) / v;
            for (gj, dj) in g.iter_mut().zip(&dp) {
                *gj += s * dj;
            }
        }
        if let Some(h) = info.as_deref_mut() {
            let s = w / v;
            for a in 0..q {
                let sa = s * dp[a];
                for b in 0..=a {
                    h[(a, b)] += sa * dp[b];
                }
            }
        }
    }
    let nf = n as f64;
    if let Some(g) = grad {
        g.iter_mut().for_each(|v| *v /= nf);
    }
    if let Some(h) = info {
        for a in 0..q {
            for b in 0..=a {
                h[(a, b)] /= nf;
                h[(b, a)] = h[(a, b)];
            }
        }
    }
    ll / nf
}

/// Per-unit score `w_i (y_i - p_i) / (p_i (1 - p_i)) dp_i` (unweighted by `1/n`).
pub fn bernoulli_unit_score<M: BernoulliModel + ?Sized>(
    model: &M,
    i: usize,
    params: &[f64],
    out: &mut [f64],
) {
    let p = model.prob(i, params, out);
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if pc != p {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let s = (model.response(i) - p) / (p * (1.0 - p));
    out.iter_mut().for_each(|v| *v *= s);
}

/// Outcome of [`maximize`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaxResult {
    pub theta: Vec<f64>,
    pub log_likelihood: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximizes a Bernoulli likelihood by damped Newton steps on the expected
/// information, falling back to a finite-difference observed Hessian when a
/// step fails to improve the likelihood. Starts at zero.
pub fn maximize<M: BernoulliModel + ?Sized>(
    model: &M,
    label: &str,
    opts: MleOptions,
) -> Result<MaxResult> {
    let r = maximize_raw(model, label, opts)?;
    match r {
        Ok(res) => Ok(res),
        Err((_, res)) if opts.accept_nonconverged => Ok(res),
        Err((err, _)) => Err(err),
    }
}

type RawMax = std::result::Result<MaxResult, (Error, MaxResult)>;

fn maximize_raw<M: BernoulliModel + ?Sized>(
    model: &M,
    label: &str,
    opts: MleOptions,
) -> Result<RawMax> {
    let q = model.dim();
    let mut theta = vec![0.0; q];
    let mut grad = vec![0.0; q];
    let mut info = DMatrix::<f64>::zeros(q, q);
    let mut ll = bernoulli_eval(model, &theta, Some(&mut grad), Some(&mut info));
    if !ll.is_finite() {
        return Err(Error::NonConvergence {
            label: label.to_string(),
            iterations: 0,
            residual_norm: f64::NAN,
            best: theta,
        });
    }
    let mut gnorm = sup_norm(&grad);
    // singular information at the start means a rank-deficient design
    solve_spd(&info, &grad, label)?;
    let mut trial = vec![0.0; q];
    let mut trial_grad = vec![0.0; q];
    for iter in 0..opts.max_iter {
        if gnorm < opts.gradient_tol {
            if let Ok(step) = solve_spd(&info, &grad, label) {
                if sup_norm(&step) > 1e-2 {
                    let err = Error::Separation {
                        label: label.to_string(),
                    };
                    return Ok(Err((err, done(theta, ll, gnorm, iter, false))));
                }
                // one polishing step, kept only if the score shrinks
                for j in 0..q {
                    trial[j] = theta[j] + step[j];
                }
                let new_ll = bernoulli_eval(model, &trial, Some(&mut trial_grad), None);
                let new_gnorm = sup_norm(&trial_grad);
                if new_ll.is_finite() && new_gnorm < gnorm {
                    return Ok(Ok(done(trial, new_ll, new_gnorm, iter + 1, true)));
                }
            }
            return Ok(Ok(done(theta, ll, gnorm, iter, true)));
        }
        let mut accepted = false;
        for use_fd in [false, true] {
            let step = if use_fd {
                match observed_hessian_step(model, &theta, &grad) {
                    Some(s) => s,
                    None => break,
                }
            } else {
                match solve_spd(&info, &grad, label) {
                    Ok(s) => s,
                    Err(_) => continue,
                }
            };
            let mut t = 1.0;
            for _ in 0..40 {
                for j in 0..q {
                    trial[j] = theta[j] + t * step[j];
                }
                let new_ll = bernoulli_eval(model, &trial, Some(&mut trial_grad), None);
                let new_gnorm = sup_norm(&trial_grad);
                let slack = 1e-13 * (1.0 + ll.abs());
                if new_ll.is_finite()
                    && (new_ll > ll || (new_ll >= ll - slack && new_gnorm < gnorm))
                {
                    theta.copy_from_slice(&trial);
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            let err = Error::NonConvergence {
                label: label.to_string(),
                iterations: iter,
                residual_norm: gnorm,
                best: theta.clone(),
            };
            return Ok(Err((err, done(theta, ll, gnorm, iter, false))));
        }
        ll = bernoulli_eval(model, &theta, Some(&mut grad), Some(&mut info));
        gnorm = sup_norm(&grad);
    }
    if gnorm < opts.gradient_tol {
        return Ok(Ok(done(theta, ll, gnorm, opts.max_iter, true)));
    }
    let err = Error::NonConvergence {
        label: label.to_string(),
        iterations: opts.max_iter,
        residual_norm: gnorm,
        best: theta.clone(),
    };
    Ok(Err((err, done(theta, ll, gnorm, opts.max_iter, false))))
}

fn done(theta: Vec<f64>, ll: f64, gnorm: f64, iterations: usize, converged: bool) -> MaxResult {
    MaxResult {
        theta,
        log_likelihood: ll,
        gradient_norm: gnorm,
        iterations,
        converged,
    }
}

/// Newton step `-H^{-1} g` with `H` the central-difference Hessian of the
/// analytic gradient; `None` unless `H` is negative definite.
fn observed_hessian_step<M: BernoulliModel + ?Sized>(
    model: &M,
    theta: &[f64],
    grad: &[f64],
) -> Option<Vec<f64>> {
    let q = theta.len();
    let mut h = DMatrix::<f64>::zeros(q, q);
    let mut tp = theta.to_vec();
    let mut gp = vec![0.0; q];
    let mut gm = vec![0.0; q];
    for j in 0..q {
        let step = 1e-6 * theta[j].abs().max(1.0);
        tp[j] = theta[j] + step;
        bernoulli_eval(model, &tp, Some(&mut gp), None);
        tp[j] = theta[j] - step;
        bernoulli_eval(model, &tp, Some(&mut gm), None);
        tp[j] = theta[j];
        for a in 0..q {
            h[(a, j)] = (gp[a] - gm[a]) / (2.0 * step);
        }
    }
    let neg = -(&h + h.transpose()) * 0.5;
    solve_spd(&neg, grad, "observed Hessian").ok()
}

/// Logistic regression of a binary response on a design.
pub struct LogisticModel<'a> {
    pub design: &'a Design,
    pub response: &'a [f64],
    pub weights: &'a [f64],
}

impl BernoulliModel for LogisticModel<'_> {
    fn dim(&self) -> usize {
        self.design.k()
    }
    fn n(&self) -> usize {
        self.design.n()
    }
    fn response(&self, i: usize) -> f64 {
        self.response[i]
    }
    fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }
    #[inline]
    fn prob(&self, i: usize, params: &[f64], dp: &mut [f64]) -> f64 {
        let p = expit(self.design.dot(i, params));
        let v = p * (1.0 - p);
        for (d, x) in dp.iter_mut().zip(self.design.row(i)) {
            *d = v * x;
        }
        p
    }
}

/// Likelihood of `D | Z, X` with `delta_d = link(beta'X)` and
/// `op_d = exp(eta'X)`; parameters are `(beta, eta)` stacked.
pub struct TreatmentModel<'a> {
    pub beta: &'a Design,
    pub eta: &'a Design,
    pub link: Link,
    pub z: &'a [f64],
    pub d: &'a [f64],
    pub weights: &'a [f64],
}

/// `delta_d`, `op` and `p0_d` for one unit, with derivative pieces.
#[inline]
fn treatment_unit(
    beta: &Design,
    eta: &Design,
    link: Link,
    i: usize,
    params: &[f64],
) -> (f64, f64, f64, f64, f64, f64, bool) {
    let kb = beta.k();
    let lp_b = beta.dot(i, &params[..kb]);
    let rd = link.apply(lp_b);
    let drd = link.derivative(lp_b);
    let lp_e = eta.dot(i, &params[kb..]);
    let clamped = lp_e.abs() > LOG_OP_CLAMP;
    let op = lp_e.clamp(-LOG_OP_CLAMP, LOG_OP_CLAMP).exp();
    let (p0, dp0_rd, dp0_op) = baseline_prob_derivs(rd, op);
    (rd, drd, op, p0, dp0_rd, dp0_op, clamped)
}

impl BernoulliModel for TreatmentModel<'_> {
    fn dim(&self) -> usize {
        self.beta.k() + self.eta.k()
    }
    fn n(&self) -> usize {
        self.z.len()
    }
    fn response(&self, i: usize) -> f64 {
        self.d[i]
    }
    fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }
    #[inline]
    fn prob(&self, i: usize, params: &[f64], dp: &mut [f64]) -> f64 {
        let (rd, drd, op, p0, dp0_rd, dp0_op, clamped) =
            treatment_unit(self.beta, self.eta, self.link, i, params);
        let z = self.z[i];
        let kb = self.beta.k();
        let s_b = (dp0_rd + z) * drd;
        for (d, x) in dp[..kb].iter_mut().zip(self.beta.row(i)) {
            *d = s_b * x;
        }
        let s_e = if clamped { 0.0 } else { dp0_op * op };
        for (d, x) in dp[kb..].iter_mut().zip(self.eta.row(i)) {
            *d = s_e * x;
        }
        p0 + z * rd
    }
}

/// Likelihood of `Y | Z, X` with `delta = tanh(alpha'X)`, a fixed per-unit
/// `delta_d` and `op_y = exp(zeta'X)`; parameters are `(alpha, zeta)`.
pub struct OutcomeModel<'a> {
    pub alpha: &'a Design,
    pub zeta: &'a Design,
    pub delta_d: &'a [f64],
    pub z: &'a [f64],
    pub y: &'a [f64],
    pub weights: &'a [f64],
}

impl BernoulliModel for OutcomeModel<'_> {
    fn dim(&self) -> usize {
        self.alpha.k() + self.zeta.k()
    }
    fn n(&self) -> usize {
        self.z.len()
    }
    fn response(&self, i: usize) -> f64 {
        self.y[i]
    }
    fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }
    #[inline]
    fn prob(&self, i: usize, params: &[f64], dp: &mut [f64]) -> f64 {
        outcome_prob(
            self.alpha.row(i),
            self.zeta.row(i),
            self.delta_d[i],
            self.z[i],
            params,
            dp,
        )
    }
}

/// `P(Y=1 | Z=z, X)` under the outcome likelihood for one unit, with its
/// gradient in `(alpha, zeta)` written to `dp`.
#[inline]
pub fn outcome_prob(
    alpha_x: &[f64],
    zeta_x: &[f64],
    delta_d: f64,
    z: f64,
    params: &[f64],
    dp: &mut [f64],
) -> f64 {
    let ka = alpha_x.len();
    let lp_a: f64 = alpha_x.iter().zip(params).map(|(a, b)| a * b).sum();
    let delta = lp_a.tanh();
    let ddelta = 1.0 - delta * delta;
    let rd = delta * delta_d;
    let lp: f64 = zeta_x.iter().zip(&params[ka..]).map(|(a, b)| a * b).sum();
    let clamped = lp.abs() > LOG_OP_CLAMP;
    let op = lp.clamp(-LOG_OP_CLAMP, LOG_OP_CLAMP).exp();
    let (p0, dp0_rd, dp0_op) = baseline_prob_derivs(rd, op);
    let s_a = (dp0_rd + z) * delta_d * ddelta;
    for (d, x) in dp[..ka].iter_mut().zip(alpha_x) {
        *d = s_a * x;
    }
    let s_z = if clamped { 0.0 } else { dp0_op * op };
    for (d, x) in dp[ka..].iter_mut().zip(zeta_x) {
        *d = s_z * x;
    }
    p0 + z * rd
}

fn mle_fit<M: BernoulliModel>(
    model: &M,
    tag: NuisanceModel,
    label: &str,
    opts: MleOptions,
) -> Result<NuisanceFit> {
    let r = maximize(model, label, opts)?;
    Ok(NuisanceFit {
        coefficients: r.theta,
        model: tag,
        solver: "damped-newton",
        converged: r.converged,
        iterations: r.iterations,
        final_gradient_norm: r.gradient_norm,
        log_likelihood: Some(r.log_likelihood),
    })
}

/// Fitted instrument propensity, single model or ensemble.
#[derive(Debug, Clone)]
pub enum Propensity {
    Single {
        design: Design,
        fit: NuisanceFit,
    },
    Ensemble(EnsemblePropensity),
}

#[derive(Debug, Clone)]
pub struct EnsemblePropensity {
    pub designs: Vec<Design>,
    pub candidates: Vec<NuisanceFit>,
    /// Mixture weights and their fit record.
    pub fit: NuisanceFit,
    /// Set when the second-step normal equations were near-singular.
    pub collinear: bool,
}

impl EnsemblePropensity {
    pub fn weights(&self) -> &[f64] {
        &self.fit.coefficients
    }
}

impl Propensity {
    /// `P(Z = 1 | X_i)`.
    #[inline]
    pub fn prob_one(&self, i: usize) -> f64 {
        match self {
            Propensity::Single { design, fit } => expit(design.dot(i, &fit.coefficients)),
            Propensity::Ensemble(e) => {
                let mix: f64 = e
                    .designs
                    .iter()
                    .zip(&e.candidates)
                    .zip(e.weights())
                    .map(|((d, f), a)| a * expit(d.dot(i, &f.coefficients)))
                    .sum();
                mix.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
            }
        }
    }

    /// `f(z | X_i)`.
    #[inline]
    pub fn density(&self, i: usize, z: f64) -> f64 {
        let p = self.prob_one(i);
        if z == 1.0 {
            p
        } else {
            1.0 - p
        }
    }

    /// Warning text when the ensemble weights had to be ridge-regularized.
    pub fn ensemble_warning(&self) -> Option<String> {
        match self {
            Propensity::Ensemble(e) if e.collinear => {
                Some("ensemble candidates are nearly collinear; ridge-regularized weights".into())
            }
            _ => None,
        }
    }

    pub fn fits(&self) -> Vec<NuisanceFit> {
        match self {
            Propensity::Single { fit, .. } => vec![fit.clone()],
            Propensity::Ensemble(e) => {
                let mut v = e.candidates.clone();
                v.push(e.fit.clone());
                v
            }
        }
    }
}

/// Logistic-regression MLE of `Z` on the given covariate columns.
pub fn fit_propensity(ds: &Dataset, cols: &[usize]) -> Result<Propensity> {
    let design = ds.design(cols)?;
    let fit = fit_logistic(ds, &design)?;
    Ok(Propensity::Single { design, fit })
}

fn fit_logistic(ds: &Dataset, design: &Design) -> Result<NuisanceFit> {
    let model = LogisticModel {
        design,
        response: ds.z(),
        weights: ds.weights(),
    };
    mle_fit(&model, NuisanceModel::Propensity, "propensity", MleOptions::default())
}

/// Two-step ensemble: each candidate by [`fit_propensity`], then a no-intercept
/// weighted linear regression of `Z` on the candidates' fitted probabilities.
pub fn fit_propensity_ensemble(ds: &Dataset, candidates: &[Vec<usize>]) -> Result<Propensity> {
    if candidates.is_empty() {
        return Err(Error::Config("ensemble needs at least one candidate".into()));
    }
    let mut designs = Vec::with_capacity(candidates.len());
    let mut fits = Vec::with_capacity(candidates.len());
    for cols in candidates {
        let design = ds.design(cols)?;
        fits.push(fit_logistic(ds, &design)?);
        designs.push(design);
    }
    let j = candidates.len();
    let n = ds.n();
    let mut probs = Vec::with_capacity(n * j);
    for i in 0..n {
        for (d, f) in designs.iter().zip(&fits) {
            probs.push(expit(d.dot(i, &f.coefficients)));
        }
    }
    let fitted = Design::from_rows(j, probs);
    let collinear = {
        let mut g = DMatrix::<f64>::zeros(j, j);
        for i in 0..n {
            let r = fitted.row(i);
            for a in 0..j {
                for b in 0..j {
                    g[(a, b)] += ds.weights()[i] * r[a] * r[b] / n as f64;
                }
            }
        }
        let ev = g.symmetric_eigen().eigenvalues;
        let max = ev.iter().cloned().fold(0.0, f64::max);
        let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        min <= 1e-10 * max
    };
    let alpha = weighted_least_squares(
        &fitted,
        ds.z(),
        ds.weights(),
        |_| true,
        ENSEMBLE_RIDGE * n as f64,
        "ensemble propensity",
    )?;
    let mut mixture = EnsemblePropensity {
        designs,
        candidates: fits,
        fit: NuisanceFit {
            coefficients: alpha,
            model: NuisanceModel::Ensemble,
            solver: "ridge-least-squares",
            converged: true,
            iterations: 1,
            final_gradient_norm: 0.0,
            log_likelihood: None,
        },
        collinear,
    };
    mixture.fit.final_gradient_norm = ensemble_gradient(ds, &fitted, mixture.weights());
    Ok(Propensity::Ensemble(mixture))
}

fn ensemble_gradient(ds: &Dataset, fitted: &Design, alpha: &[f64]) -> f64 {
    let mut g = vec![0.0; alpha.len()];
    for i in 0..ds.n() {
        let r = ds.weights()[i] * (ds.z()[i] - fitted.dot(i, alpha));
        for (gj, x) in g.iter_mut().zip(fitted.row(i)) {
            *gj += r * x / ds.n() as f64;
        }
    }
    sup_norm(&g)
}

/// First-step fit `(beta, eta)` of the treatment likelihood.
#[derive(Debug, Clone)]
pub struct TreatmentFit {
    pub beta_design: Design,
    pub eta_design: Design,
    pub link: Link,
    pub fit: NuisanceFit,
}

impl TreatmentFit {
    pub fn beta(&self) -> &[f64] {
        &self.fit.coefficients[..self.beta_design.k()]
    }

    pub fn eta(&self) -> &[f64] {
        &self.fit.coefficients[self.beta_design.k()..]
    }

    #[inline]
    pub fn delta_d(&self, i: usize) -> f64 {
        self.link.apply(self.beta_design.dot(i, self.beta()))
    }

    #[inline]
    pub fn op_d(&self, i: usize) -> f64 {
        self.eta_design
            .dot(i, self.eta())
            .clamp(-LOG_OP_CLAMP, LOG_OP_CLAMP)
            .exp()
    }

    /// Plug-in `p0_d(X_i; beta, eta)`.
    #[inline]
    pub fn p0_d(&self, i: usize) -> f64 {
        baseline_prob(self.delta_d(i), self.op_d(i))
    }

    pub fn model<'a>(&'a self, ds: &'a Dataset) -> TreatmentModel<'a> {
        TreatmentModel {
            beta: &self.beta_design,
            eta: &self.eta_design,
            link: self.link,
            z: ds.z(),
            d: ds.d(),
            weights: ds.weights(),
        }
    }
}

pub fn fit_treatment_2mle(
    ds: &Dataset,
    beta_cols: &[usize],
    eta_cols: &[usize],
    link: Link,
    opts: MleOptions,
) -> Result<TreatmentFit> {
    if link == Link::Identity {
        return Err(Error::Config("delta_d link must be tanh or expit".into()));
    }
    let beta_design = ds.design(beta_cols)?;
    let eta_design = ds.design(eta_cols)?;
    let model = TreatmentModel {
        beta: &beta_design,
        eta: &eta_design,
        link,
        z: ds.z(),
        d: ds.d(),
        weights: ds.weights(),
    };
    let fit = mle_fit(&model, NuisanceModel::Treatment, "treatment likelihood", opts)?;
    Ok(TreatmentFit {
        beta_design,
        eta_design,
        link,
        fit,
    })
}

/// Second-step fit `(alpha, zeta)` of the outcome likelihood.
#[derive(Debug, Clone)]
pub struct OutcomeFit {
    pub alpha_design: Design,
    pub zeta_design: Design,
    /// `delta_d(X_i; beta_hat)` from the first step.
    pub delta_d: Vec<f64>,
    pub fit: NuisanceFit,
}

impl OutcomeFit {
    pub fn alpha(&self) -> &[f64] {
        &self.fit.coefficients[..self.alpha_design.k()]
    }

    pub fn zeta(&self) -> &[f64] {
        &self.fit.coefficients[self.alpha_design.k()..]
    }

    #[inline]
    pub fn delta(&self, i: usize) -> f64 {
        self.alpha_design.dot(i, self.alpha()).tanh()
    }

    /// Plug-in `p0_y(X_i; alpha, beta, zeta)`.
    #[inline]
    pub fn p0_y(&self, i: usize) -> f64 {
        let op = self
            .zeta_design
            .dot(i, self.zeta())
            .clamp(-LOG_OP_CLAMP, LOG_OP_CLAMP)
            .exp();
        baseline_prob(self.delta(i) * self.delta_d[i], op)
    }

    pub fn model<'a>(&'a self, ds: &'a Dataset) -> OutcomeModel<'a> {
        OutcomeModel {
            alpha: &self.alpha_design,
            zeta: &self.zeta_design,
            delta_d: &self.delta_d,
            z: ds.z(),
            y: ds.y(),
            weights: ds.weights(),
        }
    }
}

pub fn fit_outcome_2mle(
    ds: &Dataset,
    treatment: &TreatmentFit,
    alpha_cols: &[usize],
    zeta_cols: &[usize],
    opts: MleOptions,
) -> Result<OutcomeFit> {
    if !ds.binary_outcome() {
        return Err(Error::Config(
            "outcome likelihood requires a binary outcome".into(),
        ));
    }
    let alpha_design = ds.design(alpha_cols)?;
    let zeta_design = ds.design(zeta_cols)?;
    let delta_d: Vec<f64> = (0..ds.n()).map(|i| treatment.delta_d(i)).collect();
    let model = OutcomeModel {
        alpha: &alpha_design,
        zeta: &zeta_design,
        delta_d: &delta_d,
        z: ds.z(),
        y: ds.y(),
        weights: ds.weights(),
    };
    let fit = mle_fit(&model, NuisanceModel::Outcome, "outcome likelihood", opts)?;
    Ok(OutcomeFit {
        alpha_design,
        zeta_design,
        delta_d,
        fit,
    })
}

/// Linear model for `E[Y | Z = 0, X]`, fit by least squares in the `Z = 0` arm.
#[derive(Debug, Clone)]
pub struct BaselineFit {
    pub design: Design,
    pub fit: NuisanceFit,
}

impl BaselineFit {
    #[inline]
    pub fn p0_y(&self, i: usize) -> f64 {
        self.design.dot(i, &self.fit.coefficients)
    }
}

/// Continuous-outcome nuisances: `theta` is the treatment likelihood fit
/// (D is binary), `iota` the `Z = 0` arm least-squares fit.
pub fn fit_linear_nuisances(
    ds: &Dataset,
    beta_cols: &[usize],
    eta_cols: &[usize],
    link: Link,
    iota_cols: &[usize],
    opts: MleOptions,
) -> Result<(TreatmentFit, BaselineFit)> {
    let theta = fit_treatment_2mle(ds, beta_cols, eta_cols, link, opts)?;
    let iota = fit_outcome_baseline(ds, iota_cols)?;
    Ok((theta, iota))
}

pub fn fit_outcome_baseline(ds: &Dataset, cols: &[usize]) -> Result<BaselineFit> {
    let design = ds.design(cols)?;
    let z = ds.z();
    let coef = weighted_least_squares(
        &design,
        ds.y(),
        ds.weights(),
        |i| z[i] == 0.0,
        0.0,
        "outcome baseline",
    )?;
    let mut g = vec![0.0; design.k()];
    for i in (0..ds.n()).filter(|&i| z[i] == 0.0) {
        let r = ds.weights()[i] * (ds.y()[i] - design.dot(i, &coef));
        for (gj, x) in g.iter_mut().zip(design.row(i)) {
            *gj += r * x / ds.n() as f64;
        }
    }
    Ok(BaselineFit {
        design,
        fit: NuisanceFit {
            coefficients: coef,
            model: NuisanceModel::OutcomeBaseline,
            solver: "least-squares",
            converged: true,
            iterations: 1,
            final_gradient_norm: sup_norm(&g),
            log_likelihood: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ObservedSample;

    fn ds_from(rows: &[(u8, u8, f64, &[f64], f64)], binary: bool) -> Dataset {
        let p = rows[0].3.len();
        let samples = rows
            .iter()
            .map(|&(z, d, y, x, w)| ObservedSample {
                z,
                d,
                y,
                x: std::iter::once(1.0).chain(x.iter().cloned()).collect(),
                w,
            })
            .collect();
        let names = (0..p).map(|j| format!("x{}", j + 1)).collect();
        Dataset::from_samples(samples, names, binary).unwrap()
    }

    /// Weighted rows for a saturated one-binary-covariate law where, within
    /// stratum `s`, `P(Z=1)`, `p_z^D`, `p_z^Y` are given and `(D, Y)` are
    /// independent given `Z`.
    fn saturated(strata: &[(f64, f64, [f64; 2], [f64; 2])]) -> Dataset {
        let mut rows = Vec::new();
        let xs: [&[f64]; 2] = [&[0.0], &[1.0]];
        for (s, &(mass, pz, pd, py)) in strata.iter().enumerate() {
            for z in 0..2u8 {
                let fz = if z == 1 { pz } else { 1.0 - pz };
                for d in 0..2u8 {
                    let fd = if d == 1 { pd[z as usize] } else { 1.0 - pd[z as usize] };
                    for y in 0..2u8 {
                        let fy = if y == 1 { py[z as usize] } else { 1.0 - py[z as usize] };
                        rows.push((z, d, y as f64, xs[s], mass * fz * fd * fy));
                    }
                }
            }
        }
        ds_from(&rows, true)
    }

    #[test]
    fn balanced_propensity_is_zero() {
        let ds = ds_from(
            &[
                (0, 0, 0.0, &[0.3], 1.0),
                (1, 0, 0.0, &[0.3], 1.0),
                (0, 1, 1.0, &[-1.0], 1.0),
                (1, 1, 1.0, &[-1.0], 1.0),
            ],
            true,
        );
        let Propensity::Single { fit, .. } = fit_propensity(&ds, &[0, 1]).unwrap() else {
            unreachable!()
        };
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn saturated_propensity_matches_cell_frequencies() {
        let ds = saturated(&[
            (0.4, 0.3, [0.2, 0.7], [0.3, 0.5]),
            (0.6, 0.8, [0.4, 0.6], [0.5, 0.6]),
        ]);
        let prop = fit_propensity(&ds, &[0, 1]).unwrap();
        for i in 0..ds.n() {
            let expected = if ds.row(i)[1] == 0.0 { 0.3 } else { 0.8 };
            assert!((prop.prob_one(i) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_two_step_recovers_cell_probabilities() {
        let strata = [
            (0.4, 0.3, [0.2, 0.7], [0.3, 0.5]),
            (0.6, 0.8, [0.45, 0.25], [0.5, 0.4]),
        ];
        let ds = saturated(&strata);
        let t = fit_treatment_2mle(&ds, &[0, 1], &[0, 1], Link::Tanh, MleOptions::default()).unwrap();
        let o = fit_outcome_2mle(&ds, &t, &[0, 1], &[0, 1], MleOptions::default()).unwrap();
        for i in 0..ds.n() {
            let s = ds.row(i)[1] as usize;
            let (_, _, pd, py) = strata[s];
            assert!((t.p0_d(i) - pd[0]).abs() < 1e-8);
            assert!((t.p0_d(i) + t.delta_d(i) - pd[1]).abs() < 1e-8);
            assert!((o.p0_y(i) - py[0]).abs() < 1e-8);
            assert!((o.p0_y(i) + o.delta(i) * t.delta_d(i) - py[1]).abs() < 1e-8);
        }
        assert!(t.fit.final_gradient_norm < 1e-8);
        assert!(o.fit.final_gradient_norm < 1e-8);
    }

    #[test]
    fn optimum_dominates_start() {
        let ds = saturated(&[
            (0.5, 0.5, [0.1, 0.9], [0.2, 0.6]),
            (0.5, 0.4, [0.3, 0.6], [0.3, 0.4]),
        ]);
        let t = fit_treatment_2mle(&ds, &[0, 1], &[0, 1], Link::Tanh, MleOptions::default()).unwrap();
        let m = t.model(&ds);
        let at_zero = bernoulli_eval(&m, &[0.0; 4], None, None);
        assert!(t.fit.log_likelihood.unwrap() >= at_zero);
    }

    #[test]
    fn null_instrument_effect_gives_zero_beta() {
        // D independent of Z within each stratum, P(D=1|x) = 0.5
        let ds = saturated(&[
            (0.5, 0.5, [0.5, 0.5], [0.2, 0.6]),
            (0.5, 0.4, [0.5, 0.5], [0.3, 0.4]),
        ]);
        let t = fit_treatment_2mle(&ds, &[0, 1], &[0, 1], Link::Tanh, MleOptions::default()).unwrap();
        assert!(t.beta().iter().all(|b| b.abs() < 1e-8), "{:?}", t.beta());
    }

    #[test]
    fn expit_link_fit() {
        let strata = [
            (0.4, 0.3, [0.2, 0.7], [0.3, 0.5]),
            (0.6, 0.8, [0.25, 0.45], [0.5, 0.4]),
        ];
        let ds = saturated(&strata);
        let t = fit_treatment_2mle(&ds, &[0, 1], &[0, 1], Link::Expit, MleOptions::default()).unwrap();
        for i in 0..ds.n() {
            let (_, _, pd, _) = strata[ds.row(i)[1] as usize];
            assert!((t.delta_d(i) - (pd[1] - pd[0])).abs() < 1e-8);
        }
    }

    #[test]
    fn separation_is_reported() {
        let ds = ds_from(
            &[
                (0, 0, 0.0, &[-2.0], 1.0),
                (0, 1, 1.0, &[-1.0], 1.0),
                (1, 0, 0.0, &[1.0], 1.0),
                (1, 1, 1.0, &[2.0], 1.0),
            ],
            true,
        );
        let r = fit_propensity(&ds, &[0, 1]);
        assert!(
            matches!(r, Err(Error::Separation { .. }) | Err(Error::NonConvergence { .. })),
            "{r:?}"
        );
    }

    #[test]
    fn collinear_design_is_singular() {
        let ds = ds_from(
            &[
                (0, 0, 0.0, &[1.0, 2.0], 1.0),
                (1, 1, 1.0, &[2.0, 4.0], 1.0),
                (0, 1, 0.0, &[3.0, 6.0], 1.0),
                (1, 0, 1.0, &[4.0, 8.0], 1.0),
            ],
            true,
        );
        assert!(matches!(
            fit_propensity(&ds, &[0, 1, 2]),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn baseline_interpolates_noiseless_arm() {
        let xs = [-1.0, 0.0, 0.5, 2.0, 3.0];
        let rows: Vec<(u8, u8, f64, &[f64], f64)> = xs
            .iter()
            .enumerate()
            .map(|(k, x)| (if k == 2 { 1 } else { 0 }, 0, if k == 2 { 99.0 } else { 1.5 - 2.0 * x }, std::slice::from_ref(x), 1.0))
            .collect();
        let ds = ds_from(&rows, false);
        let b = fit_outcome_baseline(&ds, &[0, 1]).unwrap();
        assert!((b.fit.coefficients[0] - 1.5).abs() < 1e-12);
        assert!((b.fit.coefficients[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn baseline_constant_outcome() {
        let xs = [-1.0, 0.0, 0.5, 2.0];
        let rows: Vec<(u8, u8, f64, &[f64], f64)> = xs
            .iter()
            .enumerate()
            .map(|(k, x)| ((k % 2) as u8, 0, 4.0, std::slice::from_ref(x), 1.0))
            .collect();
        let ds = ds_from(&rows, false);
        let b = fit_outcome_baseline(&ds, &[0, 1]).unwrap();
        assert!((b.fit.coefficients[0] - 4.0).abs() < 1e-12);
        assert!(b.fit.coefficients[1].abs() < 1e-12);
    }

    #[test]
    fn single_candidate_ensemble_matches_propensity() {
        let ds = saturated(&[
            (0.4, 0.3, [0.2, 0.7], [0.3, 0.5]),
            (0.6, 0.8, [0.4, 0.6], [0.5, 0.6]),
        ]);
        let single = fit_propensity(&ds, &[0, 1]).unwrap();
        let Propensity::Ensemble(e) = fit_propensity_ensemble(&ds, &[vec![0, 1]]).unwrap() else {
            unreachable!()
        };
        assert!((e.weights()[0] - 1.0).abs() < 1e-6);
        let Propensity::Single { fit, .. } = &single else { unreachable!() };
        assert_eq!(e.candidates[0].coefficients, fit.coefficients);
    }

    #[test]
    fn ensemble_probabilities_are_clamped() {
        let ds = saturated(&[
            (0.4, 0.3, [0.2, 0.7], [0.3, 0.5]),
            (0.6, 0.8, [0.4, 0.6], [0.5, 0.6]),
        ]);
        let e = fit_propensity_ensemble(&ds, &[vec![0, 1], vec![0]]).unwrap();
        for i in 0..ds.n() {
            let p = e.prob_one(i);
            assert!((PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p));
        }
    }
}
