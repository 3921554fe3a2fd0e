//! Root finding for stacked estimating equations and sandwich variances.
//!
//! Every system is averaged with the dataset weights, `P_n m = n^-1 sum w_i m_i`,
//! which under the mean-one weight convention is the weighted empirical mean.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{solve_square, sup_norm};

pub const SOLVE_TOL: f64 = 1e-9;
pub const SOLVE_MAX_ITER: usize = 500;
pub const RESTART_SHIFT: f64 = 0.1;
/// Iteration cap of the least-squares refinement run after Newton fails.
pub const LEAST_SQUARES_MAX_ITER: usize = 200;
/// A Newton run stalls when `STALL_WINDOW` iterations shrink the residual
/// 2-norm by less than the fraction `STALL_GAIN`.
pub const STALL_WINDOW: usize = 10;
pub const STALL_GAIN: f64 = 1e-4;

/// Per-unit residual `m(O_i; theta)`.
pub trait EstimatingSystem: Sync {
    fn dim(&self) -> usize;
    fn label(&self) -> &str;
    fn unit_residual(&self, i: usize, theta: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub theta_hat: Vec<f64>,
    pub residual_norm: f64,
    pub jacobian: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// `P_n m(O; theta)`, summed in index order.
pub fn mean_residual<S: EstimatingSystem + ?Sized>(sys: &S, ds: &Dataset, theta: &[f64]) -> Vec<f64> {
    let q = sys.dim();
    let mut acc = vec![0.0; q];
    let mut m = vec![0.0; q];
    let w = ds.weights();
    for i in 0..ds.n() {
        sys.unit_residual(i, theta, &mut m);
        for (a, v) in acc.iter_mut().zip(&m) {
            *a += w[i] * v;
        }
    }
    let n = ds.n() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

fn fd_step(t: f64) -> f64 {
    (1e-6 * t.abs()).max(1e-6)
}

/// Central-difference Jacobian of `P_n m` at `theta`.
pub fn jacobian<S: EstimatingSystem + ?Sized>(sys: &S, ds: &Dataset, theta: &[f64]) -> DMatrix<f64> {
    let q = sys.dim();
    let mut jac = DMatrix::<f64>::zeros(q, q);
    let mut t = theta.to_vec();
    for j in 0..q {
        let h = fd_step(theta[j]);
        t[j] = theta[j] + h;
        let up = mean_residual(sys, ds, &t);
        t[j] = theta[j] - h;
        let dn = mean_residual(sys, ds, &t);
        t[j] = theta[j];
        for a in 0..q {
            jac[(a, j)] = (up[a] - dn[a]) / (2.0 * h);
        }
    }
    jac
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Newton direction `-J^{-1} r`, with Levenberg damping if `J` is singular.
fn newton_direction(jac: &DMatrix<f64>, r: &[f64], label: &str) -> Result<Vec<f64>> {
    let neg: Vec<f64> = r.iter().map(|v| -v).collect();
    if let Some(s) = solve_square(jac, &neg) {
        return Ok(s);
    }
    let jt = jac.transpose();
    let jtj = &jt * jac;
    let jtr = (&jt * nalgebra::DVector::from_column_slice(&neg)).as_slice().to_vec();
    let q = r.len();
    let mut lambda = 1e-8;
    while lambda <= 1e2 * (1.0 + 1e-12) {
        let mut m = jtj.clone();
        for a in 0..q {
            m[(a, a)] += lambda * jtj[(a, a)].max(1.0);
        }
        if let Some(s) = solve_square(&m, &jtr) {
            return Ok(s);
        }
        lambda *= 10.0;
    }
    Err(Error::Singular {
        label: label.to_string(),
        detail: "Jacobian singular after Levenberg damping".into(),
    })
}

struct Attempt {
    theta: Vec<f64>,
    norm: f64,
    iterations: usize,
    converged: bool,
}

fn newton_run<S: EstimatingSystem + ?Sized>(sys: &S, ds: &Dataset, init: &[f64]) -> Result<Attempt> {
    let mut theta = init.to_vec();
    let mut r = mean_residual(sys, ds, &theta);
    let mut norm = sup_norm(&r);
    if !norm.is_finite() {
        return Ok(Attempt {
            theta,
            norm,
            iterations: 0,
            converged: false,
        });
    }
    let mut trial = theta.clone();
    let mut history = Vec::with_capacity(SOLVE_MAX_ITER);
    for iter in 0..SOLVE_MAX_ITER {
        let merit = norm2(&r);
        history.push(merit);
        if iter >= STALL_WINDOW && merit > (1.0 - STALL_GAIN) * history[iter - STALL_WINDOW] {
            return Ok(Attempt {
                theta,
                norm,
                iterations: iter,
                converged: norm < SOLVE_TOL,
            });
        }
        if norm < SOLVE_TOL {
            return Ok(Attempt {
                theta,
                norm,
                iterations: iter,
                converged: true,
            });
        }
        let jac = jacobian(sys, ds, &theta);
        let step = newton_direction(&jac, &r, sys.label())?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            for j in 0..theta.len() {
                trial[j] = theta[j] + t * step[j];
            }
            let rt = mean_residual(sys, ds, &trial);
            let nt = norm2(&rt);
            if nt.is_finite() && nt < merit {
                theta.copy_from_slice(&trial);
                r = rt;
                norm = sup_norm(&r);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Ok(Attempt {
                theta,
                norm,
                iterations: iter,
                converged: false,
            });
        }
    }
    Ok(Attempt {
        converged: norm < SOLVE_TOL,
        theta,
        norm,
        iterations: SOLVE_MAX_ITER,
    })
}

/// Solves `P_n m(O; theta) = 0` by damped Newton with a finite-difference
/// Jacobian. A stalled run is restarted once from `init + 0.1`.
pub fn solve<S: EstimatingSystem + ?Sized>(sys: &S, ds: &Dataset, init: &[f64]) -> Result<SolveResult> {
    if init.len() != sys.dim() {
        return Err(Error::Config(format!(
            "{}: initial value has length {}, expected {}",
            sys.label(),
            init.len(),
            sys.dim()
        )));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{}: non-finite initial value", sys.label())));
    }
    let first = newton_run(sys, ds, init)?;
    let best = if first.converged {
        first
    } else {
        let shifted: Vec<f64> = init.iter().map(|v| v + RESTART_SHIFT).collect();
        let second = newton_run(sys, ds, &shifted)?;
        if second.converged {
            Attempt {
                iterations: first.iterations + second.iterations,
                ..second
            }
        } else {
            let spent = first.iterations + second.iterations;
            let better = if second.norm < first.norm || !first.norm.is_finite() {
                second
            } else {
                first
            };
            let refined = least_squares_run(sys, ds, &better.theta);
            let iterations = spent + refined.iterations;
            if refined.converged {
                return Ok(SolveResult {
                    jacobian: jacobian(sys, ds, &refined.theta),
                    theta_hat: refined.theta,
                    residual_norm: refined.norm,
                    converged: true,
                    iterations,
                });
            }
            let better = if refined.norm <= better.norm || !better.norm.is_finite() {
                refined
            } else {
                better
            };
            return Err(Error::NonConvergence {
                label: sys.label().to_string(),
                iterations,
                residual_norm: better.norm,
                best: better.theta,
            });
        }
    };
    Ok(SolveResult {
        jacobian: jacobian(sys, ds, &best.theta),
        theta_hat: best.theta,
        residual_norm: best.norm,
        converged: true,
        iterations: best.iterations,
    })
}

/// Like [`solve`], but a system without a numerical root yields the point of
/// smallest residual found, with `converged = false`.
pub fn solve_or_best<S: EstimatingSystem + ?Sized>(
    sys: &S,
    ds: &Dataset,
    init: &[f64],
) -> Result<SolveResult> {
    match solve(sys, ds, init) {
        Err(Error::NonConvergence {
            iterations,
            residual_norm,
            best,
            ..
        }) if residual_norm.is_finite() => Ok(SolveResult {
            jacobian: jacobian(sys, ds, &best),
            theta_hat: best,
            residual_norm,
            converged: false,
            iterations,
        }),
        other => other,
    }
}

/// Levenberg-Marquardt minimization of `|P_n m|^2`, used when Newton stalls
/// because the system has no root in reach.
fn least_squares_run<S: EstimatingSystem + ?Sized>(sys: &S, ds: &Dataset, start: &[f64]) -> Attempt {
    let q = sys.dim();
    let mut theta = start.to_vec();
    let mut r = mean_residual(sys, ds, &theta);
    let mut merit = norm2(&r);
    let mut lambda = -1.0;
    let mut iterations = 0;
    if !merit.is_finite() {
        return Attempt {
            theta,
            norm: f64::INFINITY,
            iterations,
            converged: false,
        };
    }
    while iterations < LEAST_SQUARES_MAX_ITER && sup_norm(&r) >= SOLVE_TOL {
        iterations += 1;
        let jac = jacobian(sys, ds, &theta);
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * nalgebra::DVector::from_column_slice(&r);
        if lambda < 0.0 {
            lambda = 1e-3 * (0..q).map(|a| jtj[(a, a)]).fold(0.0, f64::max).max(1e-12);
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut m = jtj.clone();
            for a in 0..q {
                m[(a, a)] += lambda * jtj[(a, a)].max(1e-12);
            }
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            if let Some(step) = solve_square(&m, &neg) {
                let trial: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + s).collect();
                let rt = mean_residual(sys, ds, &trial);
                let nt = norm2(&rt);
                if nt.is_finite() && nt < merit {
                    let gain = (merit - nt) / merit;
                    theta = trial;
                    r = rt;
                    merit = nt;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = gain > 1e-8;
                    break;
                }
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    let norm = sup_norm(&r);
    Attempt {
        converged: norm < SOLVE_TOL,
        theta,
        norm,
        iterations,
    }
}

/// `n^-1 A^-1 B A^-T` with `A = dP_n m / dtheta` and `B = P_n w^2 m m'`.
pub fn sandwich_variance<S: EstimatingSystem + ?Sized>(
    sys: &S,
    ds: &Dataset,
    theta_hat: &[f64],
) -> Result<DMatrix<f64>> {
    let q = sys.dim();
    let a = jacobian(sys, ds, theta_hat);
    let a_inv = a.clone().try_inverse().filter(|m| m.iter().all(|v| v.is_finite()));
    let Some(a_inv) = a_inv else {
        return Err(Error::Singular {
            label: sys.label().to_string(),
            detail: "bread matrix not invertible; use the bootstrap instead".into(),
        });
    };
    let mut b = DMatrix::<f64>::zeros(q, q);
    let mut m = vec![0.0; q];
    let w = ds.weights();
    for i in 0..ds.n() {
        sys.unit_residual(i, theta_hat, &mut m);
        let wi2 = w[i] * w[i];
        for r in 0..q {
            for c in 0..=r {
                b[(r, c)] += wi2 * m[r] * m[c];
            }
        }
    }
    let n = ds.n() as f64;
    for r in 0..q {
        for c in 0..=r {
            b[(r, c)] /= n;
            b[(c, r)] = b[(r, c)];
        }
    }
    let v = &a_inv * b * a_inv.transpose() / n;
    Ok((&v + v.transpose()) * 0.5)
}

/// A system built from a closure, handy for ad-hoc equations and tests.
pub struct FnSystem<F> {
    pub dim: usize,
    pub label: String,
    pub f: F,
}

impl<F: Fn(usize, &[f64], &mut [f64]) + Sync> EstimatingSystem for FnSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn label(&self) -> &str {
        &self.label
    }
    fn unit_residual(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        (self.f)(i, theta, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ObservedSample;

    fn ds_y(ys: &[f64], ws: &[f64]) -> Dataset {
        let samples = ys
            .iter()
            .zip(ws)
            .enumerate()
            .map(|(i, (&y, &w))| ObservedSample {
                z: (i % 2) as u8,
                d: 0,
                y,
                x: vec![1.0],
                w,
            })
            .collect();
        Dataset::from_samples(samples, vec![], false).unwrap()
    }

    #[test]
    fn linear_system_one_step() {
        let ds = ds_y(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        let sys = FnSystem {
            dim: 2,
            label: "linear".into(),
            f: |_: usize, t: &[f64], out: &mut [f64]| {
                out[0] = 2.0 * t[0] + t[1] - 3.0;
                out[1] = t[0] - t[1];
            },
        };
        let r = solve(&sys, &ds, &[0.0, 0.0]).unwrap();
        assert!(r.iterations <= 1);
        assert!((r.theta_hat[0] - 1.0).abs() < 1e-8);
        assert!((r.theta_hat[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn infeasible_system_fails() {
        let ds = ds_y(&[0.0, 1.0], &[1.0, 1.0]);
        let sys = FnSystem {
            dim: 1,
            label: "constant".into(),
            f: |_: usize, _: &[f64], out: &mut [f64]| out[0] = 1.0,
        };
        assert!(matches!(
            solve(&sys, &ds, &[0.0]),
            Err(Error::NonConvergence { .. }) | Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn sample_mean_variance() {
        let ys = [1.0, 4.0, 2.0, 7.0, 3.0];
        let ds = ds_y(&ys, &[1.0; 5]);
        let y = ds.y().to_vec();
        let sys = FnSystem {
            dim: 1,
            label: "mean".into(),
            f: move |i: usize, t: &[f64], out: &mut [f64]| out[0] = y[i] - t[0],
        };
        let r = solve(&sys, &ds, &[0.0]).unwrap();
        let mean = 17.0 / 5.0;
        assert!((r.theta_hat[0] - mean).abs() < 1e-12);
        let v = sandwich_variance(&sys, &ds, &r.theta_hat).unwrap();
        let var: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((v[(0, 0)] - var / 5.0).abs() < 1e-9);
    }

    #[test]
    fn residual_norm_is_reproducible() {
        let ys = [1.0, 4.0, 2.0, 7.0];
        let ds = ds_y(&ys, &[1.0; 4]);
        let y = ds.y().to_vec();
        let sys = FnSystem {
            dim: 1,
            label: "cubic".into(),
            f: move |i: usize, t: &[f64], out: &mut [f64]| out[0] = y[i] - t[0].powi(3),
        };
        let r = solve(&sys, &ds, &[1.0]).unwrap();
        assert_eq!(sup_norm(&mean_residual(&sys, &ds, &r.theta_hat)), r.residual_norm);
    }

    #[test]
    fn sandwich_is_symmetric() {
        let ys = [1.0, 4.0, 2.0, 7.0, 3.0, 0.5];
        let ds = ds_y(&ys, &[1.0, 2.0, 1.0, 0.5, 1.0, 1.5]);
        let y = ds.y().to_vec();
        let sys = FnSystem {
            dim: 2,
            label: "moments".into(),
            f: move |i: usize, t: &[f64], out: &mut [f64]| {
                out[0] = y[i] - t[0];
                out[1] = (y[i] - t[0]).powi(2) - t[1];
            },
        };
        let r = solve(&sys, &ds, &[0.0, 1.0]).unwrap();
        let v = sandwich_variance(&sys, &ds, &r.theta_hat).unwrap();
        assert_eq!(v[(0, 1)], v[(1, 0)]);
        assert!(v.symmetric_eigen().eigenvalues.iter().all(|e| *e > -1e-12));
    }
}
