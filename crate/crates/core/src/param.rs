//! Variation-independent parameterization of the binary treatment and binary
//! outcome likelihoods.
//!
//! At each covariate value the four cell probabilities
//! `(p0_d, p1_d, p0_y, p1_y)` are re-expressed through the Wald estimand
//! `delta`, the instrument-treatment risk difference `delta_d` and the two odds
//! products `op_d`, `op_y`. The map is smooth and invertible between
//! `(-1,1)^2 x (0,inf)^2` and `(0,1)^4`, so every combination of the four
//! parameters is admissible.
//!
//! For a risk difference `r` and odds product `op`, the baseline probability
//! `p0` is the root in `(max(0,-r), min(1,1-r))` of
//!
//! ```text
//! (1 - op) p0^2 + (r + op (2 - r)) p0 - op (1 - r) = 0
//! ```
//!
//! The textbook root `(-b + sqrt(b^2 - 4ac)) / 2a` is 0/0 at `op = 1`; the
//! conjugate form `2 op (1 - r) / (b + sqrt(..))` used for `b >= 0` is exact
//! there and reduces to `(1 - r) / 2`.

use crate::error::{Error, Result};

/// Discriminants this far below zero are treated as rounding noise.
const SQRT_CLAMP: f64 = -1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldParams {
    pub delta: f64,
    pub delta_d: f64,
    pub op_d: f64,
    pub op_y: f64,
}

impl WaldParams {
    pub fn new(delta: f64, delta_d: f64, op_d: f64, op_y: f64) -> WaldParams {
        WaldParams {
            delta,
            delta_d,
            op_d,
            op_y,
        }
    }

    /// Instrument-outcome risk difference `delta * delta_d`.
    pub fn delta_y(&self) -> f64 {
        self.delta * self.delta_d
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > -1.0 && v < 1.0;
        if !open(self.delta) || !open(self.delta_d) {
            return Err(Error::Domain(format!(
                "delta = {}, delta_d = {} must lie in (-1, 1)",
                self.delta, self.delta_d
            )));
        }
        if !(self.op_d > 0.0 && self.op_d.is_finite() && self.op_y > 0.0 && self.op_y.is_finite()) {
            return Err(Error::Domain(format!(
                "odds products ({}, {}) must be positive and finite",
                self.op_d, self.op_y
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellProbs {
    pub p0_d: f64,
    pub p1_d: f64,
    pub p0_y: f64,
    pub p1_y: f64,
}

impl CellProbs {
    pub fn new(p0_d: f64, p1_d: f64, p0_y: f64, p1_y: f64) -> CellProbs {
        CellProbs {
            p0_d,
            p1_d,
            p0_y,
            p1_y,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p0_d", self.p0_d),
            ("p1_d", self.p1_d),
            ("p0_y", self.p0_y),
            ("p1_y", self.p1_y),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Baseline probability `p0` for risk difference `rd` and odds product `op`.
///
/// Total on the closed domain `[-1,1] x [0,inf)`, which lets optimizers probe
/// saturated links without tripping domain checks.
#[inline]
pub fn baseline_prob(rd: f64, op: f64) -> f64 {
    let a = 1.0 - op;
    let b = rd + op * (2.0 - rd);
    let c = op * (1.0 - rd);
    let mut disc = b * b + 4.0 * a * c;
    if disc < 0.0 && disc > SQRT_CLAMP {
        disc = 0.0;
    }
    let s = disc.sqrt();
    if b >= 0.0 {
        let den = b + s;
        if den == 0.0 {
            0.0
        } else {
            2.0 * c / den
        }
    } else {
        // b < 0 forces op < 1/3, so `a` is well away from zero
        (s - b) / (2.0 * a)
    }
}

/// `p0` together with its partial derivatives with respect to `rd` and `op`,
/// by implicit differentiation of `p0 (p0 + rd) = op (1 - p0)(1 - p0 - rd)`.
#[inline]
pub fn baseline_prob_derivs(rd: f64, op: f64) -> (f64, f64, f64) {
    let p0 = baseline_prob(rd, op);
    let fp = 2.0 * p0 + rd + op * (2.0 - 2.0 * p0 - rd);
    if fp <= 0.0 {
        return (p0, 0.0, 0.0);
    }
    let d_rd = -(p0 + op * (1.0 - p0)) / fp;
    let d_op = (1.0 - p0) * (1.0 - p0 - rd) / fp;
    (p0, d_rd, d_op)
}

/// Closed-form map `(delta, delta_d, op_d, op_y) -> (p0_d, p1_d, p0_y, p1_y)`.
pub fn map_forward(wp: &WaldParams) -> Result<CellProbs> {
    wp.validate()?;
    let p0_d = baseline_prob(wp.delta_d, wp.op_d);
    let dy = wp.delta_y();
    let p0_y = baseline_prob(dy, wp.op_y);
    Ok(CellProbs {
        p0_d,
        p1_d: p0_d + wp.delta_d,
        p0_y,
        p1_y: p0_y + dy,
    })
}

/// Odds product `p1 p0 / ((1 - p1)(1 - p0))`.
pub fn odds_product(p0: f64, p1: f64) -> f64 {
    p1 * p0 / ((1.0 - p1) * (1.0 - p0))
}

/// Inverse of [`map_forward`]. Fails when `p1_d == p0_d`, where the Wald ratio
/// is undefined.
pub fn map_inverse(cp: &CellProbs) -> Result<WaldParams> {
    cp.validate()?;
    let delta_d = cp.p1_d - cp.p0_d;
    if delta_d == 0.0 {
        return Err(Error::ZeroDenominator(
            "p1_d == p0_d: instrument has no effect on treatment here".into(),
        ));
    }
    Ok(WaldParams {
        delta: (cp.p1_y - cp.p0_y) / delta_d,
        delta_d,
        op_d: odds_product(cp.p0_d, cp.p1_d),
        op_y: odds_product(cp.p0_y, cp.p1_y),
    })
}

/// Link from a linear predictor to a risk-difference scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Link {
    /// `(-1, 1)`-valued.
    #[default]
    Tanh,
    /// `(0, 1)`-valued, for a treatment effect assumed monotone.
    Expit,
    /// Unrestricted; only for the continuous-outcome Wald model.
    Identity,
}

impl Link {
    #[inline]
    pub fn apply(self, eta: f64) -> f64 {
        match self {
            Link::Tanh => eta.tanh(),
            Link::Expit => expit(eta),
            Link::Identity => eta,
        }
    }

    #[inline]
    pub fn derivative(self, eta: f64) -> f64 {
        match self {
            Link::Tanh => {
                let t = eta.tanh();
                1.0 - t * t
            }
            Link::Expit => {
                let e = expit(eta);
                e * (1.0 - e)
            }
            Link::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Link::Tanh => "tanh",
            Link::Expit => "expit",
            Link::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Link> {
        match s {
            "tanh" => Ok(Link::Tanh),
            "expit" | "logistic" => Ok(Link::Expit),
            "identity" | "linear" => Ok(Link::Identity),
            _ => Err(Error::Config(format!("unknown link '{s}'"))),
        }
    }
}

#[inline]
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn link_delta(kind: Link, eta: f64) -> f64 {
    kind.apply(eta)
}

/// Odds-product link `exp(eta)`.
#[inline]
pub fn link_op(eta: f64) -> f64 {
    eta.exp()
}
