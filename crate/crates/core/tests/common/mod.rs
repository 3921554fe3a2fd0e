#![allow(dead_code)]

use ivate::{Dataset, ObservedSample};

/// One covariate stratum of an enumerated population.
#[derive(Debug, Clone, Copy)]
pub struct Stratum {
    pub mass: f64,
    /// `P(Z = 1 | x)`
    pub pz: f64,
    /// `P(D = 1 | Z = z, x)` for `z = 0, 1`
    pub pd: [f64; 2],
    /// `P(Y = 1 | Z = z, x)` for `z = 0, 1`
    pub py: [f64; 2],
}

impl Stratum {
    pub fn wald(&self) -> f64 {
        (self.py[1] - self.py[0]) / (self.pd[1] - self.pd[0])
    }
}

/// Two strata, `x = 0` and `x = 1`, with heterogeneous effects.
pub const STRATA: [Stratum; 2] = [
    Stratum {
        mass: 0.4,
        pz: 0.3,
        pd: [0.2, 0.7],
        py: [0.3, 0.5],
    },
    Stratum {
        mass: 0.6,
        pz: 0.65,
        pd: [0.45, 0.25],
        py: [0.5, 0.42],
    },
];

/// Weighted rows reproducing the law of `strata` exactly, with `x_s = s`.
/// `D` and `Y` are independent given `(Z, X)`.
pub fn enumerated(strata: &[Stratum]) -> Dataset {
    let mut rows = Vec::new();
    for (s, st) in strata.iter().enumerate() {
        for z in 0..2u8 {
            let fz = if z == 1 { st.pz } else { 1.0 - st.pz };
            for d in 0..2u8 {
                let pd = st.pd[z as usize];
                let fd = if d == 1 { pd } else { 1.0 - pd };
                for y in 0..2u8 {
                    let py = st.py[z as usize];
                    let fy = if y == 1 { py } else { 1.0 - py };
                    rows.push(ObservedSample {
                        z,
                        d,
                        y: y as f64,
                        x: vec![1.0, s as f64],
                        w: st.mass * fz * fd * fy,
                    });
                }
            }
        }
    }
    Dataset::from_samples(rows, vec!["x".into()], true).unwrap()
}

/// `sum_x P(x) delta_y(x) / delta_d(x)`.
pub fn enumerated_truth(strata: &[Stratum]) -> f64 {
    let total: f64 = strata.iter().map(|s| s.mass).sum();
    strata.iter().map(|s| s.mass * s.wald()).sum::<f64>() / total
}

/// Root of `p0 (p0 + r) = op (1 - p0)(1 - p0 - r)` by bisection.
pub fn bisect_baseline(r: f64, op: f64) -> f64 {
    let f = |p: f64| p * (p + r) - op * (1.0 - p) * (1.0 - p - r);
    let (mut lo, mut hi) = ((-r).max(0.0), (1.0 - r).min(1.0));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
