//! Screens for the testable implications of the IV model.
//!
//! Within every stratum the four sums
//! `P(Y=y, D=d | Z=1) + P(Y=1-y, D=d | Z=0)` must not exceed one. Each sum is
//! compared with `1 + tol`, where `tol` is by default two binomial standard
//! errors computed with Kish effective arm sizes.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::quantile;

#[derive(Debug, Clone, PartialEq)]
pub enum Stratification {
    /// One marginal stratum.
    None,
    /// Strata are the distinct value combinations of these columns.
    Columns(Vec<usize>),
    /// Strata are `bins` equal-count bins of one column.
    QuantileBins { column: usize, bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    StandardErrors(f64),
    Fixed(f64),
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::StandardErrors(2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratumReport {
    pub id: String,
    /// `lhs[y][d]`.
    pub lhs: [[f64; 2]; 2],
    pub tolerance: [[f64; 2]; 2],
    /// `max(lhs) - 1`.
    pub max_slack: f64,
    pub violation: bool,
    /// Share of the total weight in this stratum.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvInequalityReport {
    pub strata: Vec<StratumReport>,
    /// Strata without both instrument arms.
    pub skipped: Vec<String>,
    pub violation: bool,
}

impl IvInequalityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stratum,y,d,lhs,tolerance,violation,weight\n");
        for st in &self.strata {
            for y in 0..2 {
                for d in 0..2 {
                    let l = st.lhs[y][d];
                    let t = st.tolerance[y][d];
                    s.push_str(&format!(
                        "{},{y},{d},{l:.6},{t:.6},{},{:.6}\n",
                        st.id,
                        l > 1.0 + t,
                        st.weight
                    ));
                }
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>9} {:>7}\n",
            "stratum", "(0,0)", "(0,1)", "(1,0)", "(1,1)", "slack", "flag"
        );
        for st in &self.strata {
            s.push_str(&format!(
                "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>7}\n",
                st.id,
                st.lhs[0][0],
                st.lhs[0][1],
                st.lhs[1][0],
                st.lhs[1][1],
                st.max_slack,
                if st.violation { "VIOLATE" } else { "ok" }
            ));
        }
        for k in &self.skipped {
            s.push_str(&format!("{k:<24} skipped: one instrument arm is empty\n"));
        }
        s.push_str(&format!(
            "status: {}\n",
            if self.violation { "violation" } else { "no violation" }
        ));
        s
    }
}

fn stratum_keys(ds: &Dataset, strat: &Stratification) -> Result<Vec<String>> {
    let n = ds.n();
    match strat {
        Stratification::None => Ok(vec!["all".to_string(); n]),
        Stratification::Columns(cols) => {
            if let Some(&c) = cols.iter().find(|&&c| c >= ds.p()) {
                return Err(Error::Config(format!("stratification column {c} out of range")));
            }
            let names = ds.column_names();
            Ok((0..n)
                .map(|i| {
                    let row = ds.row(i);
                    cols.iter()
                        .map(|&c| format!("{}={}", names[c], row[c]))
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .collect())
        }
        Stratification::QuantileBins { column, bins } => {
            if *column >= ds.p() || *bins == 0 {
                return Err(Error::Config("invalid quantile-bin stratification".into()));
            }
            let vals: Vec<f64> = (0..n).map(|i| ds.row(i)[*column]).collect();
            if vals.iter().any(|v| v.is_nan()) {
                return Err(Error::Imputation("stratification column has missing values".into()));
            }
            let cuts: Vec<f64> = (1..*bins)
                .map(|b| quantile(&vals, b as f64 / *bins as f64))
                .collect::<Result<_>>()?;
            let width = bins.to_string().len();
            Ok(vals
                .iter()
                .map(|v| {
                    let b = cuts.iter().filter(|&&c| *v > c).count();
                    format!("{}#bin{:0width$}", ds.column_names()[*column], b)
                })
                .collect())
        }
    }
}

/// Evaluates the instrumental inequalities within each stratum.
pub fn test_iv_inequalities(
    ds: &Dataset,
    strat: &Stratification,
    tol: Tolerance,
) -> Result<IvInequalityReport> {
    if !ds.binary_outcome() {
        return Err(Error::Config("instrumental inequalities need a binary outcome".into()));
    }
    let keys = stratum_keys(ds, strat)?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k.as_str()).or_default().push(i);
    }
    let total_w: f64 = ds.weights().iter().sum();
    let mut strata = Vec::new();
    let mut skipped = Vec::new();
    for (key, rows) in groups {
        // cell[z][y][d] weight sums and per-arm weight and squared-weight sums
        let mut cell = [[[0.0; 2]; 2]; 2];
        let mut arm = [0.0; 2];
        let mut arm2 = [0.0; 2];
        for &i in &rows {
            let u = ds.unit(i);
            let (z, y, d) = (u.z as usize, u.y as usize, u.d as usize);
            cell[z][y][d] += u.w;
            arm[z] += u.w;
            arm2[z] += u.w * u.w;
        }
        if arm[0] == 0.0 || arm[1] == 0.0 {
            skipped.push(key.to_string());
            continue;
        }
        let n_eff = [arm[0] * arm[0] / arm2[0], arm[1] * arm[1] / arm2[1]];
        let mut lhs = [[0.0; 2]; 2];
        let mut tl = [[0.0; 2]; 2];
        for y in 0..2 {
            for d in 0..2 {
                let p1 = cell[1][y][d] / arm[1];
                let p0 = cell[0][1 - y][d] / arm[0];
                lhs[y][d] = p1 + p0;
                tl[y][d] = match tol {
                    Tolerance::Fixed(t) => t,
                    Tolerance::StandardErrors(k) => {
                        k * (p1 * (1.0 - p1) / n_eff[1] + p0 * (1.0 - p0) / n_eff[0]).sqrt()
                    }
                };
            }
        }
        let max_lhs = lhs.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let violation = (0..2).any(|y| (0..2).any(|d| lhs[y][d] > 1.0 + tl[y][d]));
        let w: f64 = rows.iter().map(|&i| ds.weights()[i]).sum();
        strata.push(StratumReport {
            id: key.to_string(),
            lhs,
            tolerance: tl,
            max_slack: max_lhs - 1.0,
            violation,
            weight: w / total_w,
        });
    }
    let violation = strata.iter().any(|s| s.violation);
    Ok(IvInequalityReport {
        strata,
        skipped,
        violation,
    })
}

/// Feasible range of the complier-share contrast `x1 - x0` given the four
/// arm-specific probabilities.
pub fn feasibility_band(p1y: f64, p0y: f64, p1d: f64, p0d: f64) -> (f64, f64) {
    let lo = (p1y - p0y - p0d).max(p1d - 1.0);
    let hi = (1.0 - p0d).min(p1y + p1d - p0y);
    (lo, hi)
}
