//! Observational datasets: CSV ingest, validation and preprocessing.
//!
//! A [`Dataset`] stores one row per unit with a binary instrument `z`, a binary
//! treatment `d`, an outcome `y`, a covariate row whose first entry is the
//! intercept, and a sampling weight. Weights are normalized to mean one on
//! construction so that every empirical average in the estimators is
//! `sum(w_i * f_i) / n`.
//!
//! Missing covariate cells are stored as `NaN` until
//! [`impute_mean_with_indicators`] fills them in; the estimators refuse
//! datasets that still carry missing covariates.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Cell contents treated as missing by the CSV reader.
pub const MISSING_TOKENS: [&str; 2] = ["", "NA"];

pub const INTERCEPT: &str = "(intercept)";

/// One unit's observed data.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSample {
    pub z: u8,
    pub d: u8,
    pub y: f64,
    /// Covariates, `x[0] == 1.0` for the intercept.
    pub x: Vec<f64>,
    pub w: f64,
}

/// Borrowed view of a single row.
#[derive(Debug, Clone, Copy)]
pub struct Unit<'a> {
    pub z: f64,
    pub d: f64,
    pub y: f64,
    pub x: &'a [f64],
    pub w: f64,
}

/// Names of the non-covariate columns, kept so that a dataset can be written
/// back out and so that imputation can refuse to touch them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleNames {
    pub instrument: String,
    pub treatment: String,
    pub outcome: String,
    pub weight: String,
}

impl Default for RoleNames {
    fn default() -> Self {
        RoleNames {
            instrument: "z".into(),
            treatment: "d".into(),
            outcome: "y".into(),
            weight: "w".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetMeta {
    /// Rows dropped at load because Z, D or Y was missing.
    pub dropped_rows: usize,
    /// Threshold used by [`dichotomize`], if the outcome was dichotomized.
    pub dichotomize_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    z: Vec<f64>,
    d: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    x: Vec<f64>,
    p: usize,
    binary_outcome: bool,
    column_names: Vec<String>,
    roles: RoleNames,
    meta: DatasetMeta,
}

impl Dataset {
    /// Builds a validated dataset. `covariate_names` excludes the intercept,
    /// which must already be present as `x[0] == 1` in every sample.
    pub fn from_samples(
        samples: Vec<ObservedSample>,
        covariate_names: Vec<String>,
        binary_outcome: bool,
    ) -> Result<Dataset> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::DegenerateData("dataset has no rows".into()));
        }
        let p = samples[0].x.len();
        if p == 0 {
            return Err(Error::Validation {
                message: "covariate vector must contain the intercept".into(),
                rows: vec![],
            });
        }
        if covariate_names.len() + 1 != p {
            return Err(Error::Schema(format!(
                "{} covariate names for covariate dimension {}",
                covariate_names.len(),
                p
            )));
        }
        let mut ds = Dataset {
            z: Vec::with_capacity(n),
            d: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            w: Vec::with_capacity(n),
            x: Vec::with_capacity(n * p),
            p,
            binary_outcome,
            column_names: std::iter::once(INTERCEPT.to_string())
                .chain(covariate_names)
                .collect(),
            roles: RoleNames::default(),
            meta: DatasetMeta::default(),
        };
        let mut bad_dim = Vec::new();
        for (i, s) in samples.into_iter().enumerate() {
            if s.x.len() != p {
                bad_dim.push(i + 1);
                continue;
            }
            ds.z.push(f64::from(s.z));
            ds.d.push(f64::from(s.d));
            ds.y.push(s.y);
            ds.w.push(s.w);
            ds.x.extend_from_slice(&s.x);
        }
        if !bad_dim.is_empty() {
            return Err(Error::Validation {
                message: "inconsistent covariate dimension".into(),
                rows: bad_dim,
            });
        }
        ds.validate()?;
        ds.normalize_weights();
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let check = |message: &str, bad: Vec<usize>| -> Result<()> {
            if bad.is_empty() {
                Ok(())
            } else {
                Err(Error::Validation {
                    message: message.to_string(),
                    rows: bad,
                })
            }
        };
        let rows_where = |pred: &dyn Fn(usize) -> bool| -> Vec<usize> {
            (0..self.n()).filter(|&i| pred(i)).map(|i| i + 1).collect()
        };
        check(
            "instrument must be 0 or 1",
            rows_where(&|i| self.z[i] != 0.0 && self.z[i] != 1.0),
        )?;
        check(
            "treatment must be 0 or 1",
            rows_where(&|i| self.d[i] != 0.0 && self.d[i] != 1.0),
        )?;
        if self.binary_outcome {
            check(
                "binary outcome must be 0 or 1",
                rows_where(&|i| self.y[i] != 0.0 && self.y[i] != 1.0),
            )?;
        } else {
            check("outcome must be finite", rows_where(&|i| !self.y[i].is_finite()))?;
        }
        check(
            "weights must be positive and finite",
            rows_where(&|i| !(self.w[i] > 0.0 && self.w[i].is_finite())),
        )?;
        check(
            "first covariate entry must be the intercept 1",
            rows_where(&|i| self.x[i * self.p] != 1.0),
        )?;
        check(
            "covariates must be finite or missing",
            rows_where(&|i| self.row(i).iter().any(|v| v.is_infinite())),
        )?;
        let (mut w1, mut w0) = (0.0, 0.0);
        for i in 0..self.n() {
            if self.z[i] == 1.0 {
                w1 += self.w[i];
            } else {
                w0 += self.w[i];
            }
        }
        if w1 <= 0.0 || w0 <= 0.0 {
            return Err(Error::DegenerateData(
                "both instrument arms must be present".into(),
            ));
        }
        Ok(())
    }

    /// Rescales weights to mean one. Weights already at mean one (to 1e-12)
    /// are left untouched so that re-loading a written dataset is exact.
    fn normalize_weights(&mut self) {
        let n = self.n() as f64;
        let mean = self.w.iter().sum::<f64>() / n;
        if (mean - 1.0).abs() > 1e-12 {
            for w in &mut self.w {
                *w /= mean;
            }
        }
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    /// Covariate dimension including the intercept.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn binary_outcome(&self) -> bool {
        self.binary_outcome
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn roles(&self) -> &RoleNames {
        &self.roles
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn set_roles(&mut self, roles: RoleNames) {
        self.roles = roles;
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn unit(&self, i: usize) -> Unit<'_> {
        Unit {
            z: self.z[i],
            d: self.d[i],
            y: self.y[i],
            x: self.row(i),
            w: self.w[i],
        }
    }

    pub fn units(&self) -> impl Iterator<Item = Unit<'_>> + '_ {
        (0..self.n()).map(move |i| self.unit(i))
    }

    pub fn sample(&self, i: usize) -> ObservedSample {
        ObservedSample {
            z: self.z[i] as u8,
            d: self.d[i] as u8,
            y: self.y[i],
            x: self.row(i).to_vec(),
            w: self.w[i],
        }
    }

    pub fn has_missing_covariates(&self) -> bool {
        self.x.iter().any(|v| v.is_nan())
    }

    /// Weighted empirical mean `sum(w_i f_i) / n`.
    pub fn weighted_mean(&self, f: impl Fn(Unit<'_>) -> f64) -> f64 {
        let s: f64 = self.units().map(|u| u.w * f(u)).sum();
        s / self.n() as f64
    }

    /// `n^-1 sum w_i f(i)`, indexed by row.
    pub fn weighted_mean_index(&self, f: impl Fn(usize) -> f64) -> f64 {
        let s: f64 = (0..self.n()).map(|i| self.w[i] * f(i)).sum();
        s / self.n() as f64
    }

    /// Extracts the listed covariate columns into a contiguous design matrix.
    pub fn design(&self, cols: &[usize]) -> Result<Design> {
        if cols.is_empty() {
            return Err(Error::Config("design must contain at least one column".into()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.p) {
            return Err(Error::Config(format!(
                "design column {} out of range (p = {})",
                bad, self.p
            )));
        }
        let mut data = Vec::with_capacity(self.n() * cols.len());
        for i in 0..self.n() {
            let row = self.row(i);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Imputation(
                "design contains missing covariate values; impute first".into(),
            ));
        }
        Ok(Design {
            k: cols.len(),
            cols: cols.to_vec(),
            data,
        })
    }

    /// New dataset made of the given rows (with repetition), weights renormalized.
    pub fn resample(&self, rows: &[usize]) -> Result<Dataset> {
        let mut out = Dataset {
            z: rows.iter().map(|&i| self.z[i]).collect(),
            d: rows.iter().map(|&i| self.d[i]).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            w: rows.iter().map(|&i| self.w[i]).collect(),
            x: Vec::with_capacity(rows.len() * self.p),
            p: self.p,
            binary_outcome: self.binary_outcome,
            column_names: self.column_names.clone(),
            roles: self.roles.clone(),
            meta: self.meta.clone(),
        };
        for &i in rows {
            out.x.extend_from_slice(self.row(i));
        }
        out.validate()?;
        out.normalize_weights();
        Ok(out)
    }

    /// Returns a copy with the outcome column replaced.
    pub fn with_outcome(&self, y: Vec<f64>, binary_outcome: bool) -> Result<Dataset> {
        if y.len() != self.n() {
            return Err(Error::Schema("outcome length mismatch".into()));
        }
        let mut out = self.clone();
        out.y = y;
        out.binary_outcome = binary_outcome;
        out.validate()?;
        Ok(out)
    }

    fn push_column(&mut self, name: String, values: &[f64]) {
        let p_new = self.p + 1;
        let mut x = Vec::with_capacity(self.n() * p_new);
        for (i, v) in values.iter().enumerate() {
            x.extend_from_slice(self.row(i));
            x.push(*v);
        }
        self.x = x;
        self.p = p_new;
        self.column_names.push(name);
    }
}

/// Row-major design matrix for one nuisance model.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    k: usize,
    cols: Vec<usize>,
    data: Vec<f64>,
}

impl Design {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.k
    }

    pub fn columns(&self) -> &[usize] {
        &self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn dot(&self, i: usize, coef: &[f64]) -> f64 {
        self.row(i).iter().zip(coef).map(|(a, b)| a * b).sum()
    }

    /// Builds a design from an explicit row-major matrix.
    pub fn from_rows(k: usize, data: Vec<f64>) -> Design {
        assert!(k > 0 && data.len() % k == 0);
        Design {
            k,
            cols: Vec::new(),
            data,
        }
    }
}

/// Maps CSV header names to roles.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMap {
    pub instrument: String,
    pub treatment: String,
    pub outcome: String,
    pub covariates: Vec<String>,
    pub weight: Option<String>,
}

impl ColumnMap {
    pub fn new(instrument: &str, treatment: &str, outcome: &str) -> ColumnMap {
        ColumnMap {
            instrument: instrument.into(),
            treatment: treatment.into(),
            outcome: outcome.into(),
            covariates: Vec::new(),
            weight: None,
        }
    }

    pub fn with_covariates<S: AsRef<str>>(mut self, covs: &[S]) -> ColumnMap {
        self.covariates = covs.iter().map(|c| c.as_ref().to_string()).collect();
        self
    }

    pub fn with_weight(mut self, weight: &str) -> ColumnMap {
        self.weight = Some(weight.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutcomeKind {
    /// Binary if every observed outcome is 0 or 1.
    #[default]
    Auto,
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub outcome: OutcomeKind,
}

fn parse_cell(raw: &str) -> std::result::Result<Option<f64>, ()> {
    let t = raw.trim();
    if MISSING_TOKENS.contains(&t) {
        return Ok(None);
    }
    t.parse::<f64>().map(Some).map_err(|_| ())
}

pub fn load_csv(path: impl AsRef<Path>, map: &ColumnMap, options: LoadOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {}", path.as_ref().display(), e)))?;
    read_csv(file, map, options)
}

/// Reads a dataset from CSV text. Row numbers in errors count data rows from 1
/// (the header is not counted).
pub fn read_csv<R: Read>(reader: R, map: &ColumnMap, options: LoadOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };
    let zi = find(&map.instrument)?;
    let di = find(&map.treatment)?;
    let yi = find(&map.outcome)?;
    let wi = map.weight.as_deref().map(find).transpose()?;
    let xi = map
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    struct Row {
        z: f64,
        d: f64,
        y: f64,
        w: f64,
        x: Vec<f64>,
    }
    let mut rows = Vec::new();
    let mut dropped = 0usize;
    let mut bad_z = Vec::new();
    let mut bad_d = Vec::new();
    let mut bad_num = Vec::new();
    let mut bad_w = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row_no = r + 1;
        let cell = |j: usize| parse_cell(rec.get(j).unwrap_or(""));
        let (z, d, y) = match (cell(zi), cell(di), cell(yi)) {
            (Ok(z), Ok(d), Ok(y)) => (z, d, y),
            _ => {
                bad_num.push(row_no);
                continue;
            }
        };
        let (Some(z), Some(d), Some(y)) = (z, d, y) else {
            dropped += 1;
            continue;
        };
        if z != 0.0 && z != 1.0 {
            bad_z.push(row_no);
        }
        if d != 0.0 && d != 1.0 {
            bad_d.push(row_no);
        }
        let w = match wi.map(cell) {
            None => 1.0,
            Some(Ok(Some(w))) if w > 0.0 && w.is_finite() => w,
            Some(Ok(_)) => {
                bad_w.push(row_no);
                continue;
            }
            Some(Err(())) => {
                bad_num.push(row_no);
                continue;
            }
        };
        let mut x = Vec::with_capacity(xi.len() + 1);
        x.push(1.0);
        for &j in &xi {
            match cell(j) {
                Ok(v) => x.push(v.unwrap_or(f64::NAN)),
                Err(()) => {
                    bad_num.push(row_no);
                    break;
                }
            }
        }
        if x.len() != xi.len() + 1 {
            continue;
        }
        rows.push(Row { z, d, y, w, x });
    }
    for (msg, bad) in [
        ("unparseable numeric cell", bad_num),
        ("instrument must be 0 or 1", bad_z),
        ("treatment must be 0 or 1", bad_d),
        ("weight must be positive (missing weights are not allowed)", bad_w),
    ] {
        if !bad.is_empty() {
            return Err(Error::Validation {
                message: msg.to_string(),
                rows: bad,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::DegenerateData("no complete rows".into()));
    }
    let all_binary = rows.iter().all(|r| r.y == 0.0 || r.y == 1.0);
    let binary = match options.outcome {
        OutcomeKind::Auto => all_binary,
        OutcomeKind::Binary => true,
        OutcomeKind::Continuous => false,
    };
    let samples = rows
        .into_iter()
        .map(|r| ObservedSample {
            z: r.z as u8,
            d: r.d as u8,
            y: r.y,
            x: r.x,
            w: r.w,
        })
        .collect();
    let mut ds = Dataset::from_samples(samples, map.covariates.clone(), binary)?;
    ds.roles = RoleNames {
        instrument: map.instrument.clone(),
        treatment: map.treatment.clone(),
        outcome: map.outcome.clone(),
        weight: map.weight.clone().unwrap_or_else(|| "w".into()),
    };
    ds.meta.dropped_rows = dropped;
    Ok(ds)
}

fn fmt17(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v:.16e}")
    }
}

/// Writes the dataset as CSV: instrument, treatment, outcome, weight, then the
/// covariates (intercept omitted). Reals use 17 significant digits.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let roles = ds.roles();
    let mut header = vec![
        roles.instrument.clone(),
        roles.treatment.clone(),
        roles.outcome.clone(),
        roles.weight.clone(),
    ];
    header.extend(ds.column_names()[1..].iter().cloned());
    wtr.write_record(&header)?;
    for u in ds.units() {
        let mut rec = vec![
            format!("{}", u.z as u8),
            format!("{}", u.d as u8),
            if ds.binary_outcome() {
                format!("{}", u.y as u8)
            } else {
                fmt17(u.y)
            },
            fmt17(u.w),
        ];
        rec.extend(u.x[1..].iter().map(|&v| fmt17(v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {}", path.as_ref().display(), e)))?;
    write_csv(ds, std::io::BufWriter::new(file))
}

/// Column map that reads back a file produced by [`write_csv`].
pub fn column_map_for(ds: &Dataset) -> ColumnMap {
    let r = ds.roles();
    ColumnMap {
        instrument: r.instrument.clone(),
        treatment: r.treatment.clone(),
        outcome: r.outcome.clone(),
        covariates: ds.column_names()[1..].to_vec(),
        weight: Some(r.weight.clone()),
    }
}

/// Fills missing cells of the named covariates with the weighted mean of the
/// observed values and appends a `<name>_missing` indicator for every column
/// that had at least one missing cell.
pub fn impute_mean_with_indicators<S: AsRef<str>>(ds: &Dataset, cols: &[S]) -> Result<Dataset> {
    let roles = ds.roles();
    let mut out = ds.clone();
    for name in cols {
        let name = name.as_ref();
        if [&roles.instrument, &roles.treatment, &roles.outcome, &roles.weight]
            .iter()
            .any(|r| r.as_str() == name)
            || name == INTERCEPT
        {
            return Err(Error::Imputation(format!(
                "'{name}' is not a covariate; only covariates can be imputed"
            )));
        }
        let j = out
            .column_index(name)
            .ok_or_else(|| Error::Schema(format!("covariate '{name}' not found")))?;
        let (mut sw, mut swx, mut missing) = (0.0, 0.0, 0usize);
        for i in 0..out.n() {
            let v = out.row(i)[j];
            if v.is_nan() {
                missing += 1;
            } else {
                sw += out.w[i];
                swx += out.w[i] * v;
            }
        }
        if missing == 0 {
            continue;
        }
        if sw == 0.0 {
            return Err(Error::Imputation(format!(
                "column '{name}' has no observed values"
            )));
        }
        let mean = swx / sw;
        let p = out.p;
        let mut indicator = vec![0.0; out.n()];
        for (i, ind) in indicator.iter_mut().enumerate() {
            let cell = &mut out.x[i * p + j];
            if cell.is_nan() {
                *cell = mean;
                *ind = 1.0;
            }
        }
        out.push_column(format!("{name}_missing"), &indicator);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// Weighted median of the outcome.
    Median,
    Fixed(f64),
}

/// Weighted median: the midpoint between neighbours when the cumulative weight
/// hits exactly one half, otherwise the first value past one half.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let half = total / 2.0;
    let mut cum = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        cum += weights[i];
        if (cum - half).abs() <= 1e-12 * total {
            let next = idx.get(k + 1).map_or(values[i], |&j| values[j]);
            return 0.5 * (values[i] + next);
        }
        if cum > half {
            return values[i];
        }
    }
    values[*idx.last().expect("nonempty")]
}

/// Replaces the outcome by `1(y > t)`.
pub fn dichotomize(ds: &Dataset, rule: ThresholdRule) -> Result<Dataset> {
    if ds.binary_outcome() {
        return Err(Error::Config("outcome is already binary".into()));
    }
    let t = match rule {
        ThresholdRule::Median => weighted_median(ds.y(), ds.weights()),
        ThresholdRule::Fixed(t) => t,
    };
    let y = ds.y().iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect();
    let mut out = ds.with_outcome(y, true)?;
    out.meta.dichotomize_threshold = Some(t);
    Ok(out)
}
