mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ivate::data::{dichotomize, impute_mean_with_indicators, load_csv, write_csv, ThresholdRule};
use ivate::diagnostics::{test_iv_inequalities, Stratification, Tolerance};
use ivate::estimators::{
    results_table, write_results_csv, PropensityColumns, ResultRow,
};
use ivate::inference::{bootstrap_estimators, bootstrap_statistic, BootstrapConfig};
use ivate::simulate::{run_monte_carlo, McSummary, Scenario, ScenarioSpec};
use ivate::{
    ColumnMap, Dataset, Error, ErrorKind, Estimator, EstimatorConfig, Fitter, Link, LoadOptions,
    OutcomeKind,
};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "ivate",
    version,
    about = "Average treatment effect estimation with a binary instrument"
)]
struct Cli {
    /// Flat key = value file of default flag values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for bootstrap and simulation replicates.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit estimators to a CSV dataset.
    #[command(args_override_self = true)]
    Fit(FitArgs),
    /// Run a Monte Carlo study on the built-in data-generating process.
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
    /// Screen the data for violations of the instrumental inequalities.
    #[command(args_override_self = true)]
    Diagnose(DiagnoseArgs),
    /// Impute, dichotomize and re-serialize a dataset.
    #[command(args_override_self = true)]
    Convert(ConvertArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum OutcomeArg {
    Auto,
    Binary,
    Continuous,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum LinkArg {
    Tanh,
    Expit,
    Identity,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long, value_name = "CSV")]
    data: PathBuf,
    #[arg(long, default_value = "z")]
    instrument: String,
    #[arg(long, default_value = "d")]
    treatment: String,
    #[arg(long, default_value = "y")]
    outcome: String,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Column of analysis weights.
    #[arg(long)]
    weight: Option<String>,
    #[arg(long, value_enum, default_value = "auto")]
    outcome_kind: OutcomeArg,
    /// Covariates whose missing cells get mean imputation plus an indicator.
    #[arg(long, value_delimiter = ',')]
    impute: Vec<String>,
    /// Dichotomize a continuous outcome at `median` or at a number.
    #[arg(long, value_name = "median|T")]
    dichotomize: Option<String>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated estimators, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    estimator: Vec<String>,
    /// Link of the instrument-treatment risk difference.
    #[arg(long, value_enum, default_value = "tanh")]
    link: LinkArg,
    /// Propensity covariate sets separated by `;`; two or more sets fit an ensemble.
    #[arg(long, value_name = "a,b;a,c")]
    propensity: Option<String>,
    /// Attach sandwich standard errors.
    #[arg(long)]
    sandwich: bool,
    /// Keep best iterates of fits that do not converge instead of failing.
    #[arg(long)]
    accept_nonconverged: bool,
    /// Bootstrap replicates for percentile intervals.
    #[arg(long, value_name = "N")]
    bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Results CSV (standard output when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Text report (standard error when absent).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Bootstrap replicate values.
    #[arg(long)]
    replicates_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Named scenario, four-letter grid code, `all` (named) or `grid`.
    #[arg(long, default_value = "all-correct")]
    scenario: String,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "b-reg,b-ipw,g,mr,b-mr")]
    estimator: Vec<String>,
    /// Also compute sandwich standard errors.
    #[arg(long)]
    sandwich: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    replicates_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Stratify on the distinct values of these columns.
    #[arg(long, value_delimiter = ',', conflicts_with = "bins")]
    strata: Vec<String>,
    /// Stratify on equal-count bins of one column.
    #[arg(long, value_name = "COLUMN:K")]
    bins: Option<String>,
    /// Flag sums exceeding one by more than this many standard errors.
    #[arg(long, default_value_t = 2.0, conflicts_with = "tolerance")]
    tolerance_se: f64,
    /// Flag sums exceeding one by more than this fixed amount.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => EXIT_USAGE,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

type Run = Result<(), Failure>;

fn main() -> ExitCode {
    let argv = match config::expand(std::env::args().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(EXIT_USAGE);
        }
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let result = match &cli.command {
        Command::Fit(a) => fit(a, &cli),
        Command::Simulate(a) => simulate(a, &cli),
        Command::Diagnose(a) => diagnose(a, &cli),
        Command::Convert(a) => convert(a, &cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Writes to `path`, or to `fallback` when no path was given.
fn emit(path: &Option<PathBuf>, fallback: &mut dyn Write, body: &[u8]) -> Run {
    match path {
        Some(p) => {
            let mut f = BufWriter::new(create(p)?);
            f.write_all(body).and_then(|_| f.flush()).map_err(io_failure(p))
        }
        None => fallback.write_all(body).map_err(|e| Error::from(e).into()),
    }
}

fn create(p: &Path) -> Result<File, Failure> {
    File::create(p).map_err(io_failure(p))
}

fn io_failure(p: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Error::Io(format!("{}: {e}", p.display())).into()
}

/// Resolved settings as `(key, TOML literal)` pairs.
type Entries = Vec<(&'static str, String)>;

/// Logs the resolved configuration in config-file syntax, so the block can be
/// saved and passed back with `--config`.
fn log_config(command: &str, cli: &Cli, entries: &Entries) {
    let mut s = format!("# ivate {} {command}\n", env!("CARGO_PKG_VERSION"));
    if let Some(w) = cli.workers {
        s.push_str(&format!("# workers = {w}\n"));
    }
    for (k, v) in entries {
        s.push_str(&format!("{k} = {v}\n"));
    }
    eprint!("{s}");
}

fn q(s: &str) -> String {
    config::quote(s)
}

fn push_path(e: &mut Entries, key: &'static str, p: &Option<PathBuf>) {
    if let Some(p) = p {
        e.push((key, q(&p.display().to_string())));
    }
}

fn data_entries(d: &DataArgs) -> Entries {
    let mut e = vec![
        ("data", q(&d.data.display().to_string())),
        ("instrument", q(&d.instrument)),
        ("treatment", q(&d.treatment)),
        ("outcome", q(&d.outcome)),
    ];
    if !d.covariates.is_empty() {
        e.push(("covariates", q(&d.covariates.join(","))));
    }
    e.push(("outcome-kind", q(&format!("{:?}", d.outcome_kind).to_lowercase())));
    if let Some(w) = &d.weight {
        e.push(("weight", q(w)));
    }
    if !d.impute.is_empty() {
        e.push(("impute", q(&d.impute.join(","))));
    }
    if let Some(t) = &d.dichotomize {
        e.push(("dichotomize", q(t)));
    }
    e
}

fn load(d: &DataArgs) -> Result<Dataset, Failure> {
    let mut map = ColumnMap::new(&d.instrument, &d.treatment, &d.outcome).with_covariates(&d.covariates);
    if let Some(w) = &d.weight {
        map = map.with_weight(w);
    }
    let outcome = match d.outcome_kind {
        OutcomeArg::Auto => OutcomeKind::Auto,
        OutcomeArg::Binary => OutcomeKind::Binary,
        OutcomeArg::Continuous => OutcomeKind::Continuous,
    };
    let mut ds = load_csv(&d.data, &map, LoadOptions { outcome })?;
    if !d.impute.is_empty() {
        ds = impute_mean_with_indicators(&ds, &d.impute)?;
    }
    if let Some(rule) = &d.dichotomize {
        let rule = if rule == "median" {
            ThresholdRule::Median
        } else {
            ThresholdRule::Fixed(
                rule.parse()
                    .map_err(|_| Failure::usage(format!("--dichotomize: expected 'median' or a number, got '{rule}'")))?,
            )
        };
        ds = dichotomize(&ds, rule)?;
    }
    Ok(ds)
}

/// What `fit` can be asked for.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Target {
    Est(Estimator),
    LateEtt,
}

fn parse_targets(names: &[String]) -> Result<Vec<Target>, Failure> {
    let mut out = Vec::new();
    for name in names {
        let add: Vec<Target> = match name.as_str() {
            "all" => Estimator::ALL
                .into_iter()
                .map(Target::Est)
                .chain([Target::LateEtt])
                .collect(),
            "late-ett" => vec![Target::LateEtt],
            other => vec![Target::Est(Estimator::parse(other)?)],
        };
        for t in add {
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    if out.is_empty() {
        return Err(Failure::usage("no estimator requested"));
    }
    Ok(out)
}

fn column(ds: &Dataset, name: &str) -> Result<usize, Failure> {
    ds.column_index(name)
        .ok_or_else(|| Failure::usage(format!("'{name}' is not a covariate of the loaded data")))
}

fn fit_config(a: &FitArgs, ds: &Dataset) -> Result<EstimatorConfig, Failure> {
    let mut cfg = EstimatorConfig::all_columns(ds).with_sandwich(a.sandwich);
    cfg.delta_d_link = match a.link {
        LinkArg::Tanh => Link::Tanh,
        LinkArg::Expit => Link::Expit,
        LinkArg::Identity => Link::Identity,
    };
    cfg.accept_nonconverged = a.accept_nonconverged;
    if let Some(spec) = &a.propensity {
        let sets = spec
            .split(';')
            .map(|set| {
                let mut cols = vec![0];
                for name in set.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    cols.push(column(ds, name)?);
                }
                Ok(cols)
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        cfg.propensity = if sets.len() == 1 {
            PropensityColumns::Single(sets.into_iter().next().unwrap())
        } else {
            PropensityColumns::Ensemble(sets)
        };
    }
    Ok(cfg)
}

fn fit(a: &FitArgs, cli: &Cli) -> Run {
    let targets = parse_targets(&a.estimator)?;
    if a.bootstrap.is_some() && a.seed.is_none() {
        return Err(Failure::usage("--bootstrap needs --seed"));
    }
    let boot = a.bootstrap.map(|reps| {
        let mut b = BootstrapConfig::new(reps, a.seed.unwrap_or_default());
        b.ci_level = a.level;
        b
    });
    if let Some(b) = &boot {
        b.validate()?;
    }

    let mut entries = data_entries(&a.data);
    let names: Vec<String> = targets
        .iter()
        .map(|t| match t {
            Target::Est(e) => e.tag().to_string(),
            Target::LateEtt => "late-ett".to_string(),
        })
        .collect();
    entries.push(("estimator", q(&names.join(","))));
    entries.push(("link", q(&format!("{:?}", a.link).to_lowercase())));
    if let Some(p) = &a.propensity {
        entries.push(("propensity", q(p)));
    }
    entries.push(("sandwich", a.sandwich.to_string()));
    entries.push(("accept-nonconverged", a.accept_nonconverged.to_string()));
    if let Some(b) = &boot {
        entries.push(("bootstrap", b.replicates.to_string()));
        entries.push(("level", format!("{:?}", b.ci_level)));
    }
    if let Some(s) = a.seed {
        entries.push(("seed", s.to_string()));
    }
    push_path(&mut entries, "out", &a.out);
    push_path(&mut entries, "report", &a.report);
    push_path(&mut entries, "replicates-out", &a.replicates_out);
    log_config("fit", cli, &entries);

    let ds = load(&a.data)?;
    let cfg = fit_config(a, &ds)?;
    let fitter = Fitter::new(&ds, &cfg);

    let mut rows: Vec<ResultRow> = Vec::new();
    let mut failures: Vec<Error> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut dump = String::from("estimator,replicate,value\n");
    let estimators: Vec<Estimator> = targets
        .iter()
        .filter_map(|t| match t {
            Target::Est(e) => Some(*e),
            Target::LateEtt => None,
        })
        .collect();

    let boot_results = match &boot {
        Some(b) if !estimators.is_empty() => Some(bootstrap_estimators(&ds, &cfg, &estimators, b)?),
        _ => None,
    };
    for (k, &est) in estimators.iter().enumerate() {
        match fitter.estimate(est) {
            Ok(rep) => {
                let mut row = ResultRow::from(&rep);
                warnings.extend(rep.warnings.iter().map(|w| format!("{est}: {w}")));
                if let Some(br) = &boot_results {
                    match &br[k] {
                        Ok(b) => {
                            row.ci = Some(b.ci);
                            if b.failed > 0 {
                                warnings.push(format!(
                                    "{est}: {} of {} bootstrap replicates failed and were dropped",
                                    b.failed,
                                    b.values.len() + b.failed
                                ));
                            }
                            for (r, v) in b.values.iter().enumerate() {
                                dump.push_str(&format!("{est},{r},{v}\n"));
                            }
                        }
                        Err(e) => failures.push(e.clone().in_context(est.tag())),
                    }
                }
                rows.push(row);
            }
            Err(e) => failures.push(e),
        }
    }

    if targets.contains(&Target::LateEtt) {
        match fitter.late_ett() {
            Ok(le) => {
                for (label, v, pick) in [
                    ("late", le.late, 0usize),
                    ("ett", le.ett, 1usize),
                ] {
                    let mut row = ResultRow {
                        label: label.to_string(),
                        estimate: v,
                        se: None,
                        ci: None,
                        in_bounds: ds.binary_outcome().then_some(v.abs() <= 1.0),
                        converged: true,
                    };
                    if let Some(b) = &boot {
                        let stat = |rep: &Dataset| {
                            Fitter::new(rep, &cfg)
                                .late_ett()
                                .map(|x| if pick == 0 { x.late } else { x.ett })
                        };
                        match bootstrap_statistic(&ds, stat, b) {
                            Ok(res) => {
                                row.ci = Some(res.ci);
                                for (r, v) in res.values.iter().enumerate() {
                                    dump.push_str(&format!("{label},{r},{v}\n"));
                                }
                            }
                            Err(e) => failures.push(e.in_context(label)),
                        }
                    }
                    rows.push(row);
                }
            }
            Err(e) => failures.push(e.in_context("late-ett")),
        }
    }

    let mut csv = Vec::new();
    write_results_csv(&rows, &mut csv)?;
    emit(&a.out, &mut io::stdout().lock(), &csv)?;

    let level = boot.map_or(0.95, |b| b.ci_level);
    let mut text = format!("n = {}\n", ds.n());
    if let Some(t) = ds.meta().dichotomize_threshold {
        text.push_str(&format!("outcome dichotomized at {t}\n"));
    }
    text.push_str(&results_table(&rows, level));
    for w in &warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    for e in &failures {
        text.push_str(&format!("failed: {e}\n"));
    }
    emit(&a.report, &mut io::stderr().lock(), text.as_bytes())?;
    if let Some(p) = &a.replicates_out {
        emit(&Some(p.clone()), &mut io::sink(), dump.as_bytes())?;
    }

    match failures.iter().map(exit_code).max() {
        None => Ok(()),
        Some(code) => Err(Failure {
            code,
            message: format!("{} of the requested fits failed", failures.len()),
        }),
    }
}

trait InContext {
    fn in_context(self, label: &str) -> Error;
}

impl InContext for Error {
    fn in_context(self, label: &str) -> Error {
        match self {
            e @ Error::Estimator { .. } => e,
            e => Error::Estimator {
                estimator: label.to_string(),
                source: Box::new(e),
            },
        }
    }
}

fn scenarios(name: &str) -> Result<Vec<Scenario>, Failure> {
    Ok(match name {
        "all" => Scenario::NAMED.iter().map(|(_, s)| *s).collect(),
        "grid" => Scenario::grid(),
        other => vec![Scenario::parse(other)?],
    })
}

fn simulate(a: &SimulateArgs, cli: &Cli) -> Run {
    let seed = a.seed.ok_or_else(|| Failure::usage("simulate needs --seed"))?;
    let list = scenarios(&a.scenario)?;
    let estimators = a
        .estimator
        .iter()
        .map(|s| Estimator::parse(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut entries: Entries = vec![
        ("scenario", q(&a.scenario)),
        ("reps", a.reps.to_string()),
        ("n", a.n.to_string()),
        ("seed", seed.to_string()),
        ("estimator", q(&a.estimator.join(","))),
        ("sandwich", a.sandwich.to_string()),
    ];
    push_path(&mut entries, "out", &a.out);
    push_path(&mut entries, "report", &a.report);
    push_path(&mut entries, "replicates-out", &a.replicates_out);
    log_config("simulate", cli, &entries);
    let mut summaries: Vec<McSummary> = Vec::new();
    for sc in list {
        let mut spec = ScenarioSpec::new(sc, seed);
        spec.reps = a.reps;
        spec.n = a.n;
        spec.estimators = estimators.clone();
        spec.sandwich = a.sandwich;
        summaries.push(run_monte_carlo(&spec)?);
    }

    let mut csv = Vec::new();
    let mut text = String::new();
    let mut dump = Vec::new();
    for (i, s) in summaries.iter().enumerate() {
        let mut one = Vec::new();
        s.write_csv(&mut one)?;
        append_skipping_header(&mut csv, &one, i > 0);
        text.push_str(&s.to_text());
        if a.replicates_out.is_some() {
            let mut reps = Vec::new();
            s.write_replicates_csv(&mut reps)?;
            let tagged = prefix_column(&reps, "scenario", &s.scenario.name());
            append_skipping_header(&mut dump, &tagged, i > 0);
        }
    }
    emit(&a.out, &mut io::stdout().lock(), &csv)?;
    emit(&a.report, &mut io::stderr().lock(), text.as_bytes())?;
    if let Some(p) = &a.replicates_out {
        emit(&Some(p.clone()), &mut io::sink(), &dump)?;
    }
    Ok(())
}

fn append_skipping_header(out: &mut Vec<u8>, csv: &[u8], skip: bool) {
    let start = if skip {
        csv.iter().position(|&b| b == b'\n').map_or(csv.len(), |p| p + 1)
    } else {
        0
    };
    out.extend_from_slice(&csv[start..]);
}

/// Prepends a constant column to every line of a CSV.
fn prefix_column(csv: &[u8], header: &str, value: &str) -> Vec<u8> {
    let text = String::from_utf8_lossy(csv);
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let head = if i == 0 { header } else { value };
        out.push_str(&format!("{head},{line}\n"));
    }
    out.into_bytes()
}

fn stratification(a: &DiagnoseArgs, ds: &Dataset) -> Result<Stratification, Failure> {
    if let Some(spec) = &a.bins {
        let (name, k) = spec
            .split_once(':')
            .ok_or_else(|| Failure::usage(format!("--bins: expected COLUMN:K, got '{spec}'")))?;
        let bins = k
            .parse()
            .map_err(|_| Failure::usage(format!("--bins: '{k}' is not a bin count")))?;
        return Ok(Stratification::QuantileBins {
            column: column(ds, name)?,
            bins,
        });
    }
    if a.strata.is_empty() {
        return Ok(Stratification::None);
    }
    let cols = a
        .strata
        .iter()
        .map(|s| column(ds, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Stratification::Columns(cols))
}

fn diagnose(a: &DiagnoseArgs, cli: &Cli) -> Run {
    let mut entries = data_entries(&a.data);
    if !a.strata.is_empty() {
        entries.push(("strata", q(&a.strata.join(","))));
    }
    if let Some(b) = &a.bins {
        entries.push(("bins", q(b)));
    }
    match a.tolerance {
        Some(t) => entries.push(("tolerance", format!("{t:?}"))),
        None => entries.push(("tolerance-se", format!("{:?}", a.tolerance_se))),
    }
    push_path(&mut entries, "out", &a.out);
    push_path(&mut entries, "report", &a.report);
    log_config("diagnose", cli, &entries);

    let ds = load(&a.data)?;
    let strat = stratification(a, &ds)?;
    let tol = match a.tolerance {
        Some(t) => Tolerance::Fixed(t),
        None => Tolerance::StandardErrors(a.tolerance_se),
    };
    let report = test_iv_inequalities(&ds, &strat, tol)?;
    emit(&a.out, &mut io::stdout().lock(), report.to_csv().as_bytes())?;
    emit(&a.report, &mut io::stderr().lock(), report.to_text().as_bytes())?;
    Ok(())
}

fn convert(a: &ConvertArgs, cli: &Cli) -> Run {
    let mut entries = data_entries(&a.data);
    push_path(&mut entries, "out", &a.out);
    log_config("convert", cli, &entries);
    let ds = load(&a.data)?;
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf)?;
    emit(&a.out, &mut io::stdout().lock(), &buf)
}
