//! Command-line front end. Every command writes its outputs plus a
//! `manifest.json` that `vcreg rerun --manifest` replays exactly.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correction::{correct, CorrectedDesign, CorrectionRecipe};
use crate::data::{load_counts, ConstraintSpec, CountMatrix, RegressionData};
use crate::diagnostics::{
    bias_curve, default_bias_estimators, median, rip_constant, run_scan, BiasMode, RipMethod, ScanAxis, ScanConfig,
    DEFAULT_NU_GRID,
};
use crate::error::{Error, Result};
use crate::overdispersion::{estimate_alpha_all, groups_from_labels, pair_halves, row_labels, AlphaEstimate, ReplicateGroup};
use crate::selection::{cv_select_lambda, refit_on_support, stability_select, CvConfig, CvResult, PathSpec, StabilityConfig, StabilityReport};
use crate::serde_inf::parse_concentration;
use crate::simulator::{
    run_scenario_grid, simulate, write_grid_csv, CompositionLaw, DepthLaw, GridConfig, GridMethod, GridRow, LambdaRule,
    SimScenario,
};
use crate::solver::{kkt_certificate, ConstrainedLasso, FitResult, SolverConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "VCREG_OUT_DIR";
pub const MANIFEST: &str = "manifest.json";

#[derive(Parser, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[command(name = "vcreg", version, about = "Variable-correction regression for compositional count data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (default: $VCREG_OUT_DIR, else ./vcreg-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master random seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Correct the counts, choose the penalty and fit.
    Fit(FitArgs),
    /// Stability selection with an unpenalized refit on the selected taxa.
    Select(SelectArgs),
    /// Draw one synthetic dataset.
    Simulate(SimulateArgs),
    /// Benchmark grid comparing designs on synthetic data.
    Bench(BenchArgs),
    /// Bias of log-count estimators under Poisson sampling.
    Bias(BiasArgs),
    /// Restricted isometry constant of a matrix.
    Rip(RipArgs),
    /// Error scaling against sample size, depth or sparsity.
    Scan(ScanArgs),
    /// Replay a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionKind {
    /// log(W + z), z from the concentration
    Vc,
    /// log(max(W, c))
    Zr,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputArgs {
    /// Count table (CSV, taxa as columns, optional leading sample-id column).
    pub counts: PathBuf,
    /// Response (CSV with one value column, or sample_id,value).
    pub response: PathBuf,
    #[arg(long, value_enum, default_value_t = CorrectionKind::Vc)]
    pub correction: CorrectionKind,
    /// Replacement constant for --correction zr.
    #[arg(long, default_value_t = 0.5)]
    pub zr_c: f64,
    /// Concentration: inf, mom (estimate from replicate groups) or a number.
    #[arg(long, default_value = "inf")]
    pub alpha: String,
    /// Replicate groups (CSV: sample_id,group_id).
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Treat rows i and i+n/2 as replicate pairs.
    #[arg(long, conflicts_with = "groups")]
    pub pair_halves: bool,
    /// Constraint matrix C (CSV, p rows); default is the sum-to-zero constraint.
    #[arg(long)]
    pub constraint: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Assign CV folds by row even when replicate groups are known.
    #[arg(long)]
    pub row_folds: bool,
    /// Points on the penalty grid.
    #[arg(long, default_value_t = 30)]
    pub path_num: usize,
    /// Smallest penalty as a fraction of lambda_max.
    #[arg(long, default_value_t = 0.01)]
    pub path_ratio: f64,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Penalty: cv or a positive number.
    #[arg(long, default_value = "cv")]
    pub lambda: String,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 100)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0.5)]
    pub subsample_frac: f64,
    #[arg(long, default_value_t = 0.6)]
    pub threshold: f64,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Scenario JSON; overrides the flags below.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub p: usize,
    #[arg(long, default_value = "200")]
    pub alpha: String,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long)]
    pub shared_noise: bool,
    #[arg(long, default_value_t = 3e4)]
    pub depth_mean: f64,
    #[arg(long, default_value_t = 3e6)]
    pub depth_variance: f64,
    /// Poisson depths with mean --depth-mean instead of negative binomial.
    #[arg(long)]
    pub poisson_depth: bool,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchArgs {
    /// Grid JSON; overrides the flags below.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [50, 100])]
    pub ns: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [100, 200, 400])]
    pub ps: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values = ["200", "1000", "5000"])]
    pub alphas: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    #[arg(long)]
    pub shared_noise: bool,
    /// Penalty rule: cv, theory:<constant> or a positive number.
    #[arg(long, default_value = "cv")]
    pub lambda: String,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Also write a plain-text plot.
    #[arg(long)]
    pub plot: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasModeArg {
    Exact,
    Mc,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasArgs {
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_NU_GRID)]
    pub nu: Vec<f64>,
    #[arg(long, value_enum, default_value_t = BiasModeArg::Exact)]
    pub mode: BiasModeArg,
    /// Monte Carlo draws per grid point (default: sized for SE <= 1e-3).
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub plot: bool,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RipArgs {
    /// Numeric matrix (CSV, optional header row).
    pub matrix: PathBuf,
    #[arg(long)]
    pub s: usize,
    /// Sample this many random supports instead of enumerating all.
    #[arg(long)]
    pub randomized: Option<usize>,
    /// Skip the sum-to-zero centering.
    #[arg(long)]
    pub raw: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    Rate,
    Depth,
    Sparsity,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignArg {
    Oracle,
    Vc,
    VcHalf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanArgs {
    #[arg(long, value_enum, default_value_t = ScanKind::Rate)]
    pub kind: ScanKind,
    /// Levels of the scanned quantity (n, depth multiplier or s).
    #[arg(long, value_delimiter = ',', default_values_t = [100.0, 200.0, 400.0, 800.0])]
    pub levels: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub p: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value = "inf")]
    pub alpha: String,
    #[arg(long, default_value_t = 3e4)]
    pub depth_mean: f64,
    #[arg(long, value_enum, default_value_t = DesignArg::Oracle)]
    pub design: DesignArg,
    #[arg(long, default_value_t = 30)]
    pub replicates: usize,
    /// Penalty rule: cv, theory:<constant> or a positive number.
    #[arg(long, default_value = "theory:1")]
    pub lambda: String,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    pub command: Command,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
    /// One-line human summary.
    pub message: String,
}

/// Process exit code for an error category.
pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        "parse" | "csv" | "json" => 2,
        "invalid_input" => 3,
        "rank_deficient" => 4,
        "insufficient_replicates" => 5,
        "infeasible" => 6,
        "budget_exceeded" => 7,
        "numerical" => 8,
        _ => 9,
    }
}

/// Machine-readable error line for stderr.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": e.category(), "message": e.to_string() }).to_string()
}

pub fn run_from<I, T>(args: I) -> Result<RunSummary>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::invalid(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<RunSummary> {
    if let Command::Rerun(args) = &cli.command {
        let text = fs::read_to_string(&args.manifest)?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if matches!(manifest.command, Command::Rerun(_)) {
            return Err(Error::invalid("a manifest cannot record a rerun"));
        }
        let replay = Cli {
            command: manifest.command,
            threads: cli.threads.or(manifest.threads),
            out: Some(cli.out.clone().unwrap_or(manifest.out_dir)),
            seed: manifest.seed,
        };
        return run(replay);
    }
    let out_dir = match &cli.out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("vcreg-out")),
    };
    let mut command = cli.command.clone();
    absolutize(&mut command)?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = cli.threads {
            if t == 0 {
                return Err(Error::invalid("--threads must be at least 1"));
            }
            b = b.num_threads(t);
        }
        b.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))?
    };
    let mut out = Outputs::default();
    pool.install(|| dispatch(&command, cli.seed, &mut out))?;

    fs::create_dir_all(&out_dir)?;
    let out_dir = out_dir.canonicalize()?;
    let mut written = Vec::new();
    for (name, bytes) in &out.files {
        let path = out_dir.join(name);
        fs::write(&path, bytes)?;
        written.push(path);
    }
    let manifest = Manifest {
        tool: "vcreg".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cli.seed,
        threads: cli.threads,
        out_dir: out_dir.clone(),
        command,
        outputs: out.files.iter().map(|(n, _)| n.clone()).collect(),
    };
    let manifest_path = out_dir.join(MANIFEST);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    written.push(manifest_path);
    Ok(RunSummary { out_dir, outputs: written, warnings: out.warnings, message: out.message })
}

#[derive(Default)]
struct Outputs {
    files: Vec<(String, Vec<u8>)>,
    warnings: Vec<String>,
    message: String,
}

impl Outputs {
    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.add(name, s.into_bytes());
        Ok(())
    }
}

fn abs(p: &mut PathBuf) -> Result<()> {
    *p = p.canonicalize().map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?;
    Ok(())
}

fn abs_opt(p: &mut Option<PathBuf>) -> Result<()> {
    if let Some(p) = p {
        abs(p)?;
    }
    Ok(())
}

fn absolutize(command: &mut Command) -> Result<()> {
    let input = |i: &mut InputArgs| -> Result<()> {
        abs(&mut i.counts)?;
        abs(&mut i.response)?;
        abs_opt(&mut i.groups)?;
        abs_opt(&mut i.constraint)
    };
    match command {
        Command::Fit(a) => input(&mut a.input),
        Command::Select(a) => input(&mut a.input),
        Command::Simulate(a) => abs_opt(&mut a.scenario),
        Command::Bench(a) => abs_opt(&mut a.grid),
        Command::Rip(a) => abs(&mut a.matrix),
        Command::Bias(_) | Command::Scan(_) | Command::Rerun(_) => Ok(()),
    }
}

fn dispatch(command: &Command, seed: u64, out: &mut Outputs) -> Result<()> {
    match command {
        Command::Fit(a) => cmd_fit(a, seed, out),
        Command::Select(a) => cmd_select(a, seed, out),
        Command::Simulate(a) => cmd_simulate(a, seed, out),
        Command::Bench(a) => cmd_bench(a, seed, out),
        Command::Bias(a) => cmd_bias(a, seed, out),
        Command::Rip(a) => cmd_rip(a, seed, out),
        Command::Scan(a) => cmd_scan(a, seed, out),
        Command::Rerun(_) => Err(Error::invalid("nested rerun")),
    }
}

fn parse_alpha(s: &str) -> Result<f64> {
    match parse_concentration(s) {
        Some(a) if a > 0.0 => Ok(a),
        _ => Err(Error::invalid(format!("concentration {s:?} must be inf or a positive number"))),
    }
}

fn parse_lambda_rule(s: &str, folds: usize, path: PathSpec) -> Result<LambdaRule> {
    let s = s.trim();
    if s == "cv" {
        return Ok(LambdaRule::Cv { folds, path });
    }
    if let Some(c) = s.strip_prefix("theory:") {
        let constant: f64 = c.parse().map_err(|_| Error::invalid(format!("bad theory constant {c:?}")))?;
        return Ok(LambdaRule::Theoretical { constant });
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(LambdaRule::Fixed { lambda: v }),
        _ => Err(Error::invalid(format!("penalty {s:?} must be cv, theory:<c> or a positive number"))),
    }
}

fn records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    rdr.records().map(|r| r.map_err(Error::from)).collect()
}

fn parse_error(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse { source_name: path.display().to_string(), line, column, message: message.into() }
}

/// Reads a response column, matched to `sample_ids` when ids are present.
pub fn load_response(path: &Path, sample_ids: &[String]) -> Result<DVector<f64>> {
    let recs = records(path)?;
    let value_col = match recs.first().map(|r| r.len()) {
        Some(1) => 0,
        Some(2) => 1,
        Some(w) => return Err(parse_error(path, 1, 1, format!("expected 1 or 2 columns, found {w}"))),
        None => return Err(parse_error(path, 1, 1, "empty file")),
    };
    let skip = usize::from(recs[0].get(value_col).is_some_and(|c| c.parse::<f64>().is_err()));
    let mut values = Vec::new();
    let mut ids = Vec::new();
    for (k, r) in recs.iter().enumerate().skip(skip) {
        if r.len() != value_col + 1 {
            return Err(parse_error(path, k + 1, 1, "ragged row"));
        }
        let cell = r.get(value_col).unwrap_or("");
        let v: f64 = cell
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| parse_error(path, k + 1, value_col + 1, format!("bad response value {cell:?}")))?;
        values.push(v);
        if value_col == 1 {
            ids.push(r.get(0).unwrap_or("").to_string());
        }
    }
    if values.len() != sample_ids.len() {
        return Err(Error::invalid(format!(
            "response has {} values but the count table has {} samples",
            values.len(),
            sample_ids.len()
        )));
    }
    if ids.is_empty() {
        return Ok(DVector::from_vec(values));
    }
    let lookup: std::collections::HashMap<&str, f64> = ids.iter().map(String::as_str).zip(values.iter().copied()).collect();
    sample_ids
        .iter()
        .map(|s| lookup.get(s.as_str()).copied().ok_or_else(|| Error::invalid(format!("no response for sample {s:?}"))))
        .collect::<Result<Vec<f64>>>()
        .map(DVector::from_vec)
}

/// Reads `sample_id,group_id` rows; a first row naming an unknown sample is a header.
pub fn load_groups(path: &Path, counts: &CountMatrix) -> Result<Vec<ReplicateGroup>> {
    let recs = records(path)?;
    let skip = usize::from(recs.first().is_some_and(|r| !counts.sample_ids().iter().any(|s| Some(s.as_str()) == r.get(0))));
    let mut pairs = Vec::new();
    for (k, r) in recs.iter().enumerate().skip(skip) {
        if r.len() != 2 {
            return Err(parse_error(path, k + 1, 1, "expected sample_id,group_id"));
        }
        pairs.push((r[0].to_string(), r[1].to_string()));
    }
    groups_from_labels(counts.sample_ids(), &pairs)
}

/// Numeric CSV matrix; a non-numeric first row is a header and a non-numeric
/// first column holds row labels.
pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let recs = records(path)?;
    let first = recs.first().ok_or_else(|| parse_error(path, 1, 1, "empty file"))?;
    let skip = usize::from(first.iter().any(|c| c.parse::<f64>().is_err()));
    let body = &recs[skip..];
    let labelled = body.iter().any(|r| r.get(0).is_some_and(|c| c.parse::<f64>().is_err()));
    let lead = usize::from(labelled);
    let width = body.first().map_or(0, |r| r.len().saturating_sub(lead));
    if body.is_empty() || width == 0 {
        return Err(parse_error(path, 1, 1, "no numeric rows"));
    }
    let mut m = DMatrix::zeros(body.len(), width);
    for (i, r) in body.iter().enumerate() {
        if r.len() != width + lead {
            return Err(parse_error(path, i + skip + 1, 1, "ragged row"));
        }
        for (j, c) in r.iter().skip(lead).enumerate() {
            m[(i, j)] = c
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(path, i + skip + 1, j + lead + 1, format!("not a finite number {c:?}")))?;
        }
    }
    Ok(m)
}

/// Corrected, constraint-ready regression input.
pub struct Prepared {
    pub counts: CountMatrix,
    pub design: CorrectedDesign,
    pub alpha_estimates: Vec<AlphaEstimate>,
    pub groups: Vec<ReplicateGroup>,
    pub data: RegressionData,
    /// Response mean removed when the constraint does not absorb an intercept.
    pub intercept: Option<f64>,
}

pub fn prepare(input: &InputArgs, warnings: &mut Vec<String>) -> Result<Prepared> {
    let counts = load_counts(&input.counts)?;
    let y = load_response(&input.response, counts.sample_ids())?;
    let groups = if input.pair_halves {
        pair_halves(counts.nrows())?
    } else if let Some(g) = &input.groups {
        load_groups(g, &counts)?
    } else {
        Vec::new()
    };
    let mut alpha_estimates = Vec::new();
    let recipe = match input.correction {
        CorrectionKind::Zr => CorrectionRecipe::ZeroReplace { c: input.zr_c },
        CorrectionKind::Vc => match input.alpha.trim() {
            "mom" => {
                if groups.is_empty() {
                    return Err(Error::invalid("--alpha mom needs --groups or --pair-halves"));
                }
                let (alpha, est) = estimate_alpha_all(&counts, &groups)?;
                alpha_estimates = est;
                CorrectionRecipe::DirichletMultinomial { alpha }
            }
            other => {
                let a = parse_alpha(other)?;
                if a.is_infinite() {
                    CorrectionRecipe::MultinomialHalf
                } else {
                    CorrectionRecipe::DirichletMultinomial { alpha: vec![a; counts.nrows()] }
                }
            }
        },
    };
    let design = correct(&counts, &recipe)?;
    let constraint = match &input.constraint {
        Some(path) => {
            let c = load_matrix(path)?;
            if c.nrows() != counts.ncols() {
                return Err(Error::invalid(format!(
                    "constraint has {} rows but there are {} taxa",
                    c.nrows(),
                    counts.ncols()
                )));
            }
            ConstraintSpec::new(c)?
        }
        None => ConstraintSpec::sum_to_zero(counts.ncols()),
    };
    let mut b = design.matrix.clone();
    let mut y = y;
    let intercept = if constraint.contains_ones() {
        None
    } else {
        warnings.push("the constraint does not contain the all-ones vector; fitting with an intercept (centering)".into());
        for mut col in b.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        let m = y.mean();
        y.add_scalar_mut(-m);
        Some(m)
    };
    let data = RegressionData::new(b, y, constraint)?;
    Ok(Prepared { counts, design, alpha_estimates, groups, data, intercept })
}

#[derive(Serialize)]
struct FitOutput<'a> {
    correction: String,
    design: &'a CorrectedDesign,
    alpha_estimates: &'a [AlphaEstimate],
    lambda_rule: String,
    cv: Option<CvResult>,
    intercept: Option<f64>,
    kkt_certificate: f64,
    taxa: &'a [String],
    fit: FitResult,
}

fn coefficient_csv(taxa: &[String], beta: &[f64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["taxon", "coefficient"])?;
    for (t, b) in taxa.iter().zip(beta) {
        w.write_record([t.clone(), b.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn cmd_fit(a: &FitArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let prep = prepare(&a.input, &mut out.warnings)?;
    let solver = SolverConfig::default();
    let path = PathSpec { num: a.input.path_num, ratio: a.input.path_ratio };
    let (lambda, cv) = match parse_lambda_rule(&a.lambda, a.input.folds, path)? {
        LambdaRule::Cv { folds, path } => {
            let labels = row_labels(prep.counts.nrows(), &prep.groups);
            let groups = (!a.input.row_folds).then_some(&labels[..]);
            let res = cv_select_lambda(&prep.data, &CvConfig { folds, path, seed, solver: solver.clone() }, groups)?;
            (res.lambda_star, Some(res))
        }
        LambdaRule::Fixed { lambda } => (lambda, None),
        LambdaRule::Theoretical { .. } => return Err(Error::invalid("fit takes cv or a numeric penalty")),
    };
    let fit = ConstrainedLasso::new(&prep.data).solve(lambda, &solver)?;
    if !fit.converged {
        out.warnings.push(format!("solver stopped after {} iterations without meeting tolerances", fit.iterations));
    }
    let certificate = kkt_certificate(&prep.data, &fit.beta_hat, lambda)?;
    let coef = coefficient_csv(prep.counts.taxon_ids(), &fit.beta_hat)?;
    out.message = format!(
        "lambda = {lambda:.6e}, {} nonzero coefficients, KKT gap {certificate:.2e}",
        fit.support(0.0).len()
    );
    out.json(
        "fit.json",
        &FitOutput {
            correction: prep.design.recipe.label(),
            design: &prep.design,
            alpha_estimates: &prep.alpha_estimates,
            lambda_rule: a.lambda.clone(),
            cv,
            intercept: prep.intercept,
            kkt_certificate: certificate,
            taxa: prep.counts.taxon_ids(),
            fit,
        },
    )?;
    out.add("coefficients.csv", coef);
    Ok(())
}

#[derive(Serialize)]
struct SelectOutput<'a> {
    correction: String,
    alpha_estimates: &'a [AlphaEstimate],
    taxa: &'a [String],
    report: &'a StabilityReport,
    refit: Option<Vec<f64>>,
}

fn cmd_select(a: &SelectArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let prep = prepare(&a.input, &mut out.warnings)?;
    if !(a.subsample_frac > 0.0 && a.subsample_frac <= 1.0) {
        return Err(Error::invalid("--subsample-frac must lie in (0, 1]"));
    }
    if a.threshold > 1.0 {
        out.warnings.push(format!("threshold {} exceeds 1; no taxon can be selected", a.threshold));
    }
    let n = prep.data.n();
    let cfg = StabilityConfig {
        num_bootstrap: a.bootstrap,
        subsample_size: Some(((n as f64 * a.subsample_frac).floor() as usize).max(1)),
        threshold: a.threshold,
        folds: a.input.folds,
        seed,
        path: PathSpec { num: a.input.path_num, ratio: a.input.path_ratio },
        solver: SolverConfig::default(),
    };
    let labels = row_labels(n, &prep.groups);
    let grouped = !prep.groups.is_empty() && !a.input.row_folds;
    let report = stability_select(&prep.data, &cfg, grouped.then_some(&labels[..]))?;
    let refit = if report.selected.is_empty() {
        out.warnings.push("no taxon reached the selection threshold".into());
        None
    } else {
        match refit_on_support(&prep.data, &report.selected) {
            Ok(b) => Some(b),
            Err(e @ Error::Infeasible(_)) => {
                out.warnings.push(format!("refit skipped: {e}"));
                None
            }
            Err(e) => return Err(e),
        }
    };
    let taxa = prep.counts.taxon_ids();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["taxon", "frequency", "selected", "refit_coefficient", "sign"])?;
    for j in 0..taxa.len() {
        let selected = report.selected.contains(&j);
        let coef = refit.as_ref().filter(|_| selected).map(|b| b[j]);
        let sign = match coef {
            Some(c) if c > 0.0 => "+",
            Some(c) if c < 0.0 => "-",
            Some(_) => "0",
            None => "",
        };
        w.write_record([
            taxa[j].clone(),
            report.selection_frequency[j].to_string(),
            selected.to_string(),
            coef.map(|c| c.to_string()).unwrap_or_default(),
            sign.to_string(),
        ])?;
    }
    let csv_bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    out.message = format!("{} of {} taxa selected", report.selected.len(), taxa.len());
    out.json(
        "stability.json",
        &SelectOutput {
            correction: prep.design.recipe.label(),
            alpha_estimates: &prep.alpha_estimates,
            taxa,
            report: &report,
            refit,
        },
    )?;
    out.add("stability.csv", csv_bytes);
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let scenario = match &a.scenario {
        Some(path) => SimScenario::from_json(&fs::read_to_string(path)?)?,
        None => {
            let mut s = SimScenario::reference(a.n, a.p, parse_alpha(&a.alpha)?, seed);
            s.sigma = a.sigma;
            s.shared_noise = a.shared_noise;
            s.depth_law = if a.poisson_depth {
                DepthLaw::Poisson { mean: a.depth_mean }
            } else {
                DepthLaw::NegativeBinomial { mean: a.depth_mean, variance: a.depth_variance }
            };
            s
        }
    };
    let d = simulate(&scenario)?;
    let ids = d.counts.sample_ids();
    let taxa = d.counts.taxon_ids();

    let mut counts = Vec::new();
    d.counts.write_csv(&mut counts)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "y"])?;
    for (id, y) in ids.iter().zip(d.y.iter()) {
        w.write_record([id.clone(), y.to_string()])?;
    }
    let response = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string()];
    header.extend(taxa.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(d.x_true.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    let comps = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "noise"])?;
    for (id, e) in ids.iter().zip(d.epsilon.iter()) {
        w.write_record([id.clone(), e.to_string()])?;
    }
    let noise = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "group_id"])?;
    for g in &d.replicate_groups {
        for &r in &g.member_rows {
            w.write_record([ids[r].clone(), g.group_id.clone()])?;
        }
    }
    let groups = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;

    out.add("counts.csv", counts);
    out.add("response.csv", response);
    out.add("compositions.csv", comps);
    out.add("noise.csv", noise);
    out.add("groups.csv", groups);
    out.add("beta_star.csv", coefficient_csv(taxa, &d.beta_star)?);
    out.json("scenario.json", &scenario)?;
    out.message = format!("simulated {} samples x {} taxa", scenario.n, scenario.p);
    Ok(())
}

fn bar_plot(title: &str, rows: &[(String, f64)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let top = rows.iter().map(|r| r.1.abs()).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let mut s = format!("{title}\n");
    for (label, v) in rows {
        let len = if top > 0.0 && v.is_finite() { (40.0 * v.abs() / top).round() as usize } else { 0 };
        let bar = if *v < 0.0 { "-".repeat(len) } else { "#".repeat(len) };
        s.push_str(&format!("{label:<width$}  {v:>12.5e}  {bar}\n"));
    }
    s
}

#[derive(Serialize)]
struct SummaryRow {
    n: usize,
    p: usize,
    alpha: String,
    method: String,
    median_est_err: f64,
    median_pred_err: f64,
    ok: usize,
    failed: usize,
}

pub fn summarize_grid(rows: &[GridRow]) -> Vec<(usize, usize, f64, String, f64, f64, usize, usize)> {
    let mut keys: Vec<(usize, usize, u64, String)> = Vec::new();
    for r in rows {
        let k = (r.n, r.p, r.alpha.to_bits(), r.method.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(n, p, a, m)| {
            let sel: Vec<&GridRow> =
                rows.iter().filter(|r| r.n == n && r.p == p && r.alpha.to_bits() == a && r.method == m).collect();
            let est: Vec<f64> = sel.iter().map(|r| r.est_err).collect();
            let pred: Vec<f64> = sel.iter().map(|r| r.pred_err).collect();
            let ok = sel.iter().filter(|r| r.status == "ok").count();
            (n, p, f64::from_bits(a), m, median(&est), median(&pred), ok, sel.len() - ok)
        })
        .collect()
}

fn cmd_bench(a: &BenchArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let grid = match &a.grid {
        Some(path) => serde_json::from_str::<GridConfig>(&fs::read_to_string(path)?)?,
        None => GridConfig {
            ns: a.ns.clone(),
            ps: a.ps.clone(),
            alphas: a.alphas.iter().map(|s| parse_alpha(s)).collect::<Result<_>>()?,
            replicates: a.replicates,
            lambda_rule: parse_lambda_rule(&a.lambda, a.folds, PathSpec::default())?,
            shared_noise: a.shared_noise,
            master_seed: seed,
            composition_law: CompositionLaw::default(),
            ..GridConfig::default()
        },
    };
    let rows = run_scenario_grid(&grid)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        out.warnings.push(format!("{failed} fits failed; see the status column"));
    }
    let mut results = Vec::new();
    write_grid_csv(&rows, &mut results)?;
    let summary = summarize_grid(&rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    for (n, p, alpha, method, est, pred, ok, bad) in &summary {
        w.serialize(SummaryRow {
            n: *n,
            p: *p,
            alpha: if alpha.is_infinite() { "inf".into() } else { alpha.to_string() },
            method: method.clone(),
            median_est_err: *est,
            median_pred_err: *pred,
            ok: *ok,
            failed: *bad,
        })?;
    }
    let summary_csv = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    out.add("results.csv", results);
    out.add("summary.csv", summary_csv);
    out.json("grid.json", &grid)?;
    if a.plot {
        let bars: Vec<(String, f64)> =
            summary.iter().map(|(n, p, al, m, est, ..)| (format!("n={n} p={p} alpha={al} {m}"), *est)).collect();
        out.add("plot.txt", bar_plot("median estimation error", &bars).into_bytes());
    }
    out.message = format!("{} rows ({} cells)", rows.len(), summary.len() / grid.methods.len().max(1));
    Ok(())
}

fn cmd_bias(a: &BiasArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let mode = match a.mode {
        BiasModeArg::Exact => BiasMode::Exact,
        BiasModeArg::Mc => BiasMode::MonteCarlo { draws: a.draws, seed },
    };
    let curve = bias_curve(&a.nu, &default_bias_estimators(), mode)?;
    let mut csv_bytes = Vec::new();
    curve.write_csv(&mut csv_bytes)?;
    out.add("bias.csv", csv_bytes);
    out.json("bias.json", &curve)?;
    if a.plot {
        let bars: Vec<(String, f64)> =
            curve.points.iter().map(|pt| (format!("nu={} {}", pt.nu, pt.estimator), pt.bias)).collect();
        out.add("plot.txt", bar_plot("bias E[phi(W)] - log(nu), W ~ Poisson(nu)", &bars).into_bytes());
    }
    out.message = format!("{} bias values", curve.points.len());
    Ok(())
}

fn cmd_rip(a: &RipArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let m = load_matrix(&a.matrix)?;
    let method = match a.randomized {
        Some(k) => RipMethod::Randomized { num_supports: k, seed },
        None => RipMethod::Exhaustive,
    };
    let report = rip_constant(&m, a.s, method, !a.raw)?;
    if !report.exact {
        out.warnings.push("randomized scan: delta_s is a lower bound".into());
    }
    if a.raw {
        out.warnings.push("raw (uncentered) matrix; the recovery condition is stated for the centered design".into());
    }
    out.message = format!("delta_{} = {:.6}", report.s, report.delta_s);
    out.json("rip.json", &report)
}

fn cmd_scan(a: &ScanArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let mut base = SimScenario::reference(a.n, a.p, parse_alpha(&a.alpha)?, seed);
    base.sigma = a.sigma;
    base.paired = a.design == DesignArg::Vc;
    base.depth_law = DepthLaw::Poisson { mean: a.depth_mean };
    let ints = |v: &[f64]| -> Result<Vec<usize>> {
        v.iter()
            .map(|&x| {
                if x >= 1.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(Error::invalid(format!("level {x} must be a positive integer")))
                }
            })
            .collect()
    };
    let axis = match a.kind {
        ScanKind::Rate => ScanAxis::SampleSize(ints(&a.levels)?),
        ScanKind::Depth => ScanAxis::DepthScale(a.levels.clone()),
        ScanKind::Sparsity => ScanAxis::Sparsity(ints(&a.levels)?),
    };
    let design = match a.design {
        DesignArg::Oracle => GridMethod::Oracle,
        DesignArg::Vc => GridMethod::VcMom,
        DesignArg::VcHalf => GridMethod::VcHalf,
    };
    let cfg = ScanConfig {
        base,
        axis,
        design,
        replicates: a.replicates,
        lambda_rule: parse_lambda_rule(&a.lambda, 5, PathSpec::default())?,
        bootstrap: a.bootstrap,
        master_seed: seed,
        solver: SolverConfig::default(),
    };
    let report = run_scan(&cfg)?;
    if report.failures > 0 {
        out.warnings.push(format!("{} fits failed", report.failures));
    }
    let mut bytes = Vec::new();
    report.write_csv(&mut bytes)?;
    out.add("scan.csv", bytes);
    out.json("scan.json", &report)?;
    out.message = format!("slope {:.4} (95% CI {:.4} .. {:.4})", report.slope, report.slope_ci.0, report.slope_ci.1);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_rules() {
        let path = PathSpec::default();
        assert!(matches!(parse_lambda_rule("cv", 5, path), Ok(LambdaRule::Cv { folds: 5, .. })));
        assert_eq!(parse_lambda_rule("0.1", 5, path).unwrap(), LambdaRule::Fixed { lambda: 0.1 });
        assert_eq!(parse_lambda_rule("theory:2", 5, path).unwrap(), LambdaRule::Theoretical { constant: 2.0 });
        assert!(parse_lambda_rule("-1", 5, path).is_err());
    }

    #[test]
    fn exit_codes_are_distinct_by_category() {
        assert_eq!(exit_code(&Error::invalid("x")), 3);
        assert_eq!(exit_code(&Error::Budget("x".into())), 7);
        let j = error_json(&Error::Budget("too many".into()));
        assert!(j.contains("\"error\":\"budget_exceeded\""));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
