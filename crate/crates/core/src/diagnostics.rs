//! Restricted isometry constants, bias of log-count estimators, and error
//! scaling experiments.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::{center_design, ConstraintSpec};
use crate::error::{Error, Result};
use crate::linalg::select_columns;
use crate::rng::{derive_seed, rng_for};
use crate::simulator::{fit_with_rule, simulate, GridMethod, LambdaRule, SimScenario, DEFAULT_BETA};
use crate::solver::SolverConfig;

/// Largest support count the exhaustive RIP scan will enumerate.
pub const RIP_BUDGET: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RipMethod {
    Exhaustive,
    Randomized { num_supports: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RipReport {
    pub s: usize,
    pub delta_s: f64,
    pub method: RipMethod,
    /// True for exhaustive scans; randomized values are lower bounds.
    pub exact: bool,
    pub n: usize,
    pub p: usize,
    /// Whether the sum-to-zero centering was applied before the scan.
    pub centered: bool,
    pub worst_support: Vec<usize>,
    pub supports_checked: u64,
}

pub fn binomial(p: usize, s: usize) -> f64 {
    (0..s).fold(1.0, |acc, k| acc * (p - k) as f64 / (k + 1) as f64)
}

fn support_delta(gram: &DMatrix<f64>, support: &[usize], n: f64) -> f64 {
    let g = DMatrix::from_fn(support.len(), support.len(), |a, b| gram[(support[a], support[b])]);
    let eig = SymmetricEigen::new(g).eigenvalues;
    let hi = eig.max() / n - 1.0;
    let lo = 1.0 - eig.min() / n;
    hi.max(lo)
}

/// Advances `idx` to the next `s`-subset of `0..p` in lexicographic order,
/// keeping `idx[0]` fixed. Returns false when exhausted.
fn next_subset(idx: &mut [usize], p: usize) -> bool {
    let s = idx.len();
    let mut k = s;
    while k > 1 {
        k -= 1;
        if idx[k] < p - (s - k) {
            idx[k] += 1;
            for m in k + 1..s {
                idx[m] = idx[m - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn better(a: (f64, Vec<usize>), b: (f64, Vec<usize>)) -> (f64, Vec<usize>) {
    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

/// `delta_s = max_S max(lambda_max(G_S)/n - 1, 1 - lambda_min(G_S)/n)` over
/// size-`s` supports. With `centered`, the matrix is first multiplied by
/// `I - 11^T/p`.
pub fn rip_constant(matrix: &DMatrix<f64>, s: usize, method: RipMethod, centered: bool) -> Result<RipReport> {
    let (n, p) = matrix.shape();
    if s == 0 || s > p {
        return Err(Error::invalid(format!("sparsity {s} must lie in 1..={p}")));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let m = if centered { center_design(matrix, &ConstraintSpec::sum_to_zero(p))? } else { matrix.clone() };
    let gram = m.transpose() * &m;
    let nf = n as f64;
    let (best, checked) = match method {
        RipMethod::Exhaustive => {
            let count = binomial(p, s);
            if count > RIP_BUDGET {
                return Err(Error::Budget(format!(
                    "{count:.3e} supports of size {s} exceed the exhaustive budget of {RIP_BUDGET:e}; use randomized mode"
                )));
            }
            let best = (0..=p - s)
                .into_par_iter()
                .map(|first| {
                    let mut idx: Vec<usize> = (first..first + s).collect();
                    let mut best = (f64::NEG_INFINITY, idx.clone());
                    loop {
                        best = better(best, (support_delta(&gram, &idx, nf), idx.clone()));
                        if !next_subset(&mut idx, p) {
                            break;
                        }
                    }
                    best
                })
                .reduce(|| (f64::NEG_INFINITY, Vec::new()), better);
            (best, count as u64)
        }
        RipMethod::Randomized { num_supports, seed } => {
            if num_supports == 0 {
                return Err(Error::invalid("randomized scan needs at least one support"));
            }
            let best = (0..num_supports)
                .into_par_iter()
                .map(|k| {
                    let mut rng = rng_for(seed, &[k as u64]);
                    let mut idx = rand::seq::index::sample(&mut rng, p, s).into_vec();
                    idx.sort_unstable();
                    (support_delta(&gram, &idx, nf), idx)
                })
                .reduce(|| (f64::NEG_INFINITY, Vec::new()), better);
            (best, num_supports as u64)
        }
    };
    Ok(RipReport {
        s,
        delta_s: best.0.max(0.0),
        method,
        exact: matches!(method, RipMethod::Exhaustive),
        n,
        p,
        centered,
        worst_support: best.1,
        supports_checked: checked,
    })
}

/// Transformations of a count `W` compared against `log(nu)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BiasEstimator {
    /// `log(max(W, c))`.
    ZeroReplace { c: f64 },
    /// `log(W + c)`.
    Add { c: f64 },
}

impl BiasEstimator {
    pub fn apply(&self, w: f64) -> f64 {
        match *self {
            BiasEstimator::ZeroReplace { c } => w.max(c).ln(),
            BiasEstimator::Add { c } => (w + c).ln(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            BiasEstimator::ZeroReplace { c } => format!("zero_replace({c})"),
            BiasEstimator::Add { c } => format!("add({c})"),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            BiasEstimator::ZeroReplace { c } | BiasEstimator::Add { c } if c > 0.0 && c.is_finite() => Ok(()),
            other => Err(Error::invalid(format!("estimator {} needs a positive constant", other.label()))),
        }
    }
}

pub fn default_bias_estimators() -> Vec<BiasEstimator> {
    vec![
        BiasEstimator::ZeroReplace { c: 0.5 },
        BiasEstimator::Add { c: 0.25 },
        BiasEstimator::Add { c: 0.5 },
        BiasEstimator::Add { c: 0.75 },
        BiasEstimator::Add { c: 1.0 },
    ]
}

pub const DEFAULT_NU_GRID: [f64; 6] = [2.0, 5.0, 10.0, 20.0, 50.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BiasMode {
    /// Poisson series truncated ten standard deviations out.
    Exact,
    /// Simulation; `draws = None` sizes the sample for standard error <= 1e-3.
    MonteCarlo { draws: Option<usize>, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub nu: f64,
    pub estimator: String,
    pub bias: f64,
    pub std_error: f64,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCurve {
    pub nu_grid: Vec<f64>,
    pub estimators: Vec<BiasEstimator>,
    pub mode: BiasMode,
    pub points: Vec<BiasPoint>,
}

impl BiasCurve {
    pub fn bias(&self, nu: f64, estimator: &BiasEstimator) -> Option<f64> {
        let label = estimator.label();
        self.points.iter().find(|pt| pt.nu == nu && pt.estimator == label).map(|pt| pt.bias)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["nu", "estimator", "bias", "std_error", "draws"])?;
        for pt in &self.points {
            w.write_record([
                pt.nu.to_string(),
                pt.estimator.clone(),
                pt.bias.to_string(),
                pt.std_error.to_string(),
                pt.draws.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `E[phi(W)]` for `W ~ Poisson(nu)`, summing the pmf over `nu +- 10 sqrt(nu)`
/// (at least `0..=nu+40`).
pub fn poisson_expectation(nu: f64, phi: impl Fn(f64) -> f64) -> f64 {
    let sd = nu.sqrt();
    let lo = (nu - 10.0 * sd).floor().max(0.0) as u64;
    let hi = (nu + 10.0 * sd + 40.0).ceil() as u64;
    let ln_nu = nu.ln();
    (lo..=hi)
        .map(|k| {
            let kf = k as f64;
            (kf * ln_nu - nu - ln_gamma(kf + 1.0)).exp() * phi(kf)
        })
        .sum()
}

/// Bias `E[phi(W)] - log(nu)` per grid point and estimator, `W ~ Poisson(nu)`.
pub fn bias_curve(nu_grid: &[f64], estimators: &[BiasEstimator], mode: BiasMode) -> Result<BiasCurve> {
    if let Some(nu) = nu_grid.iter().find(|&&nu| !(nu > 0.0 && nu.is_finite())) {
        return Err(Error::invalid(format!("grid value {nu} is not a positive finite rate")));
    }
    for e in estimators {
        e.validate()?;
    }
    let per_nu: Vec<Vec<BiasPoint>> = nu_grid
        .par_iter()
        .enumerate()
        .map(|(g, &nu)| match mode {
            BiasMode::Exact => estimators
                .iter()
                .map(|e| BiasPoint {
                    nu,
                    estimator: e.label(),
                    bias: poisson_expectation(nu, |w| e.apply(w)) - nu.ln(),
                    std_error: 0.0,
                    draws: 0,
                })
                .collect(),
            BiasMode::MonteCarlo { draws, seed } => monte_carlo_bias(nu, estimators, draws, derive_seed(seed, &[g as u64])),
        })
        .collect();
    Ok(BiasCurve {
        nu_grid: nu_grid.to_vec(),
        estimators: estimators.to_vec(),
        mode,
        points: per_nu.into_iter().flatten().collect(),
    })
}

fn monte_carlo_bias(nu: f64, estimators: &[BiasEstimator], draws: Option<usize>, seed: u64) -> Vec<BiasPoint> {
    let mut rng = rng_for(seed, &[]);
    let law = Poisson::new(nu).expect("validated rate");
    let draws = draws.unwrap_or_else(|| {
        // pilot run sizes the sample so every estimator reaches SE <= 1e-3
        let pilot: Vec<f64> = (0..10_000).map(|_| law.sample(&mut rng)).collect();
        let worst = estimators.iter().map(|e| sample_sd(pilot.iter().map(|&w| e.apply(w)))).fold(0.0, f64::max);
        ((1.1 * worst / 1e-3).powi(2).ceil() as usize).max(10_000)
    });
    let w: Vec<f64> = (0..draws).map(|_| law.sample(&mut rng)).collect();
    estimators
        .iter()
        .map(|e| {
            let vals = w.iter().map(|&x| e.apply(x));
            let mean = vals.clone().sum::<f64>() / draws as f64;
            BiasPoint {
                nu,
                estimator: e.label(),
                bias: mean - nu.ln(),
                std_error: sample_sd(vals) / (draws as f64).sqrt(),
                draws,
            }
        })
        .collect()
}

fn sample_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// What a scan varies across levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "levels", rename_all = "snake_case")]
pub enum ScanAxis {
    SampleSize(Vec<usize>),
    /// Multipliers of the base depth law's mean.
    DepthScale(Vec<f64>),
    Sparsity(Vec<usize>),
}

impl ScanAxis {
    fn levels(&self) -> Vec<f64> {
        match self {
            ScanAxis::SampleSize(v) | ScanAxis::Sparsity(v) => v.iter().map(|&x| x as f64).collect(),
            ScanAxis::DepthScale(v) => v.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            ScanAxis::SampleSize(_) => "n",
            ScanAxis::DepthScale(_) => "depth_scale",
            ScanAxis::Sparsity(_) => "s",
        }
    }
}

/// Sum-zero coefficients with `s` nonzeros: the default vector when `s = 7`,
/// otherwise its first `s - 1` entries (cycled) closed by `-sum`.
pub fn sparse_beta(p: usize, s: usize) -> Result<Vec<f64>> {
    if s < 2 || s > p {
        return Err(Error::invalid(format!("sparsity {s} must lie in 2..={p}")));
    }
    let mut b = vec![0.0; p];
    if s == DEFAULT_BETA.len() {
        b[..s].copy_from_slice(&DEFAULT_BETA);
        return Ok(b);
    }
    for j in 0..s - 1 {
        b[j] = DEFAULT_BETA[j % DEFAULT_BETA.len()];
    }
    let sum: f64 = b.iter().sum();
    b[s - 1] = -sum;
    if b[s - 1] == 0.0 {
        b[s - 1] = 1.0;
        b[0] -= 1.0;
    }
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub base: SimScenario,
    pub axis: ScanAxis,
    pub design: GridMethod,
    pub replicates: usize,
    pub lambda_rule: LambdaRule,
    pub bootstrap: usize,
    pub master_seed: u64,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub axis: String,
    pub levels: Vec<f64>,
    pub median_error: Vec<f64>,
    /// Estimation errors per level and replicate (NaN for failed fits).
    pub errors: Vec<Vec<f64>>,
    /// Least-squares slope of log(median error) on log(level).
    pub slope: f64,
    /// Percentile bootstrap 95% interval for the slope.
    pub slope_ci: (f64, f64),
    pub failures: usize,
}

impl ScanReport {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([self.axis.as_str(), "median_error", "replicates", "slope", "slope_lo", "slope_hi"])?;
        for (k, level) in self.levels.iter().enumerate() {
            w.write_record([
                level.to_string(),
                self.median_error[k].to_string(),
                self.errors[k].iter().filter(|e| e.is_finite()).count().to_string(),
                self.slope.to_string(),
                self.slope_ci.0.to_string(),
                self.slope_ci.1.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn is_decreasing(&self) -> bool {
        self.median_error.windows(2).all(|w| w[1] < w[0])
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Log-log least-squares slope; `Some(0)` when every median is zero, `None`
/// when only some are.
pub fn log_log_slope(levels: &[f64], medians: &[f64]) -> Option<f64> {
    if medians.iter().all(|&m| m == 0.0) {
        return Some(0.0);
    }
    if medians.iter().any(|&m| !(m > 0.0)) {
        return None;
    }
    let x: Vec<f64> = levels.iter().map(|l| l.ln()).collect();
    let y: Vec<f64> = medians.iter().map(|m| m.ln()).collect();
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Simulates and fits `replicates` datasets per level, then summarizes the
/// median estimation error and its log-log slope against the level.
pub fn run_scan(cfg: &ScanConfig) -> Result<ScanReport> {
    let levels = cfg.axis.levels();
    if levels.len() < 2 {
        return Err(Error::invalid("a scan needs at least two levels"));
    }
    if cfg.replicates == 0 {
        return Err(Error::invalid("a scan needs at least one replicate"));
    }
    let scenarios: Vec<SimScenario> = (0..levels.len())
        .map(|k| {
            let mut s = cfg.base.clone();
            match &cfg.axis {
                ScanAxis::SampleSize(v) => s.n = v[k],
                ScanAxis::DepthScale(v) => s.depth_law = cfg.base.depth_law.scaled(v[k]),
                ScanAxis::Sparsity(v) => s.beta_star = sparse_beta(s.p, v[k])?,
            }
            s.validate()?;
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let tasks: Vec<(usize, usize)> =
        (0..levels.len()).flat_map(|k| (0..cfg.replicates).map(move |r| (k, r))).collect();
    let flat: Vec<f64> = tasks
        .par_iter()
        .map(|&(k, r)| {
            let mut s = scenarios[k].clone();
            s.seed = derive_seed(cfg.master_seed, &[k as u64, r as u64]);
            let one = || -> Result<f64> {
                let data = simulate(&s)?;
                let design = cfg.design.design(&data)?;
                let (beta, _) = fit_with_rule(
                    design,
                    &data.y,
                    &cfg.lambda_rule,
                    &s,
                    cfg.design == GridMethod::Oracle,
                    &data.replicate_groups,
                    derive_seed(s.seed, &[0xCF]),
                    &cfg.solver,
                )?;
                Ok(beta.iter().zip(&s.beta_star).map(|(a, b)| (a - b).powi(2)).sum())
            };
            one().unwrap_or(f64::NAN)
        })
        .collect();
    let errors: Vec<Vec<f64>> = flat.chunks(cfg.replicates).map(<[f64]>::to_vec).collect();
    let failures = flat.iter().filter(|e| !e.is_finite()).count();
    let median_error: Vec<f64> = errors.iter().map(|e| median(e)).collect();
    let slope = log_log_slope(&levels, &median_error)
        .ok_or_else(|| Error::Numerical("median errors mix zero and positive values; no log-log slope".into()))?;

    let mut rng = rng_for(cfg.master_seed, &[0xB007]);
    let mut boot: Vec<f64> = (0..cfg.bootstrap)
        .filter_map(|_| {
            let meds: Vec<f64> = errors
                .iter()
                .map(|e| {
                    let draw: Vec<f64> = (0..e.len()).map(|_| e[rng.random_range(0..e.len())]).collect();
                    median(&draw)
                })
                .collect();
            log_log_slope(&levels, &meds)
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let slope_ci = if boot.is_empty() { (f64::NAN, f64::NAN) } else { (quantile(&boot, 0.025), quantile(&boot, 0.975)) };
    Ok(ScanReport {
        axis: cfg.axis.name().into(),
        levels,
        median_error,
        errors,
        slope,
        slope_ci,
        failures,
    })
}

/// Sample-size scan; see [`run_scan`].
pub fn rate_scan(base: &SimScenario, n_grid: &[usize], replicates: usize, design: GridMethod, lambda_rule: LambdaRule, seed: u64) -> Result<ScanReport> {
    if n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("sample sizes must increase"));
    }
    run_scan(&ScanConfig {
        base: base.clone(),
        axis: ScanAxis::SampleSize(n_grid.to_vec()),
        design,
        replicates,
        lambda_rule,
        bootstrap: 1000,
        master_seed: seed,
        solver: SolverConfig::default(),
    })
}

/// Columns `support` of `m` (exposed for oracle tests).
pub fn submatrix(m: &DMatrix<f64>, support: &[usize]) -> DMatrix<f64> {
    select_columns(m, support)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn orthonormal_scaled_columns_are_isometric() {
        let q = gaussian(12, 5, 1).qr().q() * 12f64.sqrt();
        for s in 1..=5 {
            let r = rip_constant(&q, s, RipMethod::Exhaustive, false).unwrap();
            assert!(r.delta_s < 1e-12);
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        // Gram [[a, b], [b, c]] has eigenvalues (a+c)/2 +- sqrt(((a-c)/2)^2 + b^2)
        let m = gaussian(7, 2, 2);
        let g = m.transpose() * &m;
        let (a, b, c) = (g[(0, 0)], g[(0, 1)], g[(1, 1)]);
        let mid = 0.5 * (a + c);
        let rad = (0.25 * (a - c).powi(2) + b * b).sqrt();
        let expect = ((mid + rad) / 7.0 - 1.0).max(1.0 - (mid - rad) / 7.0);
        let r = rip_constant(&m, 2, RipMethod::Exhaustive, false).unwrap();
        assert!((r.delta_s - expect).abs() < 1e-12);
    }

    #[test]
    fn duplicate_column_breaks_isometry() {
        let mut m = gaussian(10, 4, 3);
        let c0 = m.column(0).clone_owned();
        m.set_column(3, &c0);
        assert!(rip_constant(&m, 2, RipMethod::Exhaustive, false).unwrap().delta_s >= 1.0 - 1e-12);
    }

    #[test]
    fn exhaustive_invariances_and_randomized_bound() {
        let m = gaussian(15, 7, 4);
        let base = rip_constant(&m, 3, RipMethod::Exhaustive, false).unwrap();
        let perm = [4, 0, 6, 2, 1, 5, 3];
        let mut pm = submatrix(&m, &perm);
        pm.column_mut(2).neg_mut();
        let other = rip_constant(&pm, 3, RipMethod::Exhaustive, false).unwrap();
        assert!((base.delta_s - other.delta_s).abs() < 1e-12);
        let rnd = rip_constant(&m, 3, RipMethod::Randomized { num_supports: 10, seed: 1 }, false).unwrap();
        assert!(!rnd.exact);
        assert!(rnd.delta_s <= base.delta_s + 1e-12);
        assert_eq!(base.supports_checked, 35);
    }

    #[test]
    fn budget_error() {
        let m = gaussian(5, 60, 5);
        assert!(matches!(rip_constant(&m, 10, RipMethod::Exhaustive, false), Err(Error::Budget(_))));
        assert!(rip_constant(&m, 0, RipMethod::Exhaustive, false).is_err());
    }

    #[test]
    fn series_matches_direct_small_sum() {
        // for tiny nu the pmf can be summed directly far into the tail
        let nu: f64 = 0.7;
        let mut direct = 0.0;
        let mut pmf = (-nu).exp();
        for k in 0..60 {
            direct += pmf * (k as f64 + 0.5).ln();
            pmf *= nu / (k as f64 + 1.0);
        }
        let series = poisson_expectation(nu, |w| (w + 0.5).ln());
        assert!((direct - series).abs() < 1e-13);
    }

    #[test]
    fn bias_examples() {
        let half = BiasEstimator::Add { c: 0.5 };
        let zr = BiasEstimator::ZeroReplace { c: 0.5 };
        let curve = bias_curve(&[20.0, 50.0, 1e4], &default_bias_estimators(), BiasMode::Exact).unwrap();
        assert!(curve.bias(50.0, &half).unwrap().abs() < curve.bias(50.0, &zr).unwrap().abs());
        assert!(curve.bias(1e4, &half).unwrap().abs() <= 1e-3);
        let at20: Vec<f64> =
            [0.25, 0.5, 0.75, 1.0].iter().map(|&c| curve.bias(20.0, &BiasEstimator::Add { c }).unwrap()).collect();
        assert!(at20.windows(2).all(|w| w[1] > w[0]));
        assert!(at20[0] < 0.0 && at20[3] > 0.0);
        assert!(bias_curve(&[0.0], &[half], BiasMode::Exact).is_err());
    }

    #[test]
    fn monte_carlo_agrees_with_series() {
        let est = default_bias_estimators();
        let grid = [2.0, 10.0];
        let exact = bias_curve(&grid, &est, BiasMode::Exact).unwrap();
        let mc = bias_curve(&grid, &est, BiasMode::MonteCarlo { draws: None, seed: 3 }).unwrap();
        for (a, b) in exact.points.iter().zip(&mc.points) {
            assert!(b.std_error <= 1e-3);
            assert!((a.bias - b.bias).abs() <= 3.0 * b.std_error, "{} {} {}", a.bias, b.bias, b.std_error);
        }
    }

    #[test]
    fn slope_helper() {
        let levels = [100.0, 200.0, 400.0];
        let med: Vec<f64> = levels.iter().map(|n| 3.0 / n).collect();
        assert!((log_log_slope(&levels, &med).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(log_log_slope(&levels, &[0.0, 0.0, 0.0]), Some(0.0));
        assert_eq!(log_log_slope(&levels, &[0.0, 1.0, 0.0]), None);
        assert_eq!(median(&[3.0, 1.0, f64::NAN, 2.0]), 2.0);
    }

    #[test]
    fn sparse_beta_sums_to_zero() {
        for s in 2..10 {
            let b = sparse_beta(20, s).unwrap();
            assert!(b.iter().sum::<f64>().abs() < 1e-12);
            assert_eq!(b.iter().filter(|v| **v != 0.0).count(), s);
        }
    }

    #[test]
    fn pure_noise_scan_is_flat() {
        let mut base = SimScenario::reference(40, 20, f64::INFINITY, 0);
        base.beta_star = vec![0.0; 20];
        let report = rate_scan(&base, &[40, 80], 4, GridMethod::Oracle, LambdaRule::Theoretical { constant: 4.0 }, 9).unwrap();
        assert!(report.slope_ci.0 <= 0.0 && report.slope_ci.1 >= 0.0);
    }
}
