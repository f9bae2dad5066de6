//! Cross-validated choice of the penalty, subsampling stability selection and
//! unpenalized refits on a selected support.

use std::collections::HashMap;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::RegressionData;
use crate::error::{Error, Result};
use crate::linalg::{complement_basis, orthonormal_columns, select_columns, select_rows};
use crate::rng::{derive_seed, rng_for};
use crate::solver::{lambda_grid, solve_path, ConstrainedLasso, SolverConfig};

/// Coefficients with magnitude above this count as selected.
pub const SELECTION_EPS: f64 = 1e-8;

/// Geometric penalty grid relative to the data's `lambda_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub num: usize,
    pub ratio: f64,
}

impl Default for PathSpec {
    fn default() -> Self {
        Self { num: 30, ratio: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub path: PathSpec,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 5, path: PathSpec::default(), seed: 0, solver: SolverConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda_star: f64,
    pub lambdas: Vec<f64>,
    /// Mean held-out squared prediction error per grid point.
    pub mean_error: Vec<f64>,
    pub std_error: Vec<f64>,
    pub fold_of_row: Vec<usize>,
    pub seed: u64,
}

impl CvResult {
    pub fn best_index(&self) -> usize {
        argmin_first(&self.mean_error)
    }
}

fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &e) in v.iter().enumerate() {
        if e < v[best] {
            best = k;
        }
    }
    best
}

/// Resampling units: each replicate group is one unit, every ungrouped row
/// its own unit. Units are numbered in order of first appearance.
fn units(n: usize, groups: Option<&[Option<usize>]>) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for row in 0..n {
        match groups.and_then(|g| g.get(row).copied().flatten()) {
            Some(label) => {
                let k = *slot.entry(label).or_insert_with(|| {
                    out.push(Vec::new());
                    out.len() - 1
                });
                out[k].push(row);
            }
            None => out.push(vec![row]),
        }
    }
    out
}

/// Seeded fold label per row; rows sharing a group label share a fold.
pub fn assign_folds(n: usize, folds: usize, groups: Option<&[Option<usize>]>, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    let units = units(n, groups);
    if units.len() < folds {
        return Err(Error::invalid(format!("{} resampling units cannot fill {folds} folds", units.len())));
    }
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut rng_for(seed, &[0xF01D]));
    let mut fold_of_row = vec![0; n];
    for (pos, &u) in order.iter().enumerate() {
        for &r in &units[u] {
            fold_of_row[r] = pos % folds;
        }
    }
    for f in 0..folds {
        let size = fold_of_row.iter().filter(|&&x| x == f).count();
        if size < 2 {
            return Err(Error::invalid(format!("fold {f} holds {size} row(s); each fold needs at least 2")));
        }
    }
    Ok(fold_of_row)
}

/// K-fold cross-validation over a geometric penalty grid anchored at the
/// full data's `lambda_max`.
pub fn cv_select_lambda(data: &RegressionData, config: &CvConfig, groups: Option<&[Option<usize>]>) -> Result<CvResult> {
    let n = data.n();
    if n < config.folds {
        return Err(Error::invalid(format!("{n} rows cannot fill {} folds", config.folds)));
    }
    let fold_of_row = assign_folds(n, config.folds, groups, config.seed)?;
    let lambda_max = ConstrainedLasso::new(data).lambda_max();
    let lambdas = lambda_grid(lambda_max, config.path.num, config.path.ratio)?;

    let per_fold: Vec<Vec<f64>> = (0..config.folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of_row[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of_row[i] == f).collect();
            let train_data = data.select_rows(&train);
            let problem = ConstrainedLasso::new(&train_data);
            let path = solve_path(&problem, &lambdas, &config.solver)?;
            let x_test = select_rows(data.design(), &test);
            Ok(path
                .iter()
                .map(|pt| {
                    let pred = &x_test * pt.fit.beta();
                    test.iter()
                        .enumerate()
                        .map(|(k, &i)| (data.response()[i] - pred[k]).powi(2))
                        .sum::<f64>()
                        / test.len() as f64
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let k = config.folds as f64;
    let mean_error: Vec<f64> = (0..lambdas.len())
        .map(|l| per_fold.iter().map(|e| e[l]).sum::<f64>() / k)
        .collect();
    let std_error: Vec<f64> = (0..lambdas.len())
        .map(|l| {
            let m = mean_error[l];
            let var = per_fold.iter().map(|e| (e[l] - m).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        })
        .collect();
    if mean_error.iter().any(|e| !e.is_finite()) {
        return Err(Error::Numerical("cross-validation error is not finite".into()));
    }
    let best = argmin_first(&mean_error);
    Ok(CvResult { lambda_star: lambdas[best], lambdas, mean_error, std_error, fold_of_row, seed: config.seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub num_bootstrap: usize,
    /// Rows per subsample; `None` means `floor(n/2)`.
    pub subsample_size: Option<usize>,
    pub threshold: f64,
    pub folds: usize,
    pub seed: u64,
    pub path: PathSpec,
    pub solver: SolverConfig,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            num_bootstrap: 100,
            subsample_size: None,
            threshold: 0.6,
            folds: 5,
            seed: 0,
            path: PathSpec::default(),
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub selection_frequency: Vec<f64>,
    pub selection_count: Vec<usize>,
    pub threshold: f64,
    pub selected: Vec<usize>,
    pub num_bootstrap: usize,
    pub subsample_size: usize,
    pub rng_seed: u64,
    /// How subsamples were drawn.
    pub sampling: String,
    pub lambda_stars: Vec<f64>,
}

impl StabilityReport {
    /// Re-applies a different threshold to the same frequencies.
    pub fn with_threshold(&self, threshold: f64) -> Self {
        let mut out = self.clone();
        out.threshold = threshold;
        out.selected = select_by_threshold(&self.selection_frequency, threshold);
        out
    }
}

fn select_by_threshold(freq: &[f64], threshold: f64) -> Vec<usize> {
    (0..freq.len()).filter(|&j| freq[j] >= threshold).collect()
}

/// Subsampling stability selection: each run draws a subsample without
/// replacement (whole replicate groups when groups are given), picks the
/// penalty by cross-validation on it, fits, and records which coefficients
/// are nonzero.
pub fn stability_select(
    data: &RegressionData,
    config: &StabilityConfig,
    groups: Option<&[Option<usize>]>,
) -> Result<StabilityReport> {
    let n = data.n();
    let m = config.subsample_size.unwrap_or(n / 2);
    if m > n || m == 0 {
        return Err(Error::invalid(format!("subsample size {m} must lie in 1..={n}")));
    }
    if config.num_bootstrap == 0 {
        return Err(Error::invalid("need at least one subsample"));
    }
    let units = units(n, groups);
    let grouped = units.iter().any(|u| u.len() > 1);
    let draw_units = if grouped {
        ((units.len() * m) as f64 / n as f64).floor().max(1.0) as usize
    } else {
        m
    };

    let runs: Vec<(Vec<bool>, f64)> = (0..config.num_bootstrap)
        .into_par_iter()
        .map(|run| {
            let mut rng = rng_for(config.seed, &[run as u64]);
            let mut order: Vec<usize> = (0..units.len()).collect();
            order.shuffle(&mut rng);
            let mut rows: Vec<usize> = order[..draw_units].iter().flat_map(|&u| units[u].iter().copied()).collect();
            rows.sort_unstable();
            let sub = data.select_rows(&rows);
            let sub_groups: Option<Vec<Option<usize>>> = groups.map(|g| rows.iter().map(|&r| g[r]).collect());
            let cv = CvConfig {
                folds: config.folds,
                path: config.path,
                seed: derive_seed(config.seed, &[run as u64, 1]),
                solver: config.solver.clone(),
            };
            let cv_res = cv_select_lambda(&sub, &cv, sub_groups.as_deref())?;
            let fit = ConstrainedLasso::new(&sub).solve(cv_res.lambda_star, &config.solver)?;
            let chosen = fit.beta_hat.iter().map(|b| b.abs() > SELECTION_EPS).collect();
            Ok((chosen, cv_res.lambda_star))
        })
        .collect::<Result<_>>()?;

    let p = data.p();
    let mut selection_count = vec![0usize; p];
    for (chosen, _) in &runs {
        for j in 0..p {
            selection_count[j] += usize::from(chosen[j]);
        }
    }
    let b = config.num_bootstrap as f64;
    let selection_frequency: Vec<f64> = selection_count.iter().map(|&c| c as f64 / b).collect();
    Ok(StabilityReport {
        selected: select_by_threshold(&selection_frequency, config.threshold),
        selection_frequency,
        selection_count,
        threshold: config.threshold,
        num_bootstrap: config.num_bootstrap,
        subsample_size: m,
        rng_seed: config.seed,
        sampling: if grouped {
            format!("without replacement, {draw_units} whole replicate groups per subsample")
        } else {
            format!("without replacement, {m} rows per subsample")
        },
        lambda_stars: runs.iter().map(|r| r.1).collect(),
    })
}

/// Unpenalized least squares restricted to `support` under the restricted
/// constraint `(C_S)^T beta_S = 0`; zeros elsewhere.
pub fn refit_on_support(data: &RegressionData, support: &[usize]) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(Error::invalid("refit needs a nonempty support"));
    }
    let p = data.p();
    let mut sorted = support.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != support.len() || sorted.iter().any(|&j| j >= p) {
        return Err(Error::invalid("support indices must be distinct and in range"));
    }
    let basis = select_rows(data.constraint().basis(), support);
    let (q, _) = orthonormal_columns(&basis);
    let null = complement_basis(&q, support.len());
    if null.ncols() == 0 {
        return Err(Error::Infeasible(format!(
            "the constraint restricted to {} coefficient(s) only admits zero",
            support.len()
        )));
    }
    let a = select_columns(data.design(), support) * &null;
    let svd = a.svd(true, true);
    let z = svd
        .solve(data.response(), 1e-12)
        .map_err(|e| Error::Numerical(format!("restricted least squares failed: {e}")))?;
    let beta_s = &null * z;
    let mut beta = vec![0.0; p];
    for (k, &j) in support.iter().enumerate() {
        beta[j] = beta_s[k];
    }
    Ok(beta)
}

/// Projected gradient of the restricted least-squares loss, for checking refits.
pub fn refit_projected_gradient(data: &RegressionData, support: &[usize], beta: &[f64]) -> f64 {
    let basis = select_rows(data.constraint().basis(), support);
    let (q, _) = orthonormal_columns(&basis);
    let null = complement_basis(&q, support.len());
    let xs = select_columns(data.design(), support);
    let bs = DVector::from_iterator(support.len(), support.iter().map(|&j| beta[j]));
    let grad = xs.transpose() * (&xs * bs - data.response()) / data.n() as f64;
    (null.transpose() * grad).amax()
}
