//! Linearly constrained Lasso
//!
//! ```text
//! minimize  (1/2n) ||y - B beta||^2 + lambda ||beta||_1   subject to  C^T beta = 0
//! ```
//!
//! solved by ADMM on the split `beta = zeta`. The `beta` block carries the
//! smooth loss and the equality constraint; on the feasible set
//! `B beta = Bbar beta` with `Bbar = B (I - P_C)`, so the block reduces to a
//! ridge-type system in `Bbar` whose Cholesky factor is cached per `rho`
//! (Woodbury form when `p > n`). The `zeta` block is a soft-threshold.
//!
//! Every few iterations the current support and signs are handed to an exact
//! equality-constrained QP ("polishing"); a polished point that passes the KKT
//! certificate ends the solve. This gives exact zeros, exact feasibility and
//! objective values accurate to rounding.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::RegressionData;
use crate::error::{Error, Result};
use crate::linalg::{complement_basis, inf_norm, orthonormal_columns, select_columns, select_rows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Relative primal residual tolerance.
    pub tol_primal: f64,
    /// Relative dual residual tolerance.
    pub tol_dual: f64,
    /// Initial ADMM penalty.
    pub admm_rho: f64,
    pub adaptive_rho: bool,
    /// Try the exact support QP during and after the iterations.
    pub polish: bool,
    pub warm_start: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol_primal: 1e-7,
            tol_dual: 1e-7,
            admm_rho: 1.0,
            adaptive_rho: true,
            polish: true,
            warm_start: None,
        }
    }
}

impl SolverConfig {
    fn validate(&self, p: usize) -> Result<()> {
        if !(self.tol_primal > 0.0 && self.tol_dual > 0.0) {
            return Err(Error::invalid("solver tolerances must be positive"));
        }
        if !(self.admm_rho > 0.0 && self.admm_rho.is_finite()) {
            return Err(Error::invalid("admm_rho must be positive"));
        }
        if let Some(ws) = &self.warm_start {
            if ws.len() != p {
                return Err(Error::invalid(format!("warm start has {} entries, expected {p}", ws.len())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta_hat: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub kkt_gap: f64,
    pub objective: f64,
    /// `||C^T beta||_inf` against the orthonormalized constraint.
    pub constraint_residual: f64,
    pub converged: bool,
    /// Whether the returned point came from the exact support QP.
    pub polished: bool,
}

impl FitResult {
    pub fn beta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta_hat)
    }

    /// Indices with `|beta_j| > threshold`.
    pub fn support(&self, threshold: f64) -> Vec<usize> {
        self.beta_hat
            .iter()
            .enumerate()
            .filter(|(_, b)| b.abs() > threshold)
            .map(|(j, _)| j)
            .collect()
    }
}

/// `(1/2n) ||y - B beta||^2 + lambda ||beta||_1` on the uncentered design.
pub fn objective(data: &RegressionData, beta: &DVector<f64>, lambda: f64) -> f64 {
    let resid = data.response() - data.design() * beta;
    resid.norm_squared() / (2.0 * data.n() as f64) + lambda * beta.lp_norm(1)
}

enum Factor {
    /// Cholesky of `G + rho I`.
    Primal(Cholesky<f64, Dyn>),
    /// Cholesky of `rho I_n + A A^T` with `A = Bbar / sqrt(n)`.
    Woodbury(Cholesky<f64, Dyn>),
}

/// A prepared problem: centered design and cached products, reusable across
/// penalty levels.
pub struct ConstrainedLasso<'a> {
    data: &'a RegressionData,
    centered: DMatrix<f64>,
    /// `Bbar / sqrt(n)`.
    scaled: DMatrix<f64>,
    /// `Bbar^T y / n`.
    bty: DVector<f64>,
    /// `Bbar^T Bbar / n`, only when `p <= n`.
    gram: Option<DMatrix<f64>>,
    basis: DMatrix<f64>,
}

impl<'a> ConstrainedLasso<'a> {
    pub fn new(data: &'a RegressionData) -> Self {
        let n = data.n() as f64;
        let centered = data.centered_design();
        let scaled = &centered / n.sqrt();
        let bty = centered.transpose() * data.response() / n;
        let gram = (data.p() <= data.n()).then(|| scaled.transpose() * &scaled);
        Self { data, centered, scaled, bty, gram, basis: data.constraint().basis().clone() }
    }

    pub fn data(&self) -> &RegressionData {
        self.data
    }

    /// Smallest penalty at which `beta = 0` is optimal.
    pub fn lambda_max(&self) -> f64 {
        inf_norm(&self.bty)
    }

    /// `(1/n) Bbar^T (Bbar beta - y)`.
    fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        let fitted = &self.scaled * beta;
        self.scaled.transpose() * fitted - &self.bty
    }

    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.basis * (self.basis.transpose() * v)
    }

    fn factor(&self, rho: f64) -> Result<Factor> {
        let fail = || Error::Numerical(format!("ADMM system not positive definite at rho = {rho}"));
        match &self.gram {
            Some(g) => {
                let mut m = g.clone();
                for i in 0..m.nrows() {
                    m[(i, i)] += rho;
                }
                Cholesky::new(m).map(Factor::Primal).ok_or_else(fail)
            }
            None => {
                let mut m = &self.scaled * self.scaled.transpose();
                for i in 0..m.nrows() {
                    m[(i, i)] += rho;
                }
                Cholesky::new(m).map(Factor::Woodbury).ok_or_else(fail)
            }
        }
    }

    /// Solves `(G + rho I) x = r`.
    fn apply_inverse(&self, factor: &Factor, rho: f64, r: &DVector<f64>) -> DVector<f64> {
        match factor {
            Factor::Primal(ch) => ch.solve(r),
            Factor::Woodbury(ch) => {
                let ar = &self.scaled * r;
                let inner = ch.solve(&ar);
                (r - self.scaled.transpose() * inner) / rho
            }
        }
    }

    fn zero_fit(&self, lambda: f64) -> FitResult {
        let beta = DVector::zeros(self.data.p());
        let gap = self.kkt_gap(&beta, lambda);
        FitResult {
            beta_hat: beta.as_slice().to_vec(),
            lambda,
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            kkt_gap: gap,
            objective: objective(self.data, &beta, lambda),
            constraint_residual: 0.0,
            converged: true,
            polished: false,
        }
    }

    /// Solves at one penalty level.
    pub fn solve(&self, lambda: f64, config: &SolverConfig) -> Result<FitResult> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        let p = self.data.p();
        config.validate(p)?;
        let lambda_max = self.lambda_max();
        if lambda >= lambda_max && (lambda > 0.0 || lambda_max == 0.0) {
            return Ok(self.zero_fit(lambda));
        }

        let relax = 1.5;
        let abs_tol = 1e-12 * (1.0 + lambda_max);
        let sqrt_p = (p as f64).sqrt();
        let mut rho = config.admm_rho;
        let mut factor = self.factor(rho)?;

        let mut zeta = match &config.warm_start {
            Some(ws) => DVector::from_column_slice(ws),
            None => DVector::zeros(p),
        };
        let mut beta = self.project(&zeta);
        let mut u = if config.warm_start.is_some() {
            let g = self.gradient(&beta);
            g.map(|v| (-v / rho).clamp(-lambda / rho, lambda / rho))
        } else {
            DVector::zeros(p)
        };

        let mut last_attempt: Option<Vec<i8>> = None;
        let mut primal_res = f64::INFINITY;
        let mut dual_res = f64::INFINITY;
        let mut converged = false;
        let mut iterations = 0;

        for k in 1..=config.max_iter {
            iterations = k;
            let rhs = &self.bty + self.project(&(&zeta - &u)) * rho;
            beta = self.project(&self.apply_inverse(&factor, rho, &rhs));
            let relaxed = &beta * relax + &zeta * (1.0 - relax);
            let zeta_old = std::mem::replace(&mut zeta, soft_threshold(&(&relaxed + &u), lambda / rho));
            u += &relaxed - &zeta;

            primal_res = (&beta - &zeta).norm();
            dual_res = rho * (&zeta - &zeta_old).norm();
            let eps_pri = sqrt_p * abs_tol + config.tol_primal * beta.norm().max(zeta.norm());
            let eps_dual = sqrt_p * abs_tol + config.tol_dual * rho * u.norm();
            if primal_res <= eps_pri && dual_res <= eps_dual {
                converged = true;
                break;
            }

            if config.polish && k % 10 == 0 {
                let pattern = sign_pattern(&zeta);
                if last_attempt.as_ref() != Some(&pattern) {
                    if let Some(fit) = self.try_polish(&pattern, lambda, k, primal_res, dual_res) {
                        return Ok(fit);
                    }
                    last_attempt = Some(pattern);
                }
            }

            if config.adaptive_rho && k % 10 == 0 {
                let scale = if primal_res > 10.0 * dual_res {
                    2.0
                } else if dual_res > 10.0 * primal_res {
                    0.5
                } else {
                    1.0
                };
                if scale != 1.0 && (1e-6..=1e6).contains(&(rho * scale)) {
                    rho *= scale;
                    u /= scale;
                    factor = self.factor(rho)?;
                }
            }
        }

        if config.polish {
            let pattern = sign_pattern(&zeta);
            if let Some(mut fit) = self.try_polish(&pattern, lambda, iterations, primal_res, dual_res) {
                fit.converged = true;
                return Ok(fit);
            }
        }

        let beta_hat = self.support_projection(&zeta);
        let gap = self.kkt_gap(&beta_hat, lambda);
        Ok(FitResult {
            objective: objective(self.data, &beta_hat, lambda),
            constraint_residual: self.data.constraint().violation(&beta_hat),
            beta_hat: beta_hat.as_slice().to_vec(),
            lambda,
            iterations,
            primal_residual: primal_res,
            dual_residual: dual_res,
            kkt_gap: gap,
            converged,
            polished: false,
        })
    }

    /// Projects `v` onto `{beta : C^T beta = 0, supp(beta) within supp(v)}`.
    fn support_projection(&self, v: &DVector<f64>) -> DVector<f64> {
        let support: Vec<usize> = (0..v.len()).filter(|&j| v[j] != 0.0).collect();
        let mut out = DVector::zeros(v.len());
        if support.is_empty() {
            return out;
        }
        let q_s = select_rows(&self.basis, &support);
        let (qs, _) = orthonormal_columns(&q_s);
        let v_s = DVector::from_iterator(support.len(), support.iter().map(|&j| v[j]));
        let proj = &v_s - &qs * (qs.transpose() * &v_s);
        for (k, &j) in support.iter().enumerate() {
            out[j] = proj[k];
        }
        out
    }

    /// Exact solution of the QP restricted to a support with fixed signs;
    /// returned only if signs are consistent and the KKT certificate passes.
    fn try_polish(&self, pattern: &[i8], lambda: f64, iterations: usize, pr: f64, dr: f64) -> Option<FitResult> {
        let support: Vec<usize> = (0..pattern.len()).filter(|&j| pattern[j] != 0).collect();
        let p = self.data.p();
        let beta = if support.is_empty() {
            DVector::zeros(p)
        } else {
            let signs = DVector::from_iterator(support.len(), support.iter().map(|&j| pattern[j] as f64));
            let target = DVector::from_iterator(support.len(), support.iter().map(|&j| self.bty[j])) - signs * lambda;
            let beta_s = restricted_quadratic_solve(&self.scaled, &self.basis, &support, &target)?;
            let mut beta = DVector::zeros(p);
            for (k, &j) in support.iter().enumerate() {
                let want = pattern[j] as f64;
                if beta_s[k] * want <= 0.0 {
                    return None;
                }
                beta[j] = beta_s[k];
            }
            beta
        };
        let grad = self.gradient(&beta);
        let floor = 1e-11 * (1.0 + self.lambda_max());
        let tol = 1e-8 * lambda + floor;
        let quick = kkt_value(&grad, &beta, lambda, &self.basis, &least_squares_multiplier(&grad, &beta, lambda, &self.basis));
        let gap = if quick <= tol { quick } else { self.kkt_gap(&beta, lambda) };
        if gap > tol {
            return None;
        }
        Some(FitResult {
            objective: objective(self.data, &beta, lambda),
            constraint_residual: self.data.constraint().violation(&beta),
            beta_hat: beta.as_slice().to_vec(),
            lambda,
            iterations,
            primal_residual: pr,
            dual_residual: dr,
            kkt_gap: gap,
            converged: true,
            polished: true,
        })
    }

    /// KKT certificate for a feasible point (see [`kkt_certificate`]).
    pub fn kkt_gap(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        let grad = self.gradient(beta);
        let ls = least_squares_multiplier(&grad, beta, lambda, &self.basis);
        let mut best = kkt_value(&grad, beta, lambda, &self.basis, &ls);
        if let Some(kappa) = lp_multiplier(&grad, beta, lambda, &self.basis) {
            best = best.min(kkt_value(&grad, beta, lambda, &self.basis, &kappa));
        }
        best
    }

    pub fn centered(&self) -> &DMatrix<f64> {
        &self.centered
    }
}

fn sign_pattern(v: &DVector<f64>) -> Vec<i8> {
    v.iter()
        .map(|&x| if x > 0.0 { 1 } else if x < 0.0 { -1 } else { 0 })
        .collect()
}

pub(crate) fn soft_threshold(v: &DVector<f64>, t: f64) -> DVector<f64> {
    v.map(|x| {
        if x > t {
            x - t
        } else if x < -t {
            x + t
        } else {
            0.0
        }
    })
}

/// Minimizes `(1/2) b^T H b - target^T b` over `b` supported on `support`
/// with `(C_S)^T b = 0`, where `H = A_S^T A_S` and `A = scaled` (already
/// divided by `sqrt(n)`). Returns `None` when the restricted Hessian is
/// singular.
pub(crate) fn restricted_quadratic_solve(
    scaled: &DMatrix<f64>,
    basis: &DMatrix<f64>,
    support: &[usize],
    target: &DVector<f64>,
) -> Option<DVector<f64>> {
    let q_s = select_rows(basis, support);
    let (qs, _) = orthonormal_columns(&q_s);
    let null = complement_basis(&qs, support.len());
    if null.ncols() == 0 {
        return Some(DVector::zeros(support.len()));
    }
    let a = select_columns(scaled, support) * &null;
    let h = a.transpose() * &a;
    let rhs = null.transpose() * target;
    let scale = h.diagonal().amax().max(f64::MIN_POSITIVE);
    let ch = Cholesky::new(h)?;
    let diag_min = ch.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, &d| m.min(d.abs()));
    if diag_min * diag_min <= 1e-12 * scale {
        return None;
    }
    Some(&null * ch.solve(&rhs))
}

/// Value of the KKT residual at a given multiplier (in orthonormal-basis
/// coordinates): the max over coordinates of `|h_j| - lambda` off the
/// support and `|h_j + lambda sign(beta_j)|` on it, with
/// `h = grad + Q kappa`.
fn kkt_value(grad: &DVector<f64>, beta: &DVector<f64>, lambda: f64, basis: &DMatrix<f64>, kappa: &DVector<f64>) -> f64 {
    let h = grad + basis * kappa;
    let mut worst = f64::NEG_INFINITY;
    for j in 0..h.len() {
        let v = if beta[j] == 0.0 {
            h[j].abs() - lambda
        } else {
            (h[j] + lambda * beta[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Multiplier from the support equations in the least-squares sense (or
/// from all coordinates when the support is empty).
fn least_squares_multiplier(grad: &DVector<f64>, beta: &DVector<f64>, lambda: f64, basis: &DMatrix<f64>) -> DVector<f64> {
    let support: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
    let rows: Vec<usize> = if support.is_empty() { (0..beta.len()).collect() } else { support };
    let q = select_rows(basis, &rows);
    let target = DVector::from_iterator(
        rows.len(),
        rows.iter().map(|&j| -(grad[j] + if beta[j] == 0.0 { 0.0 } else { lambda * beta[j].signum() })),
    );
    let svd = q.clone().svd(true, true);
    svd.solve(&target, 1e-12).unwrap_or_else(|_| DVector::zeros(basis.ncols()))
}

/// Exact minimax multiplier by a small linear program.
fn lp_multiplier(grad: &DVector<f64>, beta: &DVector<f64>, lambda: f64, basis: &DMatrix<f64>) -> Option<DVector<f64>> {
    let r = basis.ncols();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let kappa: Vec<_> = (0..r).map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    let t = lp.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
    for j in 0..grad.len() {
        let (upper, lower) = if beta[j] == 0.0 {
            (lambda - grad[j], lambda + grad[j])
        } else {
            let s = lambda * beta[j].signum();
            (-grad[j] - s, grad[j] + s)
        };
        let mut plus: Vec<(minilp::Variable, f64)> = kappa.iter().enumerate().map(|(k, &v)| (v, basis[(j, k)])).collect();
        plus.push((t, -1.0));
        lp.add_constraint(plus, ComparisonOp::Le, upper);
        let mut minus: Vec<(minilp::Variable, f64)> =
            kappa.iter().enumerate().map(|(k, &v)| (v, -basis[(j, k)])).collect();
        minus.push((t, -1.0));
        lp.add_constraint(minus, ComparisonOp::Le, lower);
    }
    let sol = lp.solve().ok()?;
    Some(DVector::from_iterator(r, kappa.iter().map(|&v| sol[v])))
}

/// Solves the constrained Lasso at one penalty level.
pub fn solve_constrained_lasso(data: &RegressionData, lambda: f64, config: &SolverConfig) -> Result<FitResult> {
    ConstrainedLasso::new(data).solve(lambda, config)
}

/// KKT certificate of a feasible `beta`:
/// `min_kappa max_j v_j(kappa)` where `v_j = |h_j| - lambda` for `beta_j = 0`
/// and `v_j = |h_j + lambda sign(beta_j)|` otherwise, with
/// `h = (1/n) Bbar^T (Bbar beta - y) + C kappa / n`.
///
/// Nonpositive values certify optimality; for `beta = 0` this is exactly
/// `min_kappa ||(1/n) Bbar^T y - C kappa/n||_inf - lambda`.
pub fn kkt_certificate(data: &RegressionData, beta: &[f64], lambda: f64) -> Result<f64> {
    if beta.len() != data.p() {
        return Err(Error::invalid(format!("beta has {} entries, expected {}", beta.len(), data.p())));
    }
    let beta = DVector::from_column_slice(beta);
    let violation = data.constraint().violation(&beta);
    if violation > 1e-8 * (1.0 + beta.norm()) {
        return Err(Error::Infeasible(format!("||C^T beta||_inf = {violation:e} exceeds tolerance")));
    }
    Ok(ConstrainedLasso::new(data).kkt_gap(&beta, lambda))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub fit: FitResult,
}

/// Geometric grid from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_grid(lambda_max: f64, num: usize, ratio: f64) -> Result<Vec<f64>> {
    if num < 2 {
        return Err(Error::invalid("a lambda path needs at least two points"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("path ratio must lie in (0, 1), got {ratio}")));
    }
    let step = ratio.ln() / (num - 1) as f64;
    Ok((0..num)
        .map(|k| if k == 0 { lambda_max } else { lambda_max * (step * k as f64).exp() })
        .collect())
}

/// Solves along a given decreasing grid with warm starts.
pub fn solve_path(problem: &ConstrainedLasso<'_>, lambdas: &[f64], config: &SolverConfig) -> Result<Vec<PathPoint>> {
    let mut cfg = config.clone();
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let fit = problem.solve(lambda, &cfg)?;
        cfg.warm_start = Some(fit.beta_hat.clone());
        out.push(PathPoint { lambda, fit });
    }
    Ok(out)
}

/// Warm-started solutions on the geometric grid anchored at this problem's
/// `lambda_max`.
pub fn lambda_path(data: &RegressionData, num: usize, ratio: f64, config: &SolverConfig) -> Result<Vec<PathPoint>> {
    let problem = ConstrainedLasso::new(data);
    let grid = lambda_grid(problem.lambda_max(), num, ratio)?;
    solve_path(&problem, &grid, config)
}

/// Inputs of the penalty-level formulas from the error bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalLambda {
    pub sigma: f64,
    pub p: usize,
    pub n: usize,
    /// Average expected depth; `inf` removes the measurement-error term.
    #[serde(with = "crate::serde_inf")]
    pub nu_bar: f64,
    /// `||beta*||_2`, or `||beta*||_1` when `zeta_max` is set.
    pub beta_norm: f64,
    /// Largest overdispersion level `(nu + alpha + 1)/(2(alpha + 1))`;
    /// selects the overdispersed form.
    pub zeta_max: Option<f64>,
    /// Unspecified leading constant.
    pub constant: f64,
}

impl TheoreticalLambda {
    pub fn value(&self) -> f64 {
        theoretical_lambda(
            self.sigma,
            self.p as f64,
            self.n as f64,
            self.nu_bar,
            self.beta_norm,
            self.zeta_max,
            self.constant,
        )
    }
}

/// Theory-driven penalty level; see [`TheoreticalLambda`].
pub fn theoretical_lambda(
    sigma: f64,
    p: f64,
    n: f64,
    nu_bar: f64,
    beta_norm: f64,
    zeta_max: Option<f64>,
    constant: f64,
) -> f64 {
    let log_p = p.ln();
    let ratio = if nu_bar.is_infinite() { 0.0 } else { p / nu_bar };
    match zeta_max {
        None => constant * (log_p / n * (sigma * sigma + ratio * beta_norm * beta_norm)).sqrt(),
        Some(zeta) => constant * (log_p / n).sqrt() * (sigma + (ratio * zeta).sqrt() * beta_norm),
    }
}
