#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde_json::Value;

/// Writes a line that survives libtest output capture.
pub fn report(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

pub fn objective(b: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    let r = y - b * beta;
    r.norm_squared() / (2.0 * b.nrows() as f64) + lambda * beta.iter().map(|v| v.abs()).sum::<f64>()
}

/// Exact minimum of the sum-to-zero Lasso by enumerating every sign
/// pattern in {-1, 0, 1}^p, solving the equality-constrained quadratic on
/// each face through its KKT system, and keeping the best true objective.
pub fn sign_pattern_oracle(b: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> (f64, DVector<f64>) {
    let (n, p) = b.shape();
    let g = b.transpose() * b / n as f64;
    let c = b.transpose() * y / n as f64;
    let mut best = (objective(b, y, &DVector::zeros(p), lambda), DVector::zeros(p));
    let total = 3usize.pow(p as u32);
    for code in 0..total {
        let mut signs = vec![0i32; p];
        let mut k = code;
        for s in signs.iter_mut() {
            *s = (k % 3) as i32 - 1;
            k /= 3;
        }
        let support: Vec<usize> = (0..p).filter(|&j| signs[j] != 0).collect();
        let m = support.len();
        if m < 2 {
            continue;
        }
        // [G_SS 1; 1^T 0] [beta_S; mu] = [c_S - lambda s_S; 0]
        let mut kkt = DMatrix::zeros(m + 1, m + 1);
        let mut rhs = DVector::zeros(m + 1);
        for (a, &i) in support.iter().enumerate() {
            for (bb, &j) in support.iter().enumerate() {
                kkt[(a, bb)] = g[(i, j)];
            }
            kkt[(a, m)] = 1.0;
            kkt[(m, a)] = 1.0;
            rhs[a] = c[i] - lambda * signs[i] as f64;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let mut beta = DVector::zeros(p);
        for (a, &i) in support.iter().enumerate() {
            beta[i] = sol[a];
        }
        let f = objective(b, y, &beta, lambda);
        if f < best.0 {
            best = (f, beta);
        }
    }
    best
}

/// Smallest `lambda` with the zero solution optimal under sum-to-zero.
pub fn lambda_max_sum_zero(b: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let p = b.ncols();
    let centering = DMatrix::identity(p, p) - DMatrix::from_element(p, p, 1.0 / p as f64);
    let h = (b * centering).transpose() * y / b.nrows() as f64;
    h.amax()
}

/// Sum-to-zero KKT gap minimized over the scalar multiplier. The gap is
/// convex and piecewise linear in the multiplier, so golden-section search
/// over a bracket containing every breakpoint finds its minimum.
pub fn kkt_gap_sum_zero(b: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    let grad = b.transpose() * (b * beta - y) / b.nrows() as f64;
    let gap = |kappa: f64| {
        grad.iter()
            .zip(beta.iter())
            .map(|(&g, &bj)| {
                let h = g + kappa;
                if bj == 0.0 {
                    h.abs() - lambda
                } else {
                    (h + lambda * bj.signum()).abs()
                }
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let spread = grad.amax() + lambda + 1.0;
    let (mut lo, mut hi) = (-spread, spread);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..300 {
        let a = hi - phi * (hi - lo);
        let bb = lo + phi * (hi - lo);
        if gap(a) <= gap(bb) {
            hi = bb;
        } else {
            lo = a;
        }
    }
    gap(0.5 * (lo + hi)).max(0.0)
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

/// Count table with its sample-id column removed.
pub fn read_counts(path: &Path) -> DMatrix<f64> {
    let rows = read_csv(path);
    let body = &rows[1..];
    DMatrix::from_fn(body.len(), body[0].len() - 1, |i, j| body[i][j + 1].parse().unwrap())
}

pub fn read_response(path: &Path) -> DVector<f64> {
    let rows = read_csv(path);
    DVector::from_iterator(rows.len() - 1, rows[1..].iter().map(|r| r[r.len() - 1].parse().unwrap()))
}

pub fn read_plain_matrix(path: &Path) -> DMatrix<f64> {
    let rows = read_csv(path);
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j].parse().unwrap())
}

fn as_f64(v: &Value) -> f64 {
    match v {
        Value::String(s) if s == "inf" => f64::INFINITY,
        other => other.as_f64().unwrap(),
    }
}

/// Checks one `fit` output directory: certificate and constraint residual
/// recomputed from the raw inputs. Returns `(kkt_gap, lambda, residual, bound)`.
pub fn check_fit_dir(dir: &Path, counts: &Path, response: &Path, constraint: Option<&Path>) -> (f64, f64, f64, f64) {
    let out = read_json(&dir.join("fit.json"));
    let fit = &out["fit"];
    let lambda = as_f64(&fit["lambda"]);
    let beta = DVector::from_iterator(
        fit["beta_hat"].as_array().unwrap().len(),
        fit["beta_hat"].as_array().unwrap().iter().map(as_f64),
    );
    let w = read_counts(counts);
    let y = read_response(response);
    let offsets: Vec<f64> = out["design"]["offsets"].as_array().unwrap().iter().map(as_f64).collect();
    let kind = out["design"]["recipe"]["kind"].as_str().unwrap().to_string();
    let b = DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| {
        if kind == "zero_replace" {
            w[(i, j)].max(offsets[i]).ln()
        } else {
            (w[(i, j)] + offsets[i]).ln()
        }
    });
    let bound = 1e-8 * (1.0 + beta.norm());
    match constraint {
        None => {
            let gap = kkt_gap_sum_zero(&b, &y, &beta, lambda);
            (gap, lambda, beta.sum().abs(), bound)
        }
        Some(c) => {
            let c = read_plain_matrix(c);
            let residual = (c.transpose() * &beta).amax();
            (as_f64(&out["kkt_certificate"]), lambda, residual, bound)
        }
    }
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_vcreg"))
}

pub fn vcreg(args: &[&str]) -> std::process::Output {
    std::process::Command::new(bin()).args(args).output().unwrap()
}

/// Runs the binary and panics with its stderr on failure.
pub fn vcreg_ok(args: &[&str]) -> std::process::Output {
    let out = vcreg(args);
    assert!(out.status.success(), "vcreg {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
