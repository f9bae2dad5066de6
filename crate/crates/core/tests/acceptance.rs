//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::*;
use vcreg::diagnostics::{bias_curve, median, run_scan, BiasEstimator, BiasMode, ScanAxis, ScanConfig};
use vcreg::overdispersion::{estimate_alpha_mom, ReplicateGroup};
use vcreg::selection::PathSpec;
use vcreg::simulator::{
    default_beta, run_scenario_grid, sample_compositions, sample_dm_row, DepthLaw, GridConfig, GridMethod, GridRow,
    LambdaRule, SimScenario,
};
use vcreg::solver::{solve_constrained_lasso, SolverConfig};
use vcreg::{CountMatrix, RegressionData};

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    report(&format!("criterion {id} ({name}): {} - {detail}", if pass { "PASS" } else { "FAIL" }));
    assert!(pass, "criterion {id} failed: {detail}");
}

#[test]
fn criterion_1_bias_ordering() {
    let start = Instant::now();
    let nus = [2.0, 5.0, 10.0, 20.0, 50.0, 100.0];
    let half = BiasEstimator::Add { c: 0.5 };
    let zr = BiasEstimator::ZeroReplace { c: 0.5 };
    let others: Vec<BiasEstimator> = [0.25, 0.75, 1.0].iter().map(|&c| BiasEstimator::Add { c }).collect();
    let mut all = vec![half, zr];
    all.extend(others.iter().copied());
    let curve = bias_curve(&nus, &all, BiasMode::Exact).unwrap();
    let mut failures = Vec::new();
    for &nu in &nus {
        let h = curve.bias(nu, &half).unwrap().abs();
        if h >= curve.bias(nu, &zr).unwrap().abs() {
            failures.push(format!("zero_replace beats add(0.5) at nu={nu}"));
        }
        if nu >= 5.0 {
            for e in &others {
                if h >= curve.bias(nu, e).unwrap().abs() {
                    failures.push(format!("{} beats add(0.5) at nu={nu}", e.label()));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(10);
    verdict(
        1,
        "bias ordering",
        pass,
        &format!(
            "|bias add(0.5)| at nu=2..100: {:?}; violations {failures:?}; {elapsed:.2?}",
            nus.iter().map(|&nu| format!("{:.2e}", curve.bias(nu, &half).unwrap().abs())).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_2_solver_matches_sign_pattern_oracle() {
    let start = Instant::now();
    let mut worst_rel: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    let mut checked = 0;
    for inst in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let p = [4, 5, 6][(inst % 3) as usize];
        let n = 20;
        let b = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut beta = DVector::zeros(p);
        beta[0] = 1.0;
        beta[1] = -0.6;
        beta[2] = -0.4;
        let y = &b * &beta + DVector::from_fn(n, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        let lmax = lambda_max_sum_zero(&b, &y);
        let data = RegressionData::compositional(b.clone(), y.clone()).unwrap();
        for frac in [0.5, 0.1, 0.01] {
            let lambda = frac * lmax;
            let fit = solve_constrained_lasso(&data, lambda, &SolverConfig::default()).unwrap();
            let est = DVector::from_column_slice(&fit.beta_hat);
            let (oracle, _) = sign_pattern_oracle(&b, &y, lambda);
            let ours = objective(&b, &y, &est, lambda);
            worst_rel = worst_rel.max((ours - oracle).abs() / oracle.abs());
            worst_res = worst_res.max(est.sum().abs());
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_rel <= 1e-6 && worst_res <= 1e-8 && elapsed < Duration::from_secs(30);
    verdict(
        2,
        "solver oracle equivalence",
        pass,
        &format!("{checked} fits; worst relative objective gap {worst_rel:.2e}; worst |sum beta| {worst_res:.2e}; {elapsed:.2?}"),
    );
}

/// Runs `fit` across varied inputs; shared with the determinism criterion.
fn fit_battery(root: &Path) -> Vec<(f64, f64, f64, f64, String)> {
    let sim = root.join("sim");
    vcreg_ok(&["simulate", "--n", "40", "--p", "30", "--seed", "5", "--out", s(&sim)]);
    let sim_nb = root.join("sim_multinomial");
    vcreg_ok(&["simulate", "--n", "30", "--p", "12", "--alpha", "inf", "--seed", "6", "--out", s(&sim_nb)]);
    let counts = sim.join("counts.csv");
    let resp = sim.join("response.csv");
    let groups = sim.join("groups.csv");
    let counts_nb = sim_nb.join("counts.csv");
    let resp_nb = sim_nb.join("response.csv");
    let constraint = root.join("c.csv");
    // two-group log-contrast: taxa 1..15 sum to zero, taxa 16..30 sum to zero
    let mut text = String::new();
    for j in 0..30 {
        text.push_str(if j < 15 { "1,0\n" } else { "0,1\n" });
    }
    std::fs::write(&constraint, text).unwrap();

    let runs: Vec<(Vec<String>, Option<&Path>, &Path, &Path)> = vec![
        (vec!["--alpha".into(), "inf".into()], None, &counts, &resp),
        (vec!["--alpha".into(), "mom".into(), "--pair-halves".into()], None, &counts, &resp),
        (vec!["--alpha".into(), "mom".into(), "--groups".into(), s(&groups).into()], None, &counts, &resp),
        (vec!["--alpha".into(), "150".into(), "--lambda".into(), "0.05".into()], None, &counts, &resp),
        (vec!["--correction".into(), "zr".into(), "--zr-c".into(), "0.5".into()], None, &counts, &resp),
        (vec!["--correction".into(), "zr".into(), "--lambda".into(), "0.01".into()], None, &counts, &resp),
        (vec!["--constraint".into(), s(&constraint).into()], Some(&constraint), &counts, &resp),
        (vec!["--folds".into(), "3".into(), "--path-num".into(), "15".into()], None, &counts_nb, &resp_nb),
    ];
    let mut out = Vec::new();
    for (k, (flags, c, counts, resp)) in runs.iter().enumerate() {
        let dir = root.join(format!("fit{k}"));
        let mut args: Vec<&str> = vec!["fit", s(counts), s(resp), "--seed", "1", "--out", s(&dir)];
        args.extend(flags.iter().map(String::as_str));
        vcreg_ok(&args);
        let (gap, lambda, res, bound) = check_fit_dir(&dir, counts, resp, *c);
        out.push((gap, lambda, res, bound, flags.join(" ")));
    }
    out
}

#[test]
fn criterion_3_kkt_certification_of_fit_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let results = fit_battery(tmp.path());
    let bad: Vec<&(f64, f64, f64, f64, String)> =
        results.iter().filter(|(gap, lambda, res, bound, _)| !(*gap <= 1e-4 * lambda && res <= bound)).collect();
    let worst = results.iter().map(|(g, l, ..)| g / l).fold(0.0, f64::max);
    verdict(
        3,
        "KKT certification",
        bad.is_empty(),
        &format!("{} fit runs; worst kkt_gap/lambda {worst:.2e}; failing {bad:?}", results.len()),
    );
}

#[test]
fn criterion_4_dm_moments() {
    let start = Instant::now();
    let total: u64 = 30_000;
    let p = 10;
    let x: Vec<f64> = (1..=p).map(|k| k as f64 / 55.0).collect();
    let draws = 100_000;
    let mut lines = Vec::new();
    let mut pass = true;
    for alpha in [200.0, f64::INFINITY] {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut sum = vec![0.0; p];
        let mut sq = vec![0.0; p];
        for _ in 0..draws {
            let w = sample_dm_row(total, alpha, &x, &mut rng);
            for j in 0..p {
                let v = w[j] as f64;
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        let nf = total as f64;
        let d = draws as f64;
        let mut worst_z: f64 = 0.0;
        let mut worst_rel: f64 = 0.0;
        for j in 0..p {
            // q_j ~ Beta(alpha x_j, alpha (1 - x_j)); W_j | q_j ~ Bin(N, q_j)
            let var_q = if alpha.is_infinite() { 0.0 } else { x[j] * (1.0 - x[j]) / (alpha + 1.0) };
            let e_q1q = x[j] * (1.0 - x[j]) - var_q;
            let oracle = nf * nf * var_q + nf * e_q1q;
            let mean = sum[j] / d;
            let var = (sq[j] - d * mean * mean) / (d - 1.0);
            worst_z = worst_z.max((mean - nf * x[j]).abs() / (oracle / d).sqrt());
            worst_rel = worst_rel.max((var - oracle).abs() / oracle);
        }
        pass &= worst_z <= 3.0 && worst_rel <= 0.03;
        lines.push(format!("alpha={alpha}: worst mean z {worst_z:.2}, worst variance rel err {worst_rel:.4}"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    verdict(4, "DM sampler moments", pass, &format!("{}; {elapsed:.2?}", lines.join("; ")));
}

fn paired_wins(rows: &[GridRow], field: fn(&GridRow) -> f64) -> (f64, f64, f64) {
    let get = |m: &str| -> Vec<f64> {
        let mut v: Vec<&GridRow> = rows.iter().filter(|r| r.method == m).collect();
        v.sort_by_key(|r| r.replicate);
        v.iter().map(|r| field(r)).collect()
    };
    let vc = get("vc");
    let zr = get("zr0.5");
    let wins = vc.iter().zip(&zr).filter(|(a, b)| a < b).count();
    (median(&vc), median(&zr), wins as f64 / vc.len() as f64)
}

#[test]
fn criterion_5_vc_beats_zero_replacement() {
    let start = Instant::now();
    let mut pass = true;
    let mut lines = Vec::new();
    for shared in [false, true] {
        let grid = GridConfig {
            ns: vec![50],
            ps: vec![100],
            alphas: vec![200.0],
            replicates: 20,
            methods: vec![GridMethod::VcMom, GridMethod::ZeroReplace { c: 0.5 }],
            lambda_rule: LambdaRule::Cv { folds: 5, path: PathSpec::default() },
            shared_noise: shared,
            master_seed: 2024,
            ..GridConfig::default()
        };
        let cell = Instant::now();
        let rows = run_scenario_grid(&grid).unwrap();
        let cell_time = cell.elapsed();
        let ok = rows.iter().all(|r| r.status == "ok");
        let (ve, ze, we) = paired_wins(&rows, |r| r.est_err);
        let (vp, zp, wp) = paired_wins(&rows, |r| r.pred_err);
        let this = ok && ve < ze && we >= 0.8 && vp < zp && wp >= 0.8 && cell_time < Duration::from_secs(600);
        pass &= this;
        lines.push(format!(
            "{}: est median vc {ve:.3} vs zr {ze:.3}, vc wins {:.0}%; pred median vc {vp:.3} vs zr {zp:.3}, vc wins {:.0}%; {cell_time:.1?}",
            if shared { "shared noise" } else { "independent noise" },
            100.0 * we,
            100.0 * wp
        ));
    }
    verdict(5, "VC vs ZR(0.5) at n=50 p=100 alpha=200", pass, &format!("{}; total {:.1?}", lines.join("; "), start.elapsed()));
}

#[test]
fn criterion_6_rate_direction() {
    let start = Instant::now();
    let mut base = SimScenario::reference(100, 100, f64::INFINITY, 0);
    base.paired = false;
    base.depth_law = DepthLaw::Poisson { mean: 3e4 };
    let rate = run_scan(&ScanConfig {
        base: base.clone(),
        axis: ScanAxis::SampleSize(vec![100, 200, 400, 800]),
        design: GridMethod::Oracle,
        replicates: 30,
        lambda_rule: LambdaRule::Theoretical { constant: 2.0 },
        bootstrap: 1000,
        master_seed: 11,
        solver: SolverConfig::default(),
    })
    .unwrap();
    let mut depth_base = base.clone();
    depth_base.sigma = 0.0;
    let depth = run_scan(&ScanConfig {
        base: depth_base,
        axis: ScanAxis::DepthScale(vec![1.0, 4.0, 16.0]),
        design: GridMethod::VcHalf,
        replicates: 30,
        lambda_rule: LambdaRule::Theoretical { constant: 2.0 },
        bootstrap: 200,
        master_seed: 12,
        solver: SolverConfig::default(),
    })
    .unwrap();
    let elapsed = start.elapsed();
    let pass = (-1.35..=-0.65).contains(&rate.slope)
        && rate.failures == 0
        && depth.failures == 0
        && depth.is_decreasing()
        && elapsed < Duration::from_secs(600);
    verdict(
        6,
        "rate direction",
        pass,
        &format!(
            "slope {:.3} (CI {:.3}..{:.3}), medians {:?}; depth medians {:?}; {elapsed:.1?}",
            rate.slope,
            rate.slope_ci.0,
            rate.slope_ci.1,
            rate.median_error.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            depth.median_error.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>()
        ),
    );
}

/// `groups` groups of `j` replicate rows sharing one composition.
fn replicate_groups(alpha: f64, groups: usize, j: usize, seed: u64) -> (CountMatrix, Vec<ReplicateGroup>) {
    let mut scenario = SimScenario::reference(groups, 100, alpha, seed);
    scenario.paired = false;
    scenario.beta_star = default_beta(100);
    let x = sample_compositions(&scenario).unwrap();
    let depth = DepthLaw::NegativeBinomial { mean: 3e4, variance: 3e6 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA1FA);
    let mut rows = Vec::new();
    let mut out_groups = Vec::new();
    for g in 0..groups {
        let xg: Vec<f64> = x.row(g).iter().copied().collect();
        let mut members = Vec::new();
        for _ in 0..j {
            let total = depth.sample(&mut rng);
            members.push(rows.len());
            rows.push(sample_dm_row(total, alpha, &xg, &mut rng));
        }
        out_groups.push(ReplicateGroup::new(format!("g{g}"), members));
    }
    (CountMatrix::from_rows(&rows).unwrap(), out_groups)
}

#[test]
fn criterion_7_mom_calibration() {
    let start = Instant::now();
    let (counts, groups) = replicate_groups(200.0, 200, 4, 31);
    let alpha_hat: Vec<f64> = groups.iter().map(|g| estimate_alpha_mom(&counts, g).unwrap().alpha_hat).collect();
    let med_alpha = median(&alpha_hat);
    let (counts, groups) = replicate_groups(f64::INFINITY, 200, 4, 32);
    let theta: Vec<f64> = groups.iter().map(|g| estimate_alpha_mom(&counts, g).unwrap().theta_hat).collect();
    let med_theta = median(&theta);
    let elapsed = start.elapsed();
    let pass = (100.0..=400.0).contains(&med_alpha) && med_theta <= 0.005 && elapsed < Duration::from_secs(120);
    verdict(
        7,
        "MoM alpha calibration",
        pass,
        &format!("median alpha_hat {med_alpha:.1} (truth 200); multinomial median theta_hat {med_theta:.2e}; {elapsed:.2?}"),
    );
}

fn files_equal(a: &Path, b: &Path, name: &str) -> bool {
    let x = std::fs::read(a.join(name)).unwrap();
    let y = std::fs::read(b.join(name)).unwrap();
    if name == "results.csv" {
        // wall-clock runtimes are not reproducible; every other column must be
        let strip = |bytes: &[u8]| -> Vec<Vec<String>> {
            let mut rdr = csv::Reader::from_reader(bytes);
            let headers = rdr.headers().unwrap().clone();
            let skip = headers.iter().position(|h| h == "runtime_ms").unwrap();
            rdr.records()
                .map(|r| r.unwrap().iter().enumerate().filter(|(k, _)| *k != skip).map(|(_, c)| c.to_string()).collect())
                .collect()
        };
        return strip(&x) == strip(&y);
    }
    x == y
}

#[test]
fn criterion_8_manifest_reruns_are_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let sim = root.join("sim");
    vcreg_ok(&["simulate", "--n", "30", "--p", "15", "--seed", "9", "--out", s(&sim)]);
    let counts = sim.join("counts.csv");
    let resp = sim.join("response.csv");
    let matrix = sim.join("compositions.csv");
    let runs: Vec<Vec<String>> = vec![
        vec!["simulate".into(), "--n".into(), "20".into(), "--p".into(), "10".into(), "--shared-noise".into()],
        vec!["fit".into(), s(&counts).into(), s(&resp).into(), "--alpha".into(), "mom".into(), "--pair-halves".into()],
        vec!["fit".into(), s(&counts).into(), s(&resp).into(), "--correction".into(), "zr".into(), "--lambda".into(), "0.02".into()],
        vec!["select".into(), s(&counts).into(), s(&resp).into(), "--bootstrap".into(), "6".into(), "--pair-halves".into()],
        vec![
            "bench".into(), "--ns".into(), "20".into(), "--ps".into(), "10".into(), "--alphas".into(), "200,inf".into(),
            "--replicates".into(), "2".into(), "--plot".into(),
        ],
        vec!["bias".into(), "--plot".into()],
        vec!["bias".into(), "--mode".into(), "mc".into(), "--draws".into(), "20000".into()],
        vec!["rip".into(), s(&matrix).into(), "--s".into(), "3".into()],
        vec!["rip".into(), s(&matrix).into(), "--s".into(), "5".into(), "--randomized".into(), "50".into()],
        vec![
            "scan".into(), "--kind".into(), "sparsity".into(), "--levels".into(), "2,7".into(), "--n".into(), "40".into(),
            "--p".into(), "20".into(), "--replicates".into(), "3".into(), "--bootstrap".into(), "20".into(),
        ],
    ];
    let mut failures = Vec::new();
    let mut compared = 0;
    for (k, cmd) in runs.iter().enumerate() {
        let first = root.join(format!("run{k}"));
        let again = root.join(format!("rerun{k}"));
        let mut args: Vec<&str> = cmd.iter().map(String::as_str).collect();
        args.extend(["--seed", "17", "--threads", "2", "--out", s(&first)]);
        vcreg_ok(&args);
        vcreg_ok(&["rerun", "--manifest", s(&first.join("manifest.json")), "--threads", "1", "--out", s(&again)]);
        let manifest = read_json(&first.join("manifest.json"));
        for name in manifest["outputs"].as_array().unwrap() {
            let name = name.as_str().unwrap();
            compared += 1;
            if !files_equal(&first, &again, name) {
                failures.push(format!("{} {name}", cmd[0]));
            }
        }
    }
    verdict(
        8,
        "determinism",
        failures.is_empty(),
        &format!("{} commands, {compared} output files compared; mismatches {failures:?}", runs.len()),
    );
}
