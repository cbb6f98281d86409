//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Simulation criteria run at the desk scale (z = 2000 or 500).

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use reclust::alt_tests::{sv_test, vmb_test, wcr_test, ResamplingPlan};
use reclust::cli_io::{read_dataset, ColumnMap};
use reclust::cluster_model::count_partitions;
use reclust::recluster::{exhaustive_test, permutation_test, EnumerationMode, ReclusterConfig};
use reclust::regression::{aggregate_scores, ols_fit, Level};
use reclust::simulator::{run_scenario, RejectionReport, RunOptions, Scenario, StructureSpec, TestKind};
use reclust::variance::{crse_statistic, sandwich, CrseStatistic, EstimateLevel};
use reclust::{crse_test, ClusterStructure, Cv1Convention, Dataset, GrossMap, TestResult};

use common::{dense_crse, random_dataset, random_structure, rng};

#[derive(Default)]
struct Outcome {
    passed: usize,
    failed: usize,
}

impl Outcome {
    fn line(&mut self, id: &str, name: &str, pass: bool, details: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id} {name}: {verdict} {details}");
        if pass {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
    }
}

fn simulate(spec: StructureSpec, rho_u: f64, z: usize, cell: u64) -> RejectionReport {
    let scenario = Scenario::new("acceptance", spec, rho_u, z);
    run_scenario(&scenario, cell, RunOptions::default()).expect("simulation runs")
}

fn rate(report: &RejectionReport, kind: TestKind) -> f64 {
    report.rate(kind).expect("test was run").rate
}

fn rate_text(report: &RejectionReport, kind: TestKind) -> String {
    let r = report.rate(kind).expect("test was run");
    format!("{kind} {:.4} (se {:.4}, z {})", r.rate, r.mc_se, r.z)
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn table_counts(out: &mut Outcome) {
    let printed: [(usize, [u64; 3]); 4] = [
        (2, [3, 15, 105]),
        (3, [10, 280, 15_400]),
        (4, [35, 5_775, 2_627_625]),
        (5, [126, 126_126, 488_864_376]),
    ];
    let start = Instant::now();
    let mut mismatches = Vec::new();
    for (n_g, row) in printed {
        for (g, want) in (2..=4).zip(row) {
            let got = count_partitions(&vec![n_g; g]);
            if got.to_string() != want.to_string() {
                mismatches.push(format!("g={g} n_g={n_g}: {got} != {want}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let details = format!("12 cells, {} mismatches {:?}, {}", mismatches.len(), mismatches, secs(elapsed));
    out.line("1", "partition counts", mismatches.is_empty() && elapsed < Duration::from_secs(1), details);
}

fn permutation_vs_exhaustive(out: &mut Outcome) {
    let start = Instant::now();
    let mut r = rng(2002);
    let mut worst = 0.0f64;
    for d in 0..20u64 {
        let sizes: Vec<Vec<usize>> = (0..3).map(|_| (0..2).map(|_| r.random_range(2..6)).collect()).collect();
        let s = ClusterStructure::nested(&sizes).unwrap();
        let data = random_dataset(&mut r, &s, 0);
        let fit = ols_fit(&data, true).unwrap();
        let stat = CrseStatistic::new(&fit, &s, Cv1Convention::Squared).unwrap();
        let cfg = ReclusterConfig { reps: 10_000, seed: 100 + d, mode: EnumerationMode::MonteCarlo, ..Default::default() };
        let mc = permutation_test(&s, &stat, &cfg).unwrap();
        let exact = exhaustive_test(&s, &stat, &cfg).unwrap();
        assert_eq!(exact.draws.len(), 15);
        worst = worst.max((mc.p_value - exact.p_value).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 0.02 && elapsed < Duration::from_secs(60);
    out.line("2", "permutation vs exhaustive", pass, format!("20 datasets, max |p_mc - p_exact| {worst:.4} <= 0.02, {}", secs(elapsed)));
}

fn sandwich_oracle(out: &mut Outcome) {
    let mut r = rng(3003);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 50 {
        let n_gross = r.random_range(2..5);
        let s = random_structure(&mut r, n_gross, 3, 4);
        let controls = r.random_range(0..3);
        let absorb = r.random_bool(0.5);
        let k = 1 + controls + if absorb { s.n_fine() } else { 0 };
        // exact fits and single-unit fine clusters make the statistic zero
        if s.n() > 40 || s.n() < k + 2 || s.fine_sizes().iter().any(|&m| m < 2) {
            continue;
        }
        let data = random_dataset(&mut r, &s, controls);
        let Ok(fit) = ols_fit(&data, absorb) else { continue };
        let tau = crse_statistic(&fit, &s, &GrossMap::observed(&s), Cv1Convention::Squared).unwrap();
        let oracle = dense_crse(&data, absorb, s.fine_to_gross(), s.n_gross());
        worst = worst.max((tau - oracle).abs() / oracle.abs());
        checked += 1;
    }
    out.line("3", "sandwich oracle", worst <= 1e-8, format!("50 instances, max relative error {worst:.2e} <= 1e-8"));
}

fn simulations(out: &mut Outcome) {
    let baseline = StructureSpec::uniform(12, 12, 100);

    let start = Instant::now();
    let base = simulate(baseline, 0.0, 2000, 0);
    let t = secs(start.elapsed());
    for kind in [TestKind::Crse, TestKind::Sv] {
        let v = rate(&base, kind);
        out.line(
            &format!("4{}", if kind == TestKind::Crse { "a" } else { "b" }),
            &format!("baseline size {kind}"),
            (0.035..=0.065).contains(&v),
            format!("{} in [0.035, 0.065], {t}", rate_text(&base, kind)),
        );
    }
    let wcr = rate(&base, TestKind::Wcr);
    out.line("4c", "baseline WCR over-rejects", wcr > 0.07, format!("{} > 0.07", rate_text(&base, TestKind::Wcr)));
    println!("  baseline VMB for reference: {}", rate_text(&base, TestKind::Vmb));

    let start = Instant::now();
    let r1 = simulate(baseline, 0.1, 500, 1);
    let r2 = simulate(baseline, 0.2, 500, 2);
    let t = secs(start.elapsed());
    for (sub, kind) in [("a", TestKind::Crse), ("b", TestKind::Sv)] {
        let (a, b, c) = (rate(&base, kind), rate(&r1, kind), rate(&r2, kind));
        let (w1, w2) = (rate(&r1, TestKind::Wcr), rate(&r2, TestKind::Wcr));
        out.line(
            &format!("5{sub}"),
            &format!("power ordering {kind}"),
            a < b && b < c && b > w1 && c > w2,
            format!("rho 0/0.1/0.2: {a:.4} < {b:.4} < {c:.4}; WCR {w1:.4}, {w2:.4}; {t}"),
        );
    }
    let v0 = rate(&base, TestKind::Vmb);
    let (v1, v2) = (rate(&r1, TestKind::Vmb), rate(&r2, TestKind::Vmb));
    let drift = (v1 - v0).abs().max((v2 - v0).abs());
    out.line("5c", "VMB stays near its null level", drift <= 0.10, format!("rho 0/0.1/0.2: {v0:.4}, {v1:.4}, {v2:.4}; max drift {drift:.4} <= 0.10"));

    let small: [(&str, StructureSpec, f64, f64); 3] = [
        ("6a", StructureSpec::uniform(2, 2, 2), 1.0 / 3.0, 0.04),
        ("6b", StructureSpec::uniform(3, 2, 2), 1.0 / 15.0, 0.03),
        ("6c", StructureSpec::uniform(2, 3, 2), 1.0 / 10.0, 0.03),
    ];
    for (id, spec, target, tol) in small {
        let mut scenario = Scenario::new("acceptance", spec, 0.0, 2000);
        scenario.battery.tests = vec![TestKind::Crse];
        let rep = run_scenario(&scenario, 6, RunOptions::default()).unwrap();
        let v = rate(&rep, TestKind::Crse);
        out.line(
            id,
            &format!("very small sample g={} n_g={}", spec.n_gross, spec.fine_per_gross),
            (v - target).abs() <= tol,
            format!("{} vs {target:.4} +/- {tol}", rate_text(&rep, TestKind::Crse)),
        );
    }

    let start = Instant::now();
    let rep = simulate(StructureSpec::uniform(4, 2, 2), 0.0, 2000, 7);
    let t = secs(start.elapsed());
    let c = rate(&rep, TestKind::Crse);
    out.line("7a", "small sample CRSE size", (0.03..=0.07).contains(&c), format!("{} in [0.03, 0.07], {t}", rate_text(&rep, TestKind::Crse)));
    for (id, kind) in [("7b", TestKind::Vmb), ("7c", TestKind::Wcr)] {
        out.line(id, &format!("small sample {kind} over-rejects"), rate(&rep, kind) > 0.10, format!("{} > 0.10", rate_text(&rep, kind)));
    }
}

/// Every draw falls on the same side of the observed statistic in both
/// results, ignoring draws that tie with it up to rounding.
fn same_decisions(a: &TestResult, b: &TestResult) -> bool {
    a.draws.len() == b.draws.len()
        && a.draws.iter().zip(&b.draws).all(|(da, db)| {
            (da - a.statistic).abs() <= 1e-9 * (a.statistic.abs() + da.abs()) || (da > &a.statistic) == (db > &b.statistic)
        })
}

fn invariants(out: &mut Outcome) {
    let conv = Cv1Convention::Squared;
    let mut failures: Vec<&str> = Vec::new();
    for seed in 0..25u64 {
        let mut r = rng(8000 + seed);
        let s = ClusterStructure::nested(&[vec![3, 4], vec![4, 3], vec![3, 3], vec![5, 2]]).unwrap();
        let data = random_dataset(&mut r, &s, 1);
        let fit = ols_fit(&data, true).unwrap();

        let tau = crse_statistic(&fit, &s, &GrossMap::observed(&s), conv).unwrap();
        let mut order: Vec<usize> = (0..s.n_fine()).collect();
        order.shuffle(&mut r);
        let moved: Dataset = data.permute_fine(&order).unwrap();
        let fit2 = ols_fit(&moved, true).unwrap();
        let tau2 = crse_statistic(&fit2, moved.structure(), &GrossMap::observed(moved.structure()), conv).unwrap();
        if (tau - tau2).abs() > 1e-9 * tau {
            failures.push("exchangeability");
        }

        let c = [0.5, 2.0, 3.7, 100.0][seed as usize % 4];
        let scaled = data.with_outcome(data.y().iter().map(|v| c * v).collect()).unwrap();
        let fit_c = ols_fit(&scaled, true).unwrap();
        let cfg = ReclusterConfig { reps: 300, seed, mode: EnumerationMode::MonteCarlo, ..Default::default() };
        let plan = |p: ResamplingPlan| ResamplingPlan { draws: 300, ..p };
        let pairs = [
            (crse_test(&s, &fit, conv, &cfg).unwrap(), crse_test(&s, &fit_c, conv, &cfg).unwrap()),
            (
                sv_test(&fit, &s, &plan(ResamplingPlan::wild_bootstrap(seed))).unwrap(),
                sv_test(&fit_c, &s, &plan(ResamplingPlan::wild_bootstrap(seed))).unwrap(),
            ),
            (
                vmb_test(&data, true, conv, &plan(ResamplingPlan::parametric_mc(seed))).unwrap(),
                vmb_test(&scaled, true, conv, &plan(ResamplingPlan::parametric_mc(seed))).unwrap(),
            ),
            (
                wcr_test(&fit, &s, &plan(ResamplingPlan::sign_randomization(seed))).unwrap(),
                wcr_test(&fit_c, &s, &plan(ResamplingPlan::sign_randomization(seed))).unwrap(),
            ),
        ];
        if !pairs.iter().all(|(a, b)| same_decisions(a, b)) {
            failures.push("scale invariance");
        }

        let total: f64 = fit.scores().iter().sum();
        let scale: f64 = fit.scores().iter().map(|v| v.abs()).sum();
        for level in [Level::Fine, Level::Gross] {
            let agg: f64 = aggregate_scores(fit.scores(), &s, level, None).unwrap().iter().sum();
            if (agg - total).abs() > 1e-12 * scale {
                failures.push("score conservation");
            }
        }

        let pcfg = ReclusterConfig { parallel: true, ..cfg };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                (
                    crse_test(&s, &fit, conv, &pcfg).unwrap(),
                    sv_test(&fit, &s, &ResamplingPlan { parallel: true, ..plan(ResamplingPlan::wild_bootstrap(seed)) }).unwrap(),
                )
            })
        };
        let one = run(1);
        if one != run(4) {
            failures.push("worker-count determinism");
        }

        let res = &one.0;
        let above = res.draws.iter().filter(|&&t| t > res.statistic).count();
        if res.p_value != above as f64 / res.draws.len() as f64 {
            failures.push("p-value recomputation");
        }
    }
    failures.dedup();
    out.line("8", "invariant suite", failures.is_empty(), format!("25 datasets x 5 invariants, broken: {failures:?}"));
}

/// Runs only when `RECLUST_APP_CSV` points at the application extract.
/// Columns default to `y,x,fine,gross`; override with
/// `RECLUST_APP_COLUMNS=outcome,regressor,county,state[,controls...]`.
fn application(out: &mut Outcome) {
    let Some(path) = std::env::var_os("RECLUST_APP_CSV").map(PathBuf::from) else {
        println!("criterion 9 application workflow: SKIPPED (RECLUST_APP_CSV not set)");
        return;
    };
    let spec = std::env::var("RECLUST_APP_COLUMNS").unwrap_or_else(|_| "y,x,fine,gross".into());
    let cols: Vec<String> = spec.split(',').map(|c| c.trim().to_string()).collect();
    assert!(cols.len() >= 4, "RECLUST_APP_COLUMNS needs at least four names");
    let map = ColumnMap {
        y: cols[0].clone(),
        x: cols[1].clone(),
        fine: cols[2].clone(),
        gross: cols[3].clone(),
        controls: cols[4..].to_vec(),
    };
    let data = read_dataset(&path, &map).expect("readable extract");
    let s = data.structure();
    let fit = ols_fit(&data, true).expect("fit");
    let se_p = |level: EstimateLevel, clusters: usize| {
        let se = sandwich(&fit, s, level, Cv1Convention::Textbook).unwrap().se;
        let t = StudentsT::new(0.0, 1.0, (clusters - 1) as f64).unwrap();
        (se, 2.0 * (1.0 - t.cdf((fit.beta_target() / se).abs())))
    };
    let (county, p_county) = se_p(EstimateLevel::Fine, s.n_fine());
    let (state, p_state) = se_p(EstimateLevel::Gross, s.n_gross());
    let cfg = ReclusterConfig { reps: 1000, seed: 1, ..Default::default() };
    let res = crse_test(s, &fit, Cv1Convention::Squared, &cfg).unwrap();

    let checks = [
        ("estimate", fit.beta_target(), 1.117, 0.0005),
        ("county se", county, 0.549, 0.0005),
        ("county p", p_county, 0.046, 0.0005),
        ("state se", state, 0.634, 0.0005),
        ("state p", p_state, 0.087, 0.0005),
        ("reclustering p", res.p_value, 0.038, 0.015),
        ("tau_obs", res.statistic, 0.660, 0.0005),
    ];
    for (name, got, want, tol) in checks {
        out.line("9", &format!("application {name}"), (got - want).abs() <= tol, format!("{got:.4} vs {want} +/- {tol}"));
    }
}

fn main() -> ExitCode {
    let mut out = Outcome::default();
    table_counts(&mut out);
    permutation_vs_exhaustive(&mut out);
    sandwich_oracle(&mut out);
    simulations(&mut out);
    invariants(&mut out);
    application(&mut out);
    println!("acceptance: {} passed, {} failed", out.passed, out.failed);
    if out.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
