//! Monte Carlo size and power experiments.
//!
//! A [`Scenario`] fixes a nested design, a data generating process and the
//! resampling counts; [`run_scenario`] draws `z` datasets, runs the test
//! battery on each and reports rejection rates. Iteration `i` of cell `c` is
//! seeded from `(seed, c, i)` alone, so reports do not depend on the number
//! of worker threads.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alt_tests::{self, ResamplingPlan, DEFAULT_BOOTSTRAP, DEFAULT_MC};
use crate::cluster_model::ClusterStructure;
use crate::dgp::{make_iteration, DgpParams};
use crate::error::{Error, Result};
use crate::recluster::{
    crse_test, EnumerationMode, PValueRule, ReclusterConfig, Sided, TestResult, DEFAULT_EXHAUSTIVE_CAP,
    DEFAULT_REPS,
};
use crate::regression::{ols_fit, Dataset};
use crate::rng::{derive_seed, tag};
use crate::variance::Cv1Convention;

/// Iteration count used when a preset cell asks for more.
pub const DESK_Z: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Crse,
    Sv,
    Vmb,
    Wcr,
}

impl TestKind {
    pub const ALL: [TestKind; 4] = [TestKind::Crse, TestKind::Sv, TestKind::Vmb, TestKind::Wcr];

    pub fn tag(self) -> u64 {
        match self {
            TestKind::Crse => tag::CRSE,
            TestKind::Sv => tag::SV,
            TestKind::Vmb => tag::VMB,
            TestKind::Wcr => tag::WCR,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TestKind::Crse => "crse",
            TestKind::Sv => "sv",
            TestKind::Vmb => "vmb",
            TestKind::Wcr => "wcr",
        }
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "crse" => Ok(TestKind::Crse),
            "sv" => Ok(TestKind::Sv),
            "vmb" => Ok(TestKind::Vmb),
            "wcr" => Ok(TestKind::Wcr),
            other => Err(Error::InvalidParameter(format!("unknown test '{other}'"))),
        }
    }
}

/// Settings shared by every test in a battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatteryConfig {
    pub tests: Vec<TestKind>,
    pub alpha: f64,
    pub sided: Sided,
    pub rule: PValueRule,
    /// Reclustering rounds.
    pub reps: usize,
    /// Wild bootstrap resamples for SV.
    pub boot: usize,
    /// Monte Carlo draws for VMB and WCR.
    pub mc: usize,
    pub mode: EnumerationMode,
    pub exhaustive_cap: u64,
    pub cv1: Cv1Convention,
    pub absorb_fine_fe: bool,
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            tests: TestKind::ALL.to_vec(),
            alpha: 0.05,
            sided: Sided::Two,
            rule: PValueRule::Strict,
            reps: DEFAULT_REPS,
            boot: DEFAULT_BOOTSTRAP,
            mc: DEFAULT_MC,
            mode: EnumerationMode::Auto,
            exhaustive_cap: DEFAULT_EXHAUSTIVE_CAP,
            cv1: Cv1Convention::Squared,
            absorb_fine_fe: true,
            parallel: false,
        }
    }
}

impl BatteryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha = {} is outside (0, 1)", self.alpha)));
        }
        if self.reps == 0 || self.boot == 0 || self.mc == 0 {
            return Err(Error::InvalidParameter("resample counts must be at least 1".into()));
        }
        if self.tests.is_empty() {
            return Err(Error::InvalidParameter("no tests selected".into()));
        }
        Ok(())
    }

    fn recluster(&self, seed: u64) -> ReclusterConfig {
        ReclusterConfig {
            reps: self.reps,
            alpha: self.alpha,
            sided: self.sided,
            rule: self.rule,
            seed,
            mode: self.mode,
            exhaustive_cap: self.exhaustive_cap,
            parallel: self.parallel,
        }
    }

    fn plan(&self, base: ResamplingPlan, draws: usize) -> ResamplingPlan {
        ResamplingPlan {
            draws,
            alpha: self.alpha,
            sided: self.sided,
            rule: self.rule,
            parallel: self.parallel,
            ..base
        }
    }
}

/// Runs the selected tests on one dataset; test `t` draws from
/// `derive_seed(seed, [t.tag()])`. The model is fitted once and shared.
pub fn run_battery(data: &Dataset, config: &BatteryConfig, seed: u64) -> Vec<(TestKind, Result<TestResult>)> {
    let fit = ols_fit(data, config.absorb_fine_fe);
    let s = data.structure();
    config
        .tests
        .iter()
        .map(|&kind| {
            let seed = derive_seed(seed, &[kind.tag()]);
            let result = match kind {
                TestKind::Vmb => alt_tests::vmb_test(
                    data,
                    config.absorb_fine_fe,
                    config.cv1,
                    &config.plan(ResamplingPlan::parametric_mc(seed), config.mc),
                ),
                _ => fit.clone().and_then(|fit| match kind {
                    TestKind::Crse => crse_test(s, &fit, config.cv1, &config.recluster(seed)),
                    TestKind::Sv => {
                        alt_tests::sv_test(&fit, s, &config.plan(ResamplingPlan::wild_bootstrap(seed), config.boot))
                    }
                    TestKind::Wcr => alt_tests::wcr_test(
                        &fit,
                        s,
                        &config.plan(ResamplingPlan::sign_randomization(seed), config.mc),
                    ),
                    TestKind::Vmb => unreachable!(),
                }),
            };
            (kind, result)
        })
        .collect()
}

/// Nested design with optional size heterogeneity. With `fine_split = Δ`
/// the first half of the gross clusters have `fine_per_gross + Δ` fine
/// clusters and the rest `fine_per_gross - Δ`; `unit_split` does the same for
/// units within the fine clusters of every gross cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    pub n_gross: usize,
    pub fine_per_gross: usize,
    pub units_per_fine: usize,
    #[serde(default)]
    pub fine_split: usize,
    #[serde(default)]
    pub unit_split: usize,
}

impl StructureSpec {
    pub fn uniform(n_gross: usize, fine_per_gross: usize, units_per_fine: usize) -> Self {
        Self {
            n_gross,
            fine_per_gross,
            units_per_fine,
            fine_split: 0,
            unit_split: 0,
        }
    }

    fn split(count: usize, base: usize, delta: usize, what: &str) -> Result<Vec<usize>> {
        if delta == 0 {
            return Ok(vec![base; count]);
        }
        if !count.is_multiple_of(2) || delta >= base {
            return Err(Error::InvalidParameter(format!(
                "{what} split of {delta} needs an even count and fewer than {base}"
            )));
        }
        Ok((0..count)
            .map(|j| if j < count / 2 { base + delta } else { base - delta })
            .collect())
    }

    pub fn fine_counts(&self) -> Result<Vec<usize>> {
        Self::split(self.n_gross, self.fine_per_gross, self.fine_split, "fine-cluster")
    }

    pub fn build(&self) -> Result<ClusterStructure> {
        if self.n_gross == 0 || self.fine_per_gross == 0 || self.units_per_fine == 0 {
            return Err(Error::InvalidParameter("cluster counts must be positive".into()));
        }
        let sizes = self
            .fine_counts()?
            .into_iter()
            .map(|ng| Self::split(ng, self.units_per_fine, self.unit_split, "unit"))
            .collect::<Result<Vec<_>>>()?;
        ClusterStructure::nested(&sizes)
    }
}

fn default_z() -> usize {
    DESK_Z
}

fn default_seed() -> u64 {
    1
}

fn default_name() -> String {
    "custom".into()
}

/// One simulation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub structure: StructureSpec,
    #[serde(default)]
    pub dgp: DgpParams,
    #[serde(default = "default_z")]
    pub z: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub battery: BatteryConfig,
}

impl Scenario {
    pub fn new(name: impl Into<String>, structure: StructureSpec, rho_u: f64, z: usize) -> Self {
        Self {
            name: name.into(),
            structure,
            dgp: DgpParams::default().with_rho_u(rho_u),
            z,
            seed: default_seed(),
            battery: BatteryConfig::default(),
        }
    }

    /// `ḡ = n_g = 12`, `n_gf = 100`, `ρ_X = 0.5`, `ρ_U = 0`.
    pub fn baseline() -> Self {
        Self::new("baseline", StructureSpec::uniform(12, 12, 100), 0.0, DESK_Z)
    }

    pub fn validate(&self) -> Result<()> {
        if self.z == 0 {
            return Err(Error::InvalidParameter("z must be at least 1".into()));
        }
        self.dgp.validate()?;
        self.battery.validate()?;
        self.structure.build().map(|_| ())
    }
}

/// A simulation cell within a preset.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub scenario: Scenario,
    /// Full-scale iteration count; `z` starts at the desk cap below it.
    pub full_z: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub cells: Vec<Cell>,
}

fn cell(name: &str, structure: StructureSpec, rho_u: f64, full_z: usize) -> Cell {
    Cell {
        scenario: Scenario::new(name, structure, rho_u, full_z.min(DESK_Z)),
        full_z,
    }
}

fn size_and_power(name: &str, specs: &[StructureSpec], z0: usize, z1: usize) -> Vec<Cell> {
    let mut cells: Vec<Cell> = specs.iter().map(|s| cell(name, *s, 0.0, z0)).collect();
    cells.extend(specs.iter().map(|s| cell(name, *s, 0.1, z1)));
    cells
}

/// Named scenario grids. Cells start at `z = min(full z, 2000)`.
pub fn scenario_presets() -> Vec<Preset> {
    let u = StructureSpec::uniform;
    let base = u(12, 12, 100);
    vec![
        Preset {
            name: "baseline",
            description: "g = n_g = 12, n_gf = 100, rho_U = 0",
            cells: vec![cell("baseline", base, 0.0, 2000)],
        },
        Preset {
            name: "rho-sweep",
            description: "baseline with rho_U in {0, 0.1, 0.2}",
            cells: vec![
                cell("rho-sweep", base, 0.0, 2000),
                cell("rho-sweep", base, 0.1, 1200),
                cell("rho-sweep", base, 0.2, 2000),
            ],
        },
        Preset {
            name: "gross-count",
            description: "number of gross clusters in {4, 8, 12}; rho_U in {0, 0.1}",
            cells: size_and_power("gross-count", &[u(4, 12, 100), u(8, 12, 100), u(12, 12, 100)], 2000, 1200),
        },
        Preset {
            name: "fine-count",
            description: "fine clusters per gross cluster in {4, 8, 12}; rho_U in {0, 0.1}",
            cells: size_and_power("fine-count", &[u(12, 4, 100), u(12, 8, 100), u(12, 12, 100)], 2000, 1200),
        },
        Preset {
            name: "unit-count",
            description: "units per fine cluster in {25, 50, 100}; rho_U in {0, 0.1}",
            cells: size_and_power("unit-count", &[u(12, 12, 25), u(12, 12, 50), u(12, 12, 100)], 2000, 1200),
        },
        Preset {
            name: "unit-split",
            description: "unit split 100 +/- dn, dn in {0, 33, 66}; rho_U in {0, 0.1}",
            cells: size_and_power(
                "unit-split",
                &[0, 33, 66].map(|d| StructureSpec { unit_split: d, ..base }),
                4000,
                4000,
            ),
        },
        Preset {
            name: "fine-split",
            description: "fine-cluster split 12 +/- dn, dn in {0, 4, 8}; rho_U in {0, 0.1}",
            cells: size_and_power(
                "fine-split",
                &[0, 4, 8].map(|d| StructureSpec { fine_split: d, ..base }),
                4000,
                4000,
            ),
        },
        Preset {
            name: "tiny-gross",
            description: "gross clusters in {2..6, 12, 36, 100}; n_g = n_gf = 2",
            cells: [2, 3, 4, 5, 6, 12, 36, 100]
                .iter()
                .map(|&g| cell("tiny-gross", u(g, 2, 2), 0.0, 10_000))
                .collect(),
        },
        Preset {
            name: "tiny-fine",
            description: "fine clusters per gross cluster in {2..6}; g = n_gf = 2",
            cells: (2..=6).map(|ng| cell("tiny-fine", u(2, ng, 2), 0.0, 10_000)).collect(),
        },
        Preset {
            name: "small-gross",
            description: "gross clusters in {3, 6, 12}; n_g = 4, n_gf = 2",
            cells: [3, 6, 12]
                .iter()
                .map(|&g| cell("small-gross", u(g, 4, 2), 0.0, 10_000))
                .collect(),
        },
        Preset {
            name: "small-units",
            description: "units per fine cluster in {2, 4, 6, 12, 24, 36}; g = 4, n_g = 2",
            cells: [2, 4, 6, 12, 24, 36]
                .iter()
                .map(|&k| cell("small-units", u(4, 2, k), 0.0, 10_000))
                .collect(),
        },
    ]
}

pub fn find_preset(name: &str) -> Option<Preset> {
    scenario_presets().into_iter().find(|p| p.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Keep every iteration's p-value and decision.
    pub keep_draws: bool,
}

/// Rejection rate of one test in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TestRate {
    pub test: TestKind,
    pub rejections: usize,
    pub z: usize,
    pub rate: f64,
    /// `sqrt(rate (1 - rate) / z)`.
    pub mc_se: f64,
    /// Iterations in which no decision was possible; counted as
    /// non-rejections.
    pub degenerate: usize,
    pub p_values: Option<Vec<f64>>,
    pub decisions: Option<Vec<Option<bool>>>,
}

impl TestRate {
    fn from_outcomes(test: TestKind, outcomes: Vec<(f64, Option<bool>)>, keep: bool) -> Self {
        let z = outcomes.len();
        let rejections = outcomes.iter().filter(|o| o.1 == Some(true)).count();
        let degenerate = outcomes.iter().filter(|o| o.1.is_none()).count();
        let rate = rejections as f64 / z as f64;
        Self {
            test,
            rejections,
            z,
            rate,
            mc_se: (rate * (1.0 - rate) / z as f64).sqrt(),
            degenerate,
            p_values: keep.then(|| outcomes.iter().map(|o| o.0).collect()),
            decisions: keep.then(|| outcomes.iter().map(|o| o.1).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionReport {
    pub scenario: Scenario,
    pub cell: u64,
    pub rates: Vec<TestRate>,
    pub runtime: Duration,
}

impl RejectionReport {
    pub fn rate(&self, test: TestKind) -> Option<&TestRate> {
        self.rates.iter().find(|r| r.test == test)
    }
}

/// Seed of iteration `iteration` in cell `cell`.
pub fn iteration_seed(master: u64, cell: u64, iteration: u64) -> u64 {
    derive_seed(master, &[cell, iteration])
}

/// The dataset of one iteration.
pub fn iteration_data(scenario: &Scenario, structure: &ClusterStructure, cell: u64, iteration: u64) -> Result<Dataset> {
    let seed = iteration_seed(scenario.seed, cell, iteration);
    make_iteration(structure, &scenario.dgp, derive_seed(seed, &[tag::DGP]))
}

/// P-value and decision of each selected test.
type IterationOutcome = Vec<(f64, Option<bool>)>;

fn run_iteration(
    scenario: &Scenario,
    structure: &ClusterStructure,
    cell: u64,
    iteration: u64,
) -> Result<IterationOutcome> {
    let wrap = |e: Error| Error::Iteration {
        iteration: iteration as usize,
        source: Box::new(e),
    };
    let data = iteration_data(scenario, structure, cell, iteration).map_err(wrap)?;
    let seed = derive_seed(iteration_seed(scenario.seed, cell, iteration), &[tag::BATTERY]);
    run_battery(&data, &scenario.battery, seed)
        .into_iter()
        .map(|(_, r)| r.map(|r| (r.p_value, r.rejected)).map_err(wrap))
        .collect()
}

/// Runs `scenario.z` iterations of cell `cell`.
pub fn run_scenario(scenario: &Scenario, cell: u64, options: RunOptions) -> Result<RejectionReport> {
    scenario.validate()?;
    let structure = scenario.structure.build()?;
    let start = Instant::now();
    let mut battery = scenario.battery.clone();
    battery.parallel = false;
    let scenario_run = Scenario {
        battery,
        ..scenario.clone()
    };
    let work = || -> Result<Vec<IterationOutcome>> {
        (0..scenario.z as u64)
            .into_par_iter()
            .map(|i| run_iteration(&scenario_run, &structure, cell, i))
            .collect()
    };
    let per_iteration = match options.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    let rates = scenario
        .battery
        .tests
        .iter()
        .enumerate()
        .map(|(k, &test)| {
            let outcomes = per_iteration.iter().map(|row| row[k]).collect();
            TestRate::from_outcomes(test, outcomes, options.keep_draws)
        })
        .collect();
    Ok(RejectionReport {
        scenario: scenario.clone(),
        cell,
        rates,
        runtime: start.elapsed(),
    })
}

pub const CSV_COLUMNS: [&str; 17] = [
    "scenario",
    "cell",
    "n_gross",
    "fine_per_gross",
    "units_per_fine",
    "fine_split",
    "unit_split",
    "rho_x_gross",
    "rho_x_fine",
    "rho_u_gross",
    "rho_u_fine",
    "model",
    "test",
    "rate",
    "mc_se",
    "z",
    "degenerate",
];

/// Writes `#`-prefixed header lines followed by one CSV row per cell and
/// test.
pub fn write_report_csv<W: Write>(out: W, header: &[String], reports: &[RejectionReport]) -> Result<()> {
    let io = |e: std::io::Error| Error::InvalidParameter(format!("write failed: {e}"));
    let mut out = out;
    for line in header {
        writeln!(out, "# {line}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::InvalidParameter(format!("write failed: {e}"));
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in reports {
        let s = &r.scenario;
        let d = &s.dgp;
        let model = serde_json::to_value(d.model)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        for t in &r.rates {
            w.write_record([
                s.name.clone(),
                r.cell.to_string(),
                s.structure.n_gross.to_string(),
                s.structure.fine_per_gross.to_string(),
                s.structure.units_per_fine.to_string(),
                s.structure.fine_split.to_string(),
                s.structure.unit_split.to_string(),
                d.rho_x_gross.to_string(),
                d.rho_x_fine.to_string(),
                d.rho_u_gross.to_string(),
                d.rho_u_fine.to_string(),
                model.clone(),
                t.test.to_string(),
                t.rate.to_string(),
                format!("{:.6}", t.mc_se),
                t.z.to_string(),
                t.degenerate.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(z: usize) -> Scenario {
        let mut s = Scenario::new("t", StructureSpec::uniform(4, 2, 3), 0.0, z);
        s.battery.reps = 99;
        s.battery.boot = 99;
        s.battery.mc = 99;
        s
    }

    #[test]
    fn structure_splits() {
        let s = StructureSpec { fine_split: 4, ..StructureSpec::uniform(4, 12, 10) }.build().unwrap();
        assert_eq!(s.gross_sizes(), &[16, 16, 8, 8]);
        let s = StructureSpec { unit_split: 33, ..StructureSpec::uniform(2, 4, 100) }.build().unwrap();
        assert_eq!(&s.fine_sizes()[..4], &[133, 133, 67, 67]);
        assert!(StructureSpec { fine_split: 12, ..StructureSpec::uniform(4, 12, 10) }.build().is_err());
        assert!(StructureSpec { unit_split: 1, ..StructureSpec::uniform(2, 3, 10) }.build().is_err());
    }

    #[test]
    fn presets_cover_the_grids() {
        let sweep = find_preset("rho-sweep").unwrap();
        let rhos: Vec<f64> = sweep.cells.iter().map(|c| c.scenario.dgp.rho_u_fine).collect();
        assert_eq!(rhos, vec![0.0, 0.1, 0.2]);
        let min = &find_preset("tiny-gross").unwrap().cells[0].scenario.structure;
        assert_eq!((min.n_gross, min.fine_per_gross, min.units_per_fine), (2, 2, 2));
        let hg = find_preset("fine-split").unwrap();
        assert_eq!(hg.cells.iter().map(|c| c.scenario.structure.fine_split).collect::<Vec<_>>(), vec![0, 4, 8, 0, 4, 8]);
        for p in scenario_presets() {
            for c in &p.cells {
                c.scenario.validate().unwrap();
                assert!(c.scenario.z <= DESK_Z && c.scenario.z <= c.full_z);
            }
        }
    }

    #[test]
    fn single_iteration_rate_is_zero_or_one() {
        let r = run_scenario(&tiny(1), 0, RunOptions::default()).unwrap();
        for t in &r.rates {
            assert!(t.rate == 0.0 || t.rate == 1.0);
        }
    }

    #[test]
    fn thread_count_does_not_matter() {
        let s = tiny(24);
        let keep = |threads| RunOptions { threads, keep_draws: true };
        let a = run_scenario(&s, 3, keep(Some(1))).unwrap();
        let b = run_scenario(&s, 3, keep(Some(4))).unwrap();
        assert_eq!(a.rates, b.rates);
        for t in &a.rates {
            let decisions = t.decisions.as_ref().unwrap();
            let recomputed = decisions.iter().filter(|d| **d == Some(true)).count() as f64 / t.z as f64;
            assert_eq!(recomputed, t.rate);
            assert_eq!((t.rate * t.z as f64).fract(), 0.0);
        }
    }

    #[test]
    fn csv_has_one_row_per_test() {
        let r = run_scenario(&tiny(2), 0, RunOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &["seed: 1".into()], &[r.clone(), r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# seed: 1\nscenario,cell,"));
        assert_eq!(text.lines().count(), 2 + 8);
    }

    #[test]
    fn test_kind_parsing() {
        assert_eq!("CRSE".parse::<TestKind>().unwrap(), TestKind::Crse);
        assert!("foo".parse::<TestKind>().is_err());
    }
}
