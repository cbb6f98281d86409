//! Command-line interface: `test`, `simulate` and `partitions`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cluster_model::{count_distinct_regroupings, feasibility, format_count, ClusterStructure, Feasibility};
use crate::dgp::{MixWeights, Model};
use crate::error::Error;
use crate::recluster::{EnumerationMode, PValueRule, Sided, TestResult};
use crate::regression::{ols_fit, Dataset, RegressionFit};
use crate::simulator::{
    find_preset, iteration_data, iteration_seed, run_battery, run_scenario, scenario_presets, write_report_csv,
    BatteryConfig, RejectionReport, RunOptions, Scenario, TestKind,
};
use crate::variance::{sandwich, Cv1Convention, EstimateLevel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

fn data_err(e: Error) -> CliError {
    CliError::data(e.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::data(format!("{}: {e}", path.display()))
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "reclust", version, about = "Choose between fine and gross clustering levels by reclustering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the tests on a CSV dataset.
    Test(TestArgs),
    /// Run Monte Carlo size and power experiments.
    Simulate(SimulateArgs),
    /// Count the regroupings available for a design.
    Partitions(PartitionArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SidedArg {
    Two,
    Upper,
    Lower,
}

impl From<SidedArg> for Sided {
    fn from(s: SidedArg) -> Self {
        match s {
            SidedArg::Two => Sided::Two,
            SidedArg::Upper => Sided::Upper,
            SidedArg::Lower => Sided::Lower,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConventionArg {
    Squared,
    Textbook,
}

impl From<ConventionArg> for Cv1Convention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Squared => Cv1Convention::Squared,
            ConventionArg::Textbook => Cv1Convention::Textbook,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixArg {
    Half,
    UnitVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    Ar1,
    HiddenFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Auto,
    Mc,
    Exhaustive,
}

impl From<ModeArg> for EnumerationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Auto => EnumerationMode::Auto,
            ModeArg::Mc => EnumerationMode::MonteCarlo,
            ModeArg::Exhaustive => EnumerationMode::Exhaustive,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TestArgs {
    /// CSV file with one row per unit and a header row.
    pub file: PathBuf,
    /// Outcome column.
    #[arg(long)]
    pub y: String,
    /// Target regressor column.
    #[arg(long)]
    pub x: String,
    /// Extra control columns.
    #[arg(long, value_delimiter = ',')]
    pub controls: Vec<String>,
    /// Fine cluster id column.
    #[arg(long)]
    pub fine: String,
    /// Gross cluster id column.
    #[arg(long)]
    pub gross: String,
    /// Tests to run: crse, sv, vmb, wcr or all.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub tests: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Reclustering rounds.
    #[arg(long, default_value_t = crate::recluster::DEFAULT_REPS)]
    pub reps: usize,
    /// Wild bootstrap resamples for SV.
    #[arg(long, default_value_t = crate::alt_tests::DEFAULT_BOOTSTRAP)]
    pub boot: usize,
    /// Monte Carlo draws for VMB and WCR.
    #[arg(long, default_value_t = crate::alt_tests::DEFAULT_MC)]
    pub mc: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Run even if the design has too few regroupings for the level.
    #[arg(long)]
    pub force: bool,
    /// Do not absorb fine-cluster fixed effects.
    #[arg(long)]
    pub no_fe: bool,
    #[arg(long, value_enum, default_value = "squared")]
    pub cv1_convention: ConventionArg,
    #[arg(long, value_enum, default_value = "two")]
    pub sided: SidedArg,
    /// Use (1 + #{draw >= observed}) / (R + 1) instead of the strict share.
    #[arg(long)]
    pub conventional_p: bool,
    /// Reclustering enumeration: auto, mc or exhaustive.
    #[arg(long, value_enum, default_value = "auto")]
    pub mode: ModeArg,
    /// Write the reclustering draws of the statistic to this CSV file.
    #[arg(long)]
    pub draws_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Named scenario grid (see --list-presets).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// TOML scenario file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub list_presets: bool,
    /// Iterations per cell.
    #[arg(long, conflicts_with = "full_z")]
    pub z: Option<usize>,
    /// Use the full-scale iteration counts instead of the desk cap.
    #[arg(long)]
    pub full_z: bool,
    /// Sets both fine and gross error correlation in every cell.
    #[arg(long)]
    pub rho_u: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Resamples for SV, VMB and WCR.
    #[arg(long)]
    pub boot: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub tests: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long, value_enum)]
    pub mix_weights: Option<MixArg>,
    #[arg(long, value_enum)]
    pub cv1_convention: Option<ConventionArg>,
    /// Rejection-rate CSV; written to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-iteration p-values and decisions as CSV.
    #[arg(long)]
    pub dump_pvalues: Option<PathBuf>,
    /// Directory for simulated datasets.
    #[arg(long)]
    pub dump_data: Option<PathBuf>,
    /// Datasets to dump per cell.
    #[arg(long, default_value_t = 1)]
    pub dump_count: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PartitionArgs {
    /// Number of gross clusters.
    #[arg(short = 'g', long = "gross")]
    pub n_gross: Option<usize>,
    /// Fine clusters per gross cluster: one count, or one per gross cluster
    /// separated by commas.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ng: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value = "two")]
    pub sided: SidedArg,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Test(a) => cmd_test(a, out, err),
        Command::Simulate(a) => cmd_simulate(a, out, err),
        Command::Partitions(a) => cmd_partitions(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn check_alpha(alpha: f64) -> CliResult<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!("alpha = {alpha} is outside (0, 1)")))
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::data(format!("write failed: {e}")))
}

fn cmd_partitions(a: &PartitionArgs, out: &mut dyn Write) -> CliResult<()> {
    check_alpha(a.alpha)?;
    let sizes = match (a.n_gross, a.ng.as_slice()) {
        (Some(g), [k]) => vec![*k; g],
        (Some(g), list) if list.len() == g => list.to_vec(),
        (None, list) if list.len() > 1 => list.to_vec(),
        (Some(g), list) => {
            return Err(CliError::usage(format!(
                "--ng lists {} counts for {g} gross clusters",
                list.len()
            )))
        }
        (None, _) => return Err(CliError::usage("give -g or one --ng count per gross cluster")),
    };
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(CliError::usage("every gross cluster needs at least one fine cluster"));
    }
    let sided: Sided = a.sided.into();
    let verdict = feasibility(&sizes, a.alpha, sided);
    let list: Vec<String> = sizes.iter().map(|k| k.to_string()).collect();
    let mut text = String::new();
    text += &format!("gross clusters: {}\n", sizes.len());
    text += &format!("fine clusters per gross cluster: {}\n", list.join(","));
    text += &format!("partitions r*: {}\n", format_count(verdict.partitions()));
    text += &format!("distinct regroupings: {}\n", count_distinct_regroupings(&sizes));
    let required = match sided {
        Sided::Two => 2.0 / a.alpha,
        _ => 1.0 / a.alpha,
    };
    text += &format!("required at alpha = {} ({}): r* >= {}\n", a.alpha, sided, required);
    text += &format!(
        "verdict: {}\n",
        if verdict.is_feasible() { "feasible" } else { "infeasible" }
    );
    write_out(out, &text)
}

/// Column mapping for reading a unit-level table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ColumnMap {
    pub y: String,
    pub x: String,
    pub controls: Vec<String>,
    pub fine: String,
    pub gross: String,
}

/// Reads a CSV table into a dataset with `x` as the target regressor.
/// Lines starting with `#` are skipped.
pub fn read_dataset(path: &Path, columns: &ColumnMap) -> CliResult<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        .clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::data(format!("column '{name}' not found in {}", path.display())))
    };
    let numeric: Vec<(String, usize)> = std::iter::once(&columns.y)
        .chain(std::iter::once(&columns.x))
        .chain(&columns.controls)
        .map(|c| index(c).map(|i| (c.clone(), i)))
        .collect::<CliResult<_>>()?;
    let (fine_col, gross_col) = (index(&columns.fine)?, index(&columns.gross)?);

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); numeric.len()];
    let (mut fine, mut gross) = (Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let line = row + 2;
        for ((name, i), col) in numeric.iter().zip(values.iter_mut()) {
            let cell = record.get(*i).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| {
                CliError::data(format!("row {line}: column '{name}' has non-numeric value '{cell}'"))
            })?;
            if !v.is_finite() {
                return Err(CliError::data(format!("row {line}: column '{name}' is not finite")));
            }
            col.push(v);
        }
        for (i, ids) in [(fine_col, &mut fine), (gross_col, &mut gross)] {
            let id = record.get(i).unwrap_or("");
            if id.is_empty() {
                return Err(CliError::data(format!("row {line}: missing cluster id")));
            }
            ids.push(id.to_string());
        }
    }
    if fine.is_empty() {
        return Err(CliError::data(format!("{}: no data rows", path.display())));
    }
    let structure = ClusterStructure::from_labels(&fine, &gross).map_err(data_err)?;
    let n = fine.len();
    let y = values.remove(0);
    let p = values.len();
    let x = DMatrix::from_iterator(n, p, values.into_iter().flatten());
    let names = numeric.iter().skip(1).map(|(c, _)| c.clone()).collect();
    Dataset::new(y, x, names, 0, structure).map_err(data_err)
}

/// Writes a dataset as `y,x,fine,gross` CSV, preceded by `#` comment lines.
/// Values use the shortest representation that reads back exactly.
pub fn write_dataset(path: &Path, data: &Dataset, header: &[String]) -> CliResult<()> {
    let mut text = String::new();
    for line in header {
        text += &format!("# {line}\n");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let s = data.structure();
    let mut cols = vec!["y".to_string()];
    cols.extend(data.names().iter().cloned());
    cols.extend(["fine".to_string(), "gross".to_string()]);
    let csv_err = |e: csv::Error| CliError::data(e.to_string());
    w.write_record(&cols).map_err(csv_err)?;
    for i in 0..data.n() {
        let f = s.unit_to_fine()[i];
        let mut row = vec![data.y()[i].to_string()];
        row.extend(data.regressors().row(i).iter().map(|v| v.to_string()));
        row.push(s.fine_labels()[f].clone());
        row.push(s.gross_labels()[s.fine_to_gross()[f]].clone());
        w.write_record(&row).map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    text += &String::from_utf8_lossy(&body);
    fs::write(path, text).map_err(io_err(path))
}

fn parse_tests(list: &[String]) -> CliResult<Vec<TestKind>> {
    let mut tests = Vec::new();
    for item in list {
        if item.trim().eq_ignore_ascii_case("all") {
            tests.extend(TestKind::ALL);
            continue;
        }
        tests.push(item.parse::<TestKind>().map_err(|e| CliError::usage(e.to_string()))?);
    }
    tests.sort();
    tests.dedup();
    if tests.is_empty() {
        return Err(CliError::usage("no tests selected"));
    }
    Ok(tests)
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match threads {
        Some(0) => Err(CliError::usage("--threads must be at least 1")),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| CliError::usage(e.to_string())),
        None => Ok(f()),
    }
}

fn t_p_value(t: f64, df: usize) -> f64 {
    match StudentsT::new(0.0, 1.0, df as f64) {
        Ok(dist) => 2.0 * (1.0 - dist.cdf(t.abs())),
        Err(_) => f64::NAN,
    }
}

fn decision(r: &TestResult) -> &'static str {
    match r.rejected {
        Some(true) => "reject",
        Some(false) => "do not reject",
        None => "withheld (degenerate)",
    }
}

fn audit_header(command: &str, seed: u64, config: &impl Serialize) -> Vec<String> {
    vec![
        format!("reclust {VERSION} {command}"),
        format!("seed: {seed}"),
        format!("config: {}", serde_json::to_string(config).unwrap_or_default()),
    ]
}

fn standard_errors(fit: &RegressionFit, data: &Dataset, convention: Cv1Convention) -> CliResult<String> {
    let s = data.structure();
    let beta = fit.beta_target();
    let mut text = format!("{:<7} {:>12} {:>10} {:>10} {:>6}\n", "level", "se", "t", "p", "df");
    let levels = [
        (EstimateLevel::Naive, data.n().saturating_sub(fit.k_bar())),
        (EstimateLevel::Fine, s.n_fine().saturating_sub(1)),
        (EstimateLevel::Gross, s.n_gross().saturating_sub(1)),
    ];
    for (level, df) in levels {
        match sandwich(fit, s, level, convention) {
            Ok(est) => {
                let t = beta / est.se;
                text += &format!(
                    "{:<7} {:>12.6} {:>10.4} {:>10.4} {:>6}\n",
                    level.to_string(),
                    est.se,
                    t,
                    t_p_value(t, df),
                    df
                );
            }
            Err(e) => text += &format!("{:<7} unavailable: {e}\n", level.to_string()),
        }
    }
    Ok(text)
}

fn cmd_test(a: &TestArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    check_alpha(a.alpha)?;
    if a.reps == 0 || a.boot == 0 || a.mc == 0 {
        return Err(CliError::usage("resample counts must be at least 1"));
    }
    let tests = parse_tests(&a.tests)?;
    let columns = ColumnMap {
        y: a.y.clone(),
        x: a.x.clone(),
        controls: a.controls.clone(),
        fine: a.fine.clone(),
        gross: a.gross.clone(),
    };
    let data = read_dataset(&a.file, &columns)?;
    let s = data.structure().clone();
    let sided: Sided = a.sided.into();
    let convention: Cv1Convention = a.cv1_convention.into();

    let verdict = s.feasibility(a.alpha, sided);
    if tests.contains(&TestKind::Crse) {
        if let Feasibility::Warning { partitions, required } = &verdict {
            let _ = writeln!(
                err,
                "warning: r* = {} regroupings; level {} ({sided}) needs at least {required}",
                format_count(partitions),
                a.alpha
            );
            if !a.force {
                return Err(CliError {
                    code: EXIT_INFEASIBLE,
                    message: "too few regroupings for the requested level; use --force to run anyway".into(),
                });
            }
        }
    }

    let fit = ols_fit(&data, !a.no_fe).map_err(data_err)?;
    let battery = BatteryConfig {
        tests: tests.clone(),
        alpha: a.alpha,
        sided,
        rule: if a.conventional_p { PValueRule::Conventional } else { PValueRule::Strict },
        reps: a.reps,
        boot: a.boot,
        mc: a.mc,
        mode: a.mode.into(),
        cv1: convention,
        absorb_fine_fe: !a.no_fe,
        parallel: true,
        ..BatteryConfig::default()
    };
    let results = in_pool(a.threads, || run_battery(&data, &battery, a.seed))?;

    let mut text = String::new();
    for line in audit_header("test", a.seed, a) {
        text += &format!("# {line}\n");
    }
    text += &format!("observations: {}\n", data.n());
    text += &format!("fine clusters ({}): {}\n", a.fine, s.n_fine());
    text += &format!("gross clusters ({}): {}\n", a.gross, s.n_gross());
    text += &format!(
        "partitions r*: {} ({})\n",
        format_count(verdict.partitions()),
        if verdict.is_feasible() { "feasible" } else { "infeasible" }
    );
    text += &format!(
        "fine fixed effects: {}\n",
        if a.no_fe { "not included" } else { "absorbed" }
    );
    text += &format!("estimate ({}): {:.6}\n\n", a.x, fit.beta_target());
    text += &standard_errors(&fit, &data, convention)?;
    text += "\n";

    let mut failed = None;
    for (kind, result) in &results {
        match result {
            Ok(r) => {
                text += &format!(
                    "{:<5} statistic {:>14.6}  p {:>7.4}  {:<22} draws {} ({})\n",
                    kind.to_string(),
                    r.statistic,
                    r.p_value,
                    decision(r),
                    r.draws.len(),
                    r.method
                );
                if *kind == TestKind::Crse {
                    text += &format!("      tau_obs {:.6}\n", r.statistic);
                    if let Some(path) = &a.draws_out {
                        let mut dump = format!("# tau_obs: {}\ntau\n", r.statistic);
                        for d in &r.draws {
                            dump += &format!("{d}\n");
                        }
                        fs::write(path, dump).map_err(io_err(path))?;
                    }
                }
            }
            Err(e) => {
                text += &format!("{:<5} error: {e}\n", kind.to_string());
                failed.get_or_insert_with(|| e.clone());
            }
        }
    }
    write_out(out, &text)?;
    match failed {
        Some(e) if results.iter().all(|(_, r)| r.is_err()) => Err(data_err(e)),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct CellAudit<'a> {
    cell: u64,
    full_z: Option<usize>,
    scenario: &'a Scenario,
}

/// Scenarios to run, each with its full-scale iteration count when known.
type Cells = Vec<(Scenario, Option<usize>)>;

fn load_cells(a: &SimulateArgs) -> CliResult<(String, Cells)> {
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let scenario: Scenario =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        return Ok((scenario.name.clone(), vec![(scenario, None)]));
    }
    let name = a.preset.as_deref().unwrap_or("baseline");
    let preset = find_preset(name).ok_or_else(|| CliError::usage(format!("unknown preset '{name}'")))?;
    let cells = preset
        .cells
        .into_iter()
        .map(|c| {
            let mut s = c.scenario;
            if a.full_z {
                s.z = c.full_z;
            }
            (s, Some(c.full_z))
        })
        .collect();
    Ok((name.to_string(), cells))
}

fn apply_overrides(s: &mut Scenario, a: &SimulateArgs) -> CliResult<()> {
    if let Some(z) = a.z {
        s.z = z;
    }
    if let Some(rho) = a.rho_u {
        s.dgp = s.dgp.with_rho_u(rho);
    }
    if let Some(r) = a.reps {
        s.battery.reps = r;
    }
    if let Some(b) = a.boot {
        s.battery.boot = b;
        s.battery.mc = b;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    if let Some(tests) = &a.tests {
        s.battery.tests = parse_tests(tests)?;
    }
    if let Some(m) = a.model {
        s.dgp.model = match m {
            ModelArg::Ar1 => Model::Ar1,
            ModelArg::HiddenFactor => Model::HiddenFactor,
        };
    }
    if let Some(m) = a.mix_weights {
        s.dgp.mix = match m {
            MixArg::Half => MixWeights::Half,
            MixArg::UnitVariance => MixWeights::UnitVariance,
        };
    }
    if let Some(c) = a.cv1_convention {
        s.battery.cv1 = c.into();
    }
    s.validate().map_err(|e| CliError::usage(e.to_string()))
}

fn summary_table(reports: &[RejectionReport]) -> String {
    let mut text = format!(
        "{:<12} {:>4} {:>4} {:>4} {:>5} {:>6} {:>6} {:<5} {:>7} {:>8} {:>6}\n",
        "scenario", "cell", "g", "n_g", "n_gf", "rho_u", "z", "test", "rate", "mc_se", "degen"
    );
    for r in reports {
        let s = &r.scenario;
        for t in &r.rates {
            text += &format!(
                "{:<12} {:>4} {:>4} {:>4} {:>5} {:>6} {:>6} {:<5} {:>7.4} {:>8.4} {:>6}\n",
                s.name,
                r.cell,
                s.structure.n_gross,
                s.structure.fine_per_gross,
                s.structure.units_per_fine,
                s.dgp.rho_u_fine,
                t.z,
                t.test.to_string(),
                t.rate,
                t.mc_se,
                t.degenerate
            );
        }
    }
    text
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    if a.list_presets {
        let mut text = String::new();
        for p in scenario_presets() {
            text += &format!("{:<11} {:>2} cells  {}\n", p.name, p.cells.len(), p.description);
        }
        return write_out(out, &text);
    }
    let (name, mut cells) = load_cells(a)?;
    for (s, _) in cells.iter_mut() {
        apply_overrides(s, a)?;
    }
    let seed = cells.first().map_or(1, |c| c.0.seed);

    let mut header = vec![format!("reclust {VERSION} simulate {name}"), format!("seed: {seed}")];
    for (i, (s, full_z)) in cells.iter().enumerate() {
        let audit = CellAudit { cell: i as u64, full_z: *full_z, scenario: s };
        header.push(format!("config: {}", serde_json::to_string(&audit).unwrap_or_default()));
    }

    let keep = a.dump_pvalues.is_some();
    let mut reports = Vec::new();
    for (i, (s, _)) in cells.iter().enumerate() {
        let report = run_scenario(
            s,
            i as u64,
            RunOptions { threads: a.threads, keep_draws: keep },
        )
        .map_err(data_err)?;
        let _ = writeln!(err, "cell {i}: {} iterations in {:.2?}", s.z, report.runtime);
        reports.push(report);
    }

    if let Some(dir) = &a.dump_data {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (i, (s, _)) in cells.iter().enumerate() {
            let structure = s.structure.build().map_err(data_err)?;
            for it in 0..a.dump_count.min(s.z) as u64 {
                let data = iteration_data(s, &structure, i as u64, it).map_err(data_err)?;
                let path = dir.join(format!("{}-cell{i}-iter{it}.csv", s.name));
                let lines = vec![
                    format!("reclust {VERSION} simulated dataset"),
                    format!("seed: {} cell: {i} iteration: {it}", s.seed),
                    format!("test seed: {}", battery_seed(s.seed, i as u64, it)),
                ];
                write_dataset(&path, &data, &lines)?;
            }
        }
    }

    if let Some(path) = &a.dump_pvalues {
        let mut text: String = header.iter().map(|l| format!("# {l}\n")).collect();
        text += "cell,iteration,test,p_value,decision\n";
        for r in &reports {
            for t in &r.rates {
                let (ps, ds) = (t.p_values.as_deref().unwrap_or(&[]), t.decisions.as_deref().unwrap_or(&[]));
                for (it, (p, d)) in ps.iter().zip(ds).enumerate() {
                    let d = match d {
                        Some(true) => "reject",
                        Some(false) => "accept",
                        None => "degenerate",
                    };
                    text += &format!("{},{it},{},{p},{d}\n", r.cell, t.test);
                }
            }
        }
        fs::write(path, text).map_err(io_err(path))?;
    }

    match &a.out {
        Some(path) => {
            let file = fs::File::create(path).map_err(io_err(path))?;
            write_report_csv(file, &header, &reports).map_err(data_err)?;
            write_out(out, &summary_table(&reports))
        }
        None => write_report_csv(out, &header, &reports).map_err(data_err),
    }
}

/// Seed that reproduces, through `reclust test --seed`, the test battery of
/// iteration `iteration` in cell `cell`.
pub fn battery_seed(master: u64, cell: u64, iteration: u64) -> u64 {
    crate::rng::derive_seed(iteration_seed(master, cell, iteration), &[crate::rng::tag::BATTERY])
}
