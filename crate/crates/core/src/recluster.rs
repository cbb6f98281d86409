//! Reclustering permutation test.
//!
//! Fine clusters are randomly regrouped into gross clusters of the observed
//! composition; a gross-cluster-sensitive statistic is recomputed for each
//! regrouping without refitting the model, and the observed value is
//! compared against the resulting reference distribution:
//!
//! ```text
//! p = (1/R) Σ_r I{ τ(D, g^(r)) > τ(D, g^obs) }
//! ```

use std::fmt;

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster_model::{ClusterStructure, GrossMap};
use crate::error::{Error, Result};
use crate::regression::RegressionFit;
use crate::rng::stream_rng;
use crate::variance::{CrseStatistic, Cv1Convention};

/// Default number of reclustering rounds.
pub const DEFAULT_REPS: usize = 1000;
/// Largest number of distinct regroupings the exhaustive test will visit.
pub const DEFAULT_EXHAUSTIVE_CAP: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sided {
    /// Reject when `p < α/2` or `p ≥ 1 - α/2`.
    #[default]
    Two,
    /// Reject when `p < α`.
    Upper,
    /// Reject when `p ≥ 1 - α`.
    Lower,
}

impl Sided {
    pub fn rejects(self, p: f64, alpha: f64) -> bool {
        match self {
            Sided::Two => p < alpha / 2.0 || p >= 1.0 - alpha / 2.0,
            Sided::Upper => p < alpha,
            Sided::Lower => p >= 1.0 - alpha,
        }
    }
}

impl fmt::Display for Sided {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sided::Two => "two-sided",
            Sided::Upper => "upper",
            Sided::Lower => "lower",
        })
    }
}

/// How draws are turned into a p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PValueRule {
    /// Share of draws strictly above the observed statistic.
    #[default]
    Strict,
    /// `(1 + #{τ_r ≥ τ_obs}) / (R + 1)`: the observed value joins the
    /// reference set.
    Conventional,
}

impl PValueRule {
    pub fn p_value(self, observed: f64, draws: &[f64]) -> f64 {
        match self {
            PValueRule::Strict => {
                let above = draws.iter().filter(|&&t| t > observed).count();
                above as f64 / draws.len() as f64
            }
            PValueRule::Conventional => {
                let at_least = draws.iter().filter(|&&t| t >= observed).count();
                (1 + at_least) as f64 / (draws.len() + 1) as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    Reclustering,
    ReclusteringExhaustive,
    WildClusterBootstrap,
    ParametricMonteCarlo,
    SignRandomization,
}

impl fmt::Display for TestMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestMethod::Reclustering => "reclustering",
            TestMethod::ReclusteringExhaustive => "reclustering-exhaustive",
            TestMethod::WildClusterBootstrap => "wild-cluster-bootstrap",
            TestMethod::ParametricMonteCarlo => "parametric-mc",
            TestMethod::SignRandomization => "sign-randomization",
        })
    }
}

/// Outcome of a resampling test.
#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub method: TestMethod,
    pub statistic: f64,
    pub draws: Vec<f64>,
    pub p_value: f64,
    /// `None` when the statistic is degenerate and no decision is made.
    pub rejected: Option<bool>,
    /// Every draw equals the observed statistic.
    pub degenerate: bool,
    pub alpha: f64,
    pub sided: Sided,
    pub rule: PValueRule,
    pub seed: u64,
}

impl TestResult {
    pub fn from_draws(
        method: TestMethod,
        statistic: f64,
        draws: Vec<f64>,
        alpha: f64,
        sided: Sided,
        rule: PValueRule,
        seed: u64,
    ) -> Self {
        let degenerate = draws.iter().all(|&t| t == statistic);
        let p_value = rule.p_value(statistic, &draws);
        let rejected = (!degenerate).then(|| sided.rejects(p_value, alpha));
        Self {
            method,
            statistic,
            draws,
            p_value,
            rejected,
            degenerate,
            alpha,
            sided,
            rule,
            seed,
        }
    }

    /// The p-value recomputed from the stored draws.
    pub fn recompute_p_value(&self) -> f64 {
        self.rule.p_value(self.statistic, &self.draws)
    }

    /// Rejections count as 1, everything else (including withheld) as 0.
    pub fn rejects(&self) -> bool {
        self.rejected == Some(true)
    }
}

/// A statistic of the data evaluated under a fine→gross assignment.
pub trait GrossStatistic: Sync {
    fn evaluate(&self, gross_of_fine: &[usize]) -> f64;
}

impl GrossStatistic for CrseStatistic {
    fn evaluate(&self, gross_of_fine: &[usize]) -> f64 {
        CrseStatistic::evaluate(self, gross_of_fine)
    }
}

impl<F> GrossStatistic for F
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    fn evaluate(&self, gross_of_fine: &[usize]) -> f64 {
        self(gross_of_fine)
    }
}

/// One regrouping: `permutation[f]` is the position fine cluster `f` takes,
/// and `gross_map[f] = g[permutation[f]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recluster {
    pub permutation: Vec<usize>,
    pub gross_map: GrossMap,
}

impl Recluster {
    pub fn from_permutation(structure: &ClusterStructure, permutation: Vec<usize>) -> Result<Self> {
        let observed = structure.fine_to_gross();
        let mut seen = vec![false; observed.len()];
        if permutation.len() != observed.len()
            || permutation
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidParameter("not a permutation of fine clusters".into()));
        }
        let map = permutation.iter().map(|&p| observed[p]).collect();
        Ok(Self {
            permutation,
            gross_map: GrossMap::from_raw(map, structure.n_gross()),
        })
    }
}

fn require_two_gross(structure: &ClusterStructure) -> Result<()> {
    if structure.n_gross() < 2 {
        return Err(Error::TooFewClusters {
            level: "gross",
            required: 2,
            found: structure.n_gross(),
        });
    }
    Ok(())
}

/// Uniformly random regrouping of the fine clusters.
pub fn draw_recluster<R: Rng + ?Sized>(structure: &ClusterStructure, rng: &mut R) -> Result<Recluster> {
    require_two_gross(structure)?;
    let mut permutation: Vec<usize> = (0..structure.n_fine()).collect();
    permutation.shuffle(rng);
    Recluster::from_permutation(structure, permutation)
}

/// Visits every distinct partition of the fine clusters into gross clusters
/// of the observed sizes exactly once. Gross clusters of equal size are
/// interchangeable, so among them only the labeling in which they are
/// filled in order of their smallest fine cluster is visited.
pub fn for_each_regrouping(structure: &ClusterStructure, mut visit: impl FnMut(&[usize])) {
    let sizes = structure.gross_sizes();
    let mut remaining = sizes.to_vec();
    let mut assignment = vec![0usize; structure.n_fine()];

    fn place(
        f: usize,
        sizes: &[usize],
        remaining: &mut [usize],
        assignment: &mut [usize],
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if f == assignment.len() {
            visit(assignment);
            return;
        }
        for g in 0..sizes.len() {
            if remaining[g] == 0 {
                continue;
            }
            let empty = remaining[g] == sizes[g];
            if empty && (0..g).any(|h| sizes[h] == sizes[g] && remaining[h] == sizes[h]) {
                continue;
            }
            assignment[f] = g;
            remaining[g] -= 1;
            place(f + 1, sizes, remaining, assignment, visit);
            remaining[g] += 1;
        }
    }

    place(0, sizes, &mut remaining, &mut assignment, &mut visit);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnumerationMode {
    /// Exhaustive when the distinct regroupings number at most `reps`.
    #[default]
    Auto,
    MonteCarlo,
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReclusterConfig {
    pub reps: usize,
    pub alpha: f64,
    pub sided: Sided,
    pub rule: PValueRule,
    pub seed: u64,
    pub mode: EnumerationMode,
    pub exhaustive_cap: u64,
    /// Evaluate draws on the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

impl Default for ReclusterConfig {
    fn default() -> Self {
        Self {
            reps: DEFAULT_REPS,
            alpha: 0.05,
            sided: Sided::Two,
            rule: PValueRule::Strict,
            seed: 0,
            mode: EnumerationMode::Auto,
            exhaustive_cap: DEFAULT_EXHAUSTIVE_CAP,
            parallel: false,
        }
    }
}

/// Monte Carlo reclustering test with `config.reps` iid regroupings. Round
/// `r` draws from substream `r` of `config.seed`.
pub fn permutation_test(
    structure: &ClusterStructure,
    statistic: &dyn GrossStatistic,
    config: &ReclusterConfig,
) -> Result<TestResult> {
    require_two_gross(structure)?;
    if config.reps == 0 {
        return Err(Error::InvalidParameter("reps must be at least 1".into()));
    }
    let observed = statistic.evaluate(structure.fine_to_gross());
    let one_round = |r: usize| -> f64 {
        let mut rng = stream_rng(config.seed, r as u64);
        let mut perm: Vec<usize> = (0..structure.n_fine()).collect();
        perm.shuffle(&mut rng);
        let obs = structure.fine_to_gross();
        let map: Vec<usize> = perm.iter().map(|&p| obs[p]).collect();
        statistic.evaluate(&map)
    };
    let draws: Vec<f64> = if config.parallel {
        (0..config.reps).into_par_iter().map(one_round).collect()
    } else {
        (0..config.reps).map(one_round).collect()
    };
    Ok(TestResult::from_draws(
        TestMethod::Reclustering,
        observed,
        draws,
        config.alpha,
        config.sided,
        config.rule,
        config.seed,
    ))
}

/// Exact reclustering test over all distinct regroupings.
pub fn exhaustive_test(
    structure: &ClusterStructure,
    statistic: &dyn GrossStatistic,
    config: &ReclusterConfig,
) -> Result<TestResult> {
    require_two_gross(structure)?;
    let count = structure.count_distinct_regroupings();
    if count > BigUint::from(config.exhaustive_cap) {
        return Err(Error::EnumerationCap {
            count: count.to_string(),
            cap: config.exhaustive_cap,
        });
    }
    let observed = statistic.evaluate(structure.fine_to_gross());
    let mut draws = Vec::with_capacity(count.to_usize().unwrap_or(0));
    for_each_regrouping(structure, |map| draws.push(statistic.evaluate(map)));
    Ok(TestResult::from_draws(
        TestMethod::ReclusteringExhaustive,
        observed,
        draws,
        config.alpha,
        config.sided,
        config.rule,
        config.seed,
    ))
}

/// Reclustering test with the enumeration mode chosen by `config.mode`.
pub fn recluster_test(
    structure: &ClusterStructure,
    statistic: &dyn GrossStatistic,
    config: &ReclusterConfig,
) -> Result<TestResult> {
    let exhaustive = match config.mode {
        EnumerationMode::MonteCarlo => false,
        EnumerationMode::Exhaustive => true,
        EnumerationMode::Auto => {
            let count = structure.count_distinct_regroupings();
            count <= BigUint::from(config.reps) && count <= BigUint::from(config.exhaustive_cap)
        }
    };
    if exhaustive {
        exhaustive_test(structure, statistic, config)
    } else {
        permutation_test(structure, statistic, config)
    }
}

/// The reclustering test with the built-in `τ^CRSE` statistic.
pub fn crse_test(
    structure: &ClusterStructure,
    fit: &RegressionFit,
    convention: Cv1Convention,
    config: &ReclusterConfig,
) -> Result<TestResult> {
    let statistic = CrseStatistic::new(fit, structure, convention)?;
    recluster_test(structure, &statistic, config)
}
