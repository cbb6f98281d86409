//! Two-level nested cluster structure.
//!
//! Units are grouped into fine clusters, and fine clusters into gross
//! clusters. Indices are zero-based and dense; the original labels are kept
//! for reporting.

use std::collections::HashMap;
use std::fmt;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};

use crate::error::{Error, Result};
use crate::recluster::Sided;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterStructure {
    unit_to_fine: Vec<usize>,
    fine_to_gross: Vec<usize>,
    fine_sizes: Vec<usize>,
    gross_sizes: Vec<usize>,
    fine_labels: Vec<String>,
    gross_labels: Vec<String>,
}

impl ClusterStructure {
    /// Builds a structure from a unit→fine map and a fine→gross map.
    ///
    /// The number of fine clusters is `fine_to_gross.len()`; every one of
    /// them must own at least one unit. Gross labels may be any integers and
    /// are renumbered densely in increasing order.
    pub fn new(unit_to_fine: Vec<usize>, fine_to_gross: Vec<usize>) -> Result<Self> {
        let n_fine = fine_to_gross.len();
        let mut fine_sizes = vec![0usize; n_fine];
        for (unit, &f) in unit_to_fine.iter().enumerate() {
            if f >= n_fine {
                return Err(Error::UnknownFineCluster {
                    unit,
                    fine: f,
                    declared: n_fine,
                });
            }
            fine_sizes[f] += 1;
        }
        if let Some(f) = fine_sizes.iter().position(|&s| s == 0) {
            return Err(Error::EmptyCluster(f));
        }

        let mut distinct: Vec<usize> = fine_to_gross.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let dense: HashMap<usize, usize> =
            distinct.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let fine_to_gross: Vec<usize> = fine_to_gross.iter().map(|g| dense[g]).collect();

        let fine_labels = (0..n_fine).map(|f| f.to_string()).collect();
        let gross_labels = distinct.iter().map(|g| g.to_string()).collect();
        Self::assemble(unit_to_fine, fine_to_gross, fine_sizes, fine_labels, gross_labels)
    }

    /// Builds a structure from per-unit string labels, as read from a table.
    ///
    /// Labels are numbered in order of first appearance. A fine label seen
    /// with two different gross labels is a nesting violation.
    pub fn from_labels<S: AsRef<str>>(fine_ids: &[S], gross_ids: &[S]) -> Result<Self> {
        if fine_ids.len() != gross_ids.len() {
            return Err(Error::LengthMismatch {
                what: "gross cluster column",
                found: gross_ids.len(),
                expected: fine_ids.len(),
            });
        }
        let mut fine_index: HashMap<&str, usize> = HashMap::new();
        let mut gross_index: HashMap<&str, usize> = HashMap::new();
        let mut fine_labels: Vec<String> = Vec::new();
        let mut gross_labels: Vec<String> = Vec::new();
        let mut fine_to_gross: Vec<usize> = Vec::new();
        let mut fine_sizes = Vec::new();
        let mut unit_to_fine = Vec::with_capacity(fine_ids.len());

        for (fid, gid) in fine_ids.iter().zip(gross_ids) {
            let (fid, gid) = (fid.as_ref(), gid.as_ref());
            let g = *gross_index.entry(gid).or_insert_with(|| {
                gross_labels.push(gid.to_string());
                gross_labels.len() - 1
            });
            let f = match fine_index.get(fid) {
                Some(&f) => {
                    if fine_to_gross[f] != g {
                        return Err(Error::NotNested {
                            fine: fid.to_string(),
                            first: gross_labels[fine_to_gross[f]].clone(),
                            second: gid.to_string(),
                        });
                    }
                    f
                }
                None => {
                    fine_index.insert(fid, fine_labels.len());
                    fine_labels.push(fid.to_string());
                    fine_to_gross.push(g);
                    fine_sizes.push(0);
                    fine_labels.len() - 1
                }
            };
            fine_sizes[f] += 1;
            unit_to_fine.push(f);
        }
        Self::assemble(unit_to_fine, fine_to_gross, fine_sizes, fine_labels, gross_labels)
    }

    /// Contiguous layout used by the simulator: `sizes[g][j]` is the number
    /// of units in the `j`-th fine cluster of gross cluster `g`. Units are
    /// ordered by gross cluster, then fine cluster, then position.
    pub fn nested(sizes: &[Vec<usize>]) -> Result<Self> {
        let mut unit_to_fine = Vec::new();
        let mut fine_to_gross = Vec::new();
        for (g, fines) in sizes.iter().enumerate() {
            if fines.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "gross cluster {g} has no fine clusters"
                )));
            }
            for &units in fines {
                let f = fine_to_gross.len();
                fine_to_gross.push(g);
                unit_to_fine.extend(std::iter::repeat_n(f, units));
            }
        }
        Self::new(unit_to_fine, fine_to_gross)
    }

    /// One-level clustering: every unit is its own fine cluster.
    pub fn one_level(unit_to_gross: Vec<usize>) -> Result<Self> {
        let n = unit_to_gross.len();
        Self::new((0..n).collect(), unit_to_gross)
    }

    fn assemble(
        unit_to_fine: Vec<usize>,
        fine_to_gross: Vec<usize>,
        fine_sizes: Vec<usize>,
        fine_labels: Vec<String>,
        gross_labels: Vec<String>,
    ) -> Result<Self> {
        let mut gross_sizes = vec![0usize; gross_labels.len()];
        for &g in &fine_to_gross {
            if g >= gross_sizes.len() {
                return Err(Error::NonContiguousLabels);
            }
            gross_sizes[g] += 1;
        }
        if gross_sizes.contains(&0) {
            return Err(Error::NonContiguousLabels);
        }
        let s = Self {
            unit_to_fine,
            fine_to_gross,
            fine_sizes,
            gross_sizes,
            fine_labels,
            gross_labels,
        };
        debug_assert_eq!(s.fine_sizes.iter().sum::<usize>(), s.n());
        debug_assert_eq!(s.gross_sizes.iter().sum::<usize>(), s.n_fine());
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.unit_to_fine.len()
    }

    pub fn n_fine(&self) -> usize {
        self.fine_to_gross.len()
    }

    pub fn n_gross(&self) -> usize {
        self.gross_sizes.len()
    }

    pub fn unit_to_fine(&self) -> &[usize] {
        &self.unit_to_fine
    }

    pub fn fine_to_gross(&self) -> &[usize] {
        &self.fine_to_gross
    }

    /// Units per fine cluster (`n_f`).
    pub fn fine_sizes(&self) -> &[usize] {
        &self.fine_sizes
    }

    /// Fine clusters per gross cluster (`n_g`).
    pub fn gross_sizes(&self) -> &[usize] {
        &self.gross_sizes
    }

    pub fn fine_labels(&self) -> &[String] {
        &self.fine_labels
    }

    pub fn gross_labels(&self) -> &[String] {
        &self.gross_labels
    }

    /// Gross cluster of each unit.
    pub fn unit_to_gross(&self) -> Vec<usize> {
        self.unit_to_fine
            .iter()
            .map(|&f| self.fine_to_gross[f])
            .collect()
    }

    /// Unit indices of each fine cluster, in increasing unit order.
    pub fn fine_members(&self) -> Vec<Vec<usize>> {
        let mut members: Vec<Vec<usize>> =
            self.fine_sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (i, &f) in self.unit_to_fine.iter().enumerate() {
            members[f].push(i);
        }
        members
    }

    /// Fine cluster indices of each gross cluster, in increasing order.
    pub fn gross_members(&self) -> Vec<Vec<usize>> {
        let mut members: Vec<Vec<usize>> =
            self.gross_sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (f, &g) in self.fine_to_gross.iter().enumerate() {
            members[g].push(f);
        }
        members
    }

    /// Unit indices of each gross cluster, in increasing unit order.
    pub fn gross_units(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.n_gross()];
        for (i, &f) in self.unit_to_fine.iter().enumerate() {
            members[self.fine_to_gross[f]].push(i);
        }
        members
    }

    /// The sub-structure of gross cluster `g`: its unit indices in the
    /// parent, and a one-gross structure over them.
    pub fn restrict_to_gross(&self, g: usize) -> Result<(Vec<usize>, ClusterStructure)> {
        if g >= self.n_gross() {
            return Err(Error::InvalidParameter(format!("no gross cluster {g}")));
        }
        let mut local_fine: HashMap<usize, usize> = HashMap::new();
        let mut fine_labels: Vec<String> = Vec::new();
        let mut units = Vec::new();
        let mut unit_to_fine = Vec::new();
        for (i, &f) in self.unit_to_fine.iter().enumerate() {
            if self.fine_to_gross[f] != g {
                continue;
            }
            let lf = *local_fine.entry(f).or_insert_with(|| {
                fine_labels.push(self.fine_labels[f].clone());
                fine_labels.len() - 1
            });
            units.push(i);
            unit_to_fine.push(lf);
        }
        let n_fine = fine_labels.len();
        let mut fine_sizes = vec![0; n_fine];
        for &f in &unit_to_fine {
            fine_sizes[f] += 1;
        }
        let sub = Self::assemble(
            unit_to_fine,
            vec![0; n_fine],
            fine_sizes,
            fine_labels,
            vec![self.gross_labels[g].clone()],
        )?;
        Ok((units, sub))
    }

    /// The structure obtained by relabeling fine clusters: new fine cluster
    /// `j` is old fine cluster `order[j]`, and units are reordered so that
    /// each fine block keeps its internal order.
    pub fn permute_fine(&self, order: &[usize]) -> Result<(Vec<usize>, ClusterStructure)> {
        if order.len() != self.n_fine() {
            return Err(Error::LengthMismatch {
                what: "fine permutation",
                found: order.len(),
                expected: self.n_fine(),
            });
        }
        let members = self.fine_members();
        let mut units = Vec::with_capacity(self.n());
        let mut unit_to_fine = Vec::with_capacity(self.n());
        let mut fine_to_gross = Vec::with_capacity(self.n_fine());
        for (new_f, &old_f) in order.iter().enumerate() {
            units.extend_from_slice(&members[old_f]);
            unit_to_fine.extend(std::iter::repeat_n(new_f, members[old_f].len()));
            fine_to_gross.push(self.fine_to_gross[old_f]);
        }
        let s = Self::new(unit_to_fine, fine_to_gross)?;
        Ok((units, s))
    }

    /// Checks every invariant of an existing structure, returning a fresh
    /// normalized copy.
    pub fn validate(&self) -> Result<ClusterStructure> {
        let s = Self::new(self.unit_to_fine.clone(), self.fine_to_gross.clone())?;
        Ok(Self {
            fine_labels: self.fine_labels.clone(),
            gross_labels: if s.gross_labels.len() == self.gross_labels.len() {
                self.gross_labels.clone()
            } else {
                s.gross_labels.clone()
            },
            ..s
        })
    }

    /// Number of ways to divide the fine clusters into gross clusters of
    /// the observed composition, by the closed form `f̄! / (ḡ! Π n_g!)`.
    pub fn count_partitions(&self) -> BigRational {
        count_partitions(&self.gross_sizes)
    }

    /// Number of distinct regroupings actually reachable by permutation.
    pub fn count_distinct_regroupings(&self) -> BigUint {
        count_distinct_regroupings(&self.gross_sizes)
    }

    pub fn feasibility(&self, alpha: f64, sided: Sided) -> Feasibility {
        feasibility(&self.gross_sizes, alpha, sided)
    }
}

impl fmt::Display for ClusterStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} fine={} gross={}",
            self.n(),
            self.n_fine(),
            self.n_gross()
        )
    }
}

fn factorial(k: usize) -> BigUint {
    (1..=k as u64).fold(BigUint::one(), |acc, x| acc * x)
}

/// `f̄! / (ḡ! Π n_g!)` evaluated exactly for gross sizes `n_g`.
///
/// The value is an integer whenever all gross clusters have equal size;
/// with unequal sizes it may be fractional, and is returned as such.
pub fn count_partitions(gross_sizes: &[usize]) -> BigRational {
    let f_bar: usize = gross_sizes.iter().sum();
    let denom = gross_sizes
        .iter()
        .fold(factorial(gross_sizes.len()), |acc, &k| acc * factorial(k));
    BigRational::new(factorial(f_bar).into(), denom.into())
}

/// Distinct set partitions of the fine clusters into unlabeled blocks with
/// the given sizes: `f̄! / (Π n_g! · Π_m c_m!)` where `c_m` counts the gross
/// clusters of size `m`. Equals [`count_partitions`] when all sizes agree.
pub fn count_distinct_regroupings(gross_sizes: &[usize]) -> BigUint {
    let f_bar: usize = gross_sizes.iter().sum();
    let mut multiplicity: HashMap<usize, usize> = HashMap::new();
    for &k in gross_sizes {
        *multiplicity.entry(k).or_default() += 1;
    }
    let denom = gross_sizes
        .iter()
        .fold(BigUint::one(), |acc, &k| acc * factorial(k));
    let denom = multiplicity
        .values()
        .fold(denom, |acc, &c| acc * factorial(c));
    factorial(f_bar) / denom
}

/// Whether the reclustering p-value can resolve level `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    Feasible { partitions: BigRational },
    Warning { partitions: BigRational, required: f64 },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible { .. })
    }

    pub fn partitions(&self) -> &BigRational {
        match self {
            Feasibility::Feasible { partitions } | Feasibility::Warning { partitions, .. } => {
                partitions
            }
        }
    }
}

/// Feasible iff `r̄* ≥ 2/α` (two-sided) or `r̄* ≥ 1/α` (one-sided).
pub fn feasibility(gross_sizes: &[usize], alpha: f64, sided: Sided) -> Feasibility {
    let partitions = count_partitions(gross_sizes);
    let tails = match sided {
        Sided::Two => 2,
        Sided::Upper | Sided::Lower => 1,
    };
    let feasible = match BigRational::from_float(alpha) {
        Some(a) if alpha > 0.0 => &partitions * a >= BigRational::from_integer(tails.into()),
        _ => false,
    };
    if feasible {
        Feasibility::Feasible { partitions }
    } else {
        Feasibility::Warning {
            partitions,
            required: tails as f64 / alpha,
        }
    }
}

/// A fine→gross assignment with the same composition as a structure's
/// observed one: gross cluster `g` receives exactly `n_g` fine clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrossMap {
    gross_of_fine: Vec<usize>,
    n_gross: usize,
}

impl GrossMap {
    pub fn observed(structure: &ClusterStructure) -> Self {
        Self {
            gross_of_fine: structure.fine_to_gross().to_vec(),
            n_gross: structure.n_gross(),
        }
    }

    /// Checks that `gross_of_fine` is a regrouping of `structure`'s fine
    /// clusters preserving every gross cluster's size.
    pub fn regrouping(structure: &ClusterStructure, gross_of_fine: Vec<usize>) -> Result<Self> {
        if gross_of_fine.len() != structure.n_fine() {
            return Err(Error::InvalidGrossMap);
        }
        let mut counts = vec![0usize; structure.n_gross()];
        for &g in &gross_of_fine {
            match counts.get_mut(g) {
                Some(c) => *c += 1,
                None => return Err(Error::InvalidGrossMap),
            }
        }
        if counts != structure.gross_sizes() {
            return Err(Error::InvalidGrossMap);
        }
        Ok(Self {
            gross_of_fine,
            n_gross: structure.n_gross(),
        })
    }

    pub(crate) fn from_raw(gross_of_fine: Vec<usize>, n_gross: usize) -> Self {
        Self {
            gross_of_fine,
            n_gross,
        }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.gross_of_fine
    }

    pub fn n_gross(&self) -> usize {
        self.n_gross
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.gross_of_fine
    }
}

/// Formats an exact count, as an integer when it is one.
pub fn format_count(count: &BigRational) -> String {
    if count.is_integer() {
        count.to_integer().to_string()
    } else {
        format!(
            "{}/{} (~{:.3})",
            count.numer(),
            count.denom(),
            count.to_f64().unwrap_or(f64::NAN)
        )
    }
}
