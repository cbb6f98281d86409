//! Scalar sandwich variance for the target coefficient.

use std::fmt;

use crate::cluster_model::{ClusterStructure, GrossMap};
use crate::error::{Error, Result};
use crate::regression::{fine_sums, gross_sums, RegressionFit};

/// How the CV1 factor `c = G(n-1)/((G-1)n)` enters `Σ̂^CR`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cv1Convention {
    /// `c` multiplies each cluster sum before squaring, so `Σ̂ = c² Σ S_g²`.
    #[default]
    Squared,
    /// `Σ̂ = c Σ S_g²`, as in most statistical software.
    Textbook,
}

impl Cv1Convention {
    fn apply(self, c: f64) -> f64 {
        match self {
            Cv1Convention::Squared => c * c,
            Cv1Convention::Textbook => c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateLevel {
    Naive,
    Fine,
    Gross,
}

impl fmt::Display for EstimateLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimateLevel::Naive => "naive",
            EstimateLevel::Fine => "fine",
            EstimateLevel::Gross => "gross",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SandwichEstimate {
    pub sigma_hat: f64,
    pub variance: f64,
    pub se: f64,
    pub level: EstimateLevel,
}

impl SandwichEstimate {
    fn new(sigma_hat: f64, xtx_inv_kk: f64, level: EstimateLevel) -> Self {
        let variance = xtx_inv_kk * sigma_hat * xtx_inv_kk;
        Self {
            sigma_hat,
            variance,
            se: variance.sqrt(),
            level,
        }
    }
}

/// `Σ_i ŝ_i²`.
pub fn sigma_naive(scores: &[f64]) -> f64 {
    scores.iter().map(|s| s * s).sum()
}

/// `G(n-1)/((G-1)n)` for `G` clusters over `n` units.
pub fn cv1_factor(n_clusters: usize, n: usize) -> Result<f64> {
    if n_clusters < 2 {
        return Err(Error::TooFewClusters {
            level: "clustering",
            required: 2,
            found: n_clusters,
        });
    }
    let (g, n) = (n_clusters as f64, n as f64);
    Ok(g * (n - 1.0) / ((g - 1.0) * n))
}

/// `Σ_g S_g²`, accumulated over clusters in order of their first member
/// fine cluster, so that two labelings of one partition give bit-identical
/// results.
pub(crate) fn canonical_square_sum(sums: &[f64], gross_of_fine: &[usize]) -> f64 {
    let mut seen = vec![false; sums.len()];
    let mut total = 0.0;
    for &g in gross_of_fine {
        if !seen[g] {
            seen[g] = true;
            total += sums[g] * sums[g];
        }
    }
    total
}

/// `Σ_g (c S_g)²` (or `c Σ_g S_g²` for the textbook convention), with
/// clusters taken at `level`. `map` overrides the observed gross map.
pub fn sigma_cr(
    scores: &[f64],
    structure: &ClusterStructure,
    level: EstimateLevel,
    map: Option<&GrossMap>,
    convention: Cv1Convention,
) -> Result<f64> {
    if scores.len() != structure.n() {
        return Err(Error::LengthMismatch {
            what: "scores",
            found: scores.len(),
            expected: structure.n(),
        });
    }
    let fine = fine_sums(scores, structure);
    let n = structure.n();
    match level {
        EstimateLevel::Naive => Ok(sigma_naive(scores)),
        EstimateLevel::Fine => {
            let c = cv1_factor(structure.n_fine(), n)?;
            Ok(convention.apply(c) * sigma_naive(&fine))
        }
        EstimateLevel::Gross => {
            let observed = GrossMap::observed(structure);
            let map = match map {
                Some(m) => {
                    GrossMap::regrouping(structure, m.as_slice().to_vec())?;
                    m
                }
                None => &observed,
            };
            let c = cv1_factor(structure.n_gross(), n)?;
            let gross = gross_sums(&fine, map);
            Ok(convention.apply(c) * canonical_square_sum(&gross, map.as_slice()))
        }
    }
}

/// Sandwich estimate of the target coefficient's variance at `level`.
pub fn sandwich(
    fit: &RegressionFit,
    structure: &ClusterStructure,
    level: EstimateLevel,
    convention: Cv1Convention,
) -> Result<SandwichEstimate> {
    let sigma = sigma_cr(fit.scores(), structure, level, None, convention)?;
    Ok(SandwichEstimate::new(sigma, fit.xtx_inv_kk(), level))
}

/// `τ^CRSE = sqrt(V̂^CR_kk)` with gross clusters given by `map`.
pub fn crse_statistic(
    fit: &RegressionFit,
    structure: &ClusterStructure,
    map: &GrossMap,
    convention: Cv1Convention,
) -> Result<f64> {
    let sigma = sigma_cr(fit.scores(), structure, EstimateLevel::Gross, Some(map), convention)?;
    Ok(SandwichEstimate::new(sigma, fit.xtx_inv_kk(), EstimateLevel::Gross).se)
}

/// `τ^CRSE` prepared for repeated evaluation under many gross maps: the
/// model is fitted once and only the aggregation changes.
#[derive(Debug, Clone)]
pub struct CrseStatistic {
    fine_sums: Vec<f64>,
    scale: f64,
    n_gross: usize,
}

impl CrseStatistic {
    pub fn new(
        fit: &RegressionFit,
        structure: &ClusterStructure,
        convention: Cv1Convention,
    ) -> Result<Self> {
        let c = cv1_factor(structure.n_gross(), structure.n())?;
        let xtx = fit.xtx_inv_kk();
        Ok(Self {
            fine_sums: fine_sums(fit.scores(), structure),
            scale: xtx * xtx * convention.apply(c),
            n_gross: structure.n_gross(),
        })
    }

    pub fn evaluate(&self, gross_of_fine: &[usize]) -> f64 {
        let mut sums = vec![0.0; self.n_gross];
        for (s, &g) in self.fine_sums.iter().zip(gross_of_fine) {
            sums[g] += s;
        }
        (self.scale * canonical_square_sum(&sums, gross_of_fine)).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::{ols_fit, Dataset};

    #[test]
    fn naive_sums_of_squares() {
        assert_eq!(sigma_naive(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(sigma_naive(&[-1.0, 1.0]), 2.0);
        let v = [0.3, -1.7, 2.2, 0.05];
        let mut direct = 0.0;
        for s in v {
            direct += s * s;
        }
        assert_eq!(sigma_naive(&v), direct);
    }

    #[test]
    fn cv1_two_clusters_plug_in() {
        // n = 4 units, fine sums (3, 7) as two gross clusters
        let s = ClusterStructure::new(vec![0, 0, 1, 1], vec![0, 1]).unwrap();
        let scores = [1.0, 2.0, 3.0, 4.0];
        let v = sigma_cr(&scores, &s, EstimateLevel::Gross, None, Cv1Convention::Squared).unwrap();
        assert!((v - 130.5).abs() < 1e-12);
        let t = sigma_cr(&scores, &s, EstimateLevel::Gross, None, Cv1Convention::Textbook).unwrap();
        assert!((t - 87.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_clusters_reduce_to_naive() {
        let s = ClusterStructure::one_level(vec![0, 1, 2, 3, 4]).unwrap();
        let scores = [0.4, -1.1, 0.9, 2.0, -0.3];
        let v = sigma_cr(&scores, &s, EstimateLevel::Gross, None, Cv1Convention::Squared).unwrap();
        assert!((v - sigma_naive(&scores)).abs() < 1e-12);
    }

    #[test]
    fn zero_cluster_sums_give_zero() {
        let s = ClusterStructure::new(vec![0, 0, 1, 1], vec![0, 1]).unwrap();
        let v = sigma_cr(&[1.0, -1.0, 2.0, -2.0], &s, EstimateLevel::Gross, None, Cv1Convention::Squared)
            .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn single_cluster_is_an_error() {
        let s = ClusterStructure::new(vec![0, 0, 1, 1], vec![0, 0]).unwrap();
        assert!(matches!(
            sigma_cr(&[1.0; 4], &s, EstimateLevel::Gross, None, Cv1Convention::Squared),
            Err(Error::TooFewClusters { found: 1, .. })
        ));
    }

    #[test]
    fn zero_residuals_zero_statistic() {
        let s = ClusterStructure::nested(&[vec![1, 1], vec![1, 1]]).unwrap();
        let x = vec![1.0, 2.0, -1.0, 0.5];
        let y = x.iter().map(|v| 3.0 * v).collect();
        let d = Dataset::simple(y, x, s.clone()).unwrap();
        let fit = ols_fit(&d, false).unwrap();
        let tau = crse_statistic(&fit, &s, &GrossMap::observed(&s), Cv1Convention::Squared).unwrap();
        assert!(tau.abs() < 1e-12);
    }

    #[test]
    fn one_fine_per_gross_matches_fine_level() {
        let s = ClusterStructure::new(vec![0, 0, 1, 1, 2, 2], vec![0, 1, 2]).unwrap();
        let d = Dataset::simple(
            vec![1.0, 2.5, -0.3, 0.7, 1.9, -1.2],
            vec![0.5, 1.5, -1.0, 0.2, 2.0, -0.6],
            s.clone(),
        )
        .unwrap();
        let fit = ols_fit(&d, false).unwrap();
        let tau = crse_statistic(&fit, &s, &GrossMap::observed(&s), Cv1Convention::Squared).unwrap();
        let fine = sandwich(&fit, &s, EstimateLevel::Fine, Cv1Convention::Squared).unwrap();
        assert!((tau - fine.se).abs() < 1e-12);
    }

    #[test]
    fn prepared_statistic_agrees_with_direct() {
        let s = ClusterStructure::nested(&[vec![2, 1], vec![1, 2], vec![2, 2]]).unwrap();
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..10).map(|i| (i as f64 * 1.3).cos()).collect();
        let d = Dataset::simple(y, x, s.clone()).unwrap();
        let fit = ols_fit(&d, false).unwrap();
        let prepared = CrseStatistic::new(&fit, &s, Cv1Convention::Squared).unwrap();
        let map = GrossMap::regrouping(&s, vec![2, 0, 1, 2, 0, 1]).unwrap();
        let direct = crse_statistic(&fit, &s, &map, Cv1Convention::Squared).unwrap();
        assert!((prepared.evaluate(map.as_slice()) - direct).abs() < 1e-12);
    }

    #[test]
    fn relabeling_gross_is_bit_identical() {
        let sums = [0.1, 0.7, -3.3];
        let a = canonical_square_sum(&sums, &[0, 1, 2, 0]);
        let b = canonical_square_sum(&[-3.3, 0.1, 0.7], &[1, 2, 0, 1]);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
