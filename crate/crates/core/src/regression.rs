//! Least squares with absorbed fine-cluster fixed effects, and per-unit
//! scores for a single target coefficient.

use nalgebra::{DMatrix, DVector};

use crate::cluster_model::{ClusterStructure, GrossMap};
use crate::error::{Error, Result};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    regressors: DMatrix<f64>,
    names: Vec<String>,
    target: usize,
    structure: ClusterStructure,
}

impl Dataset {
    /// `regressors` is `n × p`, column `target` holds the regressor of
    /// interest. Fixed effects are not included here; they are absorbed at
    /// fit time.
    pub fn new(
        y: Vec<f64>,
        regressors: DMatrix<f64>,
        names: Vec<String>,
        target: usize,
        structure: ClusterStructure,
    ) -> Result<Self> {
        let n = structure.n();
        if y.len() != n {
            return Err(Error::LengthMismatch {
                what: "outcome",
                found: y.len(),
                expected: n,
            });
        }
        if regressors.nrows() != n {
            return Err(Error::LengthMismatch {
                what: "regressor rows",
                found: regressors.nrows(),
                expected: n,
            });
        }
        if names.len() != regressors.ncols() {
            return Err(Error::LengthMismatch {
                what: "regressor names",
                found: names.len(),
                expected: regressors.ncols(),
            });
        }
        if target >= regressors.ncols() {
            return Err(Error::InvalidParameter(format!(
                "target column {target} out of range"
            )));
        }
        if y.iter().chain(regressors.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite value in data".into()));
        }
        Ok(Self {
            y,
            regressors,
            names,
            target,
            structure,
        })
    }

    /// Single-regressor dataset.
    pub fn simple(y: Vec<f64>, x: Vec<f64>, structure: ClusterStructure) -> Result<Self> {
        let n = x.len();
        Self::new(
            y,
            DMatrix::from_vec(n, 1, x),
            vec!["x".into()],
            0,
            structure,
        )
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn regressors(&self) -> &DMatrix<f64> {
        &self.regressors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn target_name(&self) -> &str {
        &self.names[self.target]
    }

    pub fn structure(&self) -> &ClusterStructure {
        &self.structure
    }

    /// Same design, new outcome.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(
            y,
            self.regressors.clone(),
            self.names.clone(),
            self.target,
            self.structure.clone(),
        )
    }

    /// Rows `units` over `structure`.
    pub fn select_rows(&self, units: &[usize], structure: ClusterStructure) -> Result<Self> {
        let y = units.iter().map(|&i| self.y[i]).collect();
        let regressors = self.regressors.select_rows(units);
        Self::new(y, regressors, self.names.clone(), self.target, structure)
    }

    /// The rows of one gross cluster, with its own fine structure.
    pub fn gross_subset(&self, g: usize) -> Result<Self> {
        let (units, sub) = self.structure.restrict_to_gross(g)?;
        self.select_rows(&units, sub)
    }

    /// Relabels fine clusters together with their data rows (see
    /// [`ClusterStructure::permute_fine`]).
    pub fn permute_fine(&self, order: &[usize]) -> Result<Self> {
        let (units, structure) = self.structure.permute_fine(order)?;
        self.select_rows(&units, structure)
    }

    /// The data with explicit fine-cluster dummy columns appended.
    pub fn with_fine_dummies(&self) -> Result<Self> {
        let n = self.n();
        let p = self.regressors.ncols();
        let f_bar = self.structure.n_fine();
        let mut x = self.regressors.clone().resize_horizontally(p + f_bar, 0.0);
        for (i, &f) in self.structure.unit_to_fine().iter().enumerate() {
            x[(i, p + f)] = 1.0;
        }
        let mut names = self.names.clone();
        names.extend((0..f_bar).map(|f| format!("fe_{f}")));
        debug_assert_eq!(x.nrows(), n);
        Self::new(
            self.y.clone(),
            x,
            names,
            self.target,
            self.structure.clone(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct RegressionFit {
    beta: Vec<f64>,
    target: usize,
    residuals: Vec<f64>,
    k_bar: usize,
    xtx_inv_kk: f64,
    partialled_target: Vec<f64>,
    scores: Vec<f64>,
    basis: DMatrix<f64>,
    absorbed: bool,
}

impl RegressionFit {
    /// Coefficients of the non-absorbed regressors.
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn beta_target(&self) -> f64 {
        self.beta[self.target]
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// Regressor count including absorbed dummies.
    pub fn k_bar(&self) -> usize {
        self.k_bar
    }

    /// Target diagonal element of `(X'X)^{-1}`.
    pub fn xtx_inv_kk(&self) -> f64 {
        self.xtx_inv_kk
    }

    /// Target regressor after partialling out everything else in the model.
    pub fn partialled_target(&self) -> &[f64] {
        &self.partialled_target
    }

    /// HC1-scaled scores `n/(n-k̄) · x̃_i û_i`.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Orthonormal basis of the (demeaned) regressor columns.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn absorbed_fixed_effects(&self) -> bool {
        self.absorbed
    }

    /// `n / (n - k̄)`.
    pub fn hc1_factor(&self) -> f64 {
        let n = self.residuals.len() as f64;
        n / (n - self.k_bar as f64)
    }
}

/// Subtracts fine-cluster means in place.
pub fn demean_within(values: &mut [f64], structure: &ClusterStructure) {
    let mut sums = vec![0.0; structure.n_fine()];
    for (v, &f) in values.iter().zip(structure.unit_to_fine()) {
        sums[f] += v;
    }
    for (s, &k) in sums.iter_mut().zip(structure.fine_sizes()) {
        *s /= k as f64;
    }
    for (v, &f) in values.iter_mut().zip(structure.unit_to_fine()) {
        *v -= sums[f];
    }
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Residual of `v` after projecting on the column space of `basis`.
fn project_out(basis: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    if basis.ncols() == 0 {
        return v.clone();
    }
    let coef = basis.tr_mul(v);
    v - basis * coef
}

/// Numerical rank from the diagonal of a column-pivoted QR factor.
fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.ncols() == 0 {
        return 0;
    }
    let r = m.clone().col_piv_qr().r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|j| r[(j, j)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    diag.iter().filter(|&&d| max > 0.0 && d > RANK_TOLERANCE * max).count()
}

/// Thin orthonormal basis `Q` and triangular factor `R` of a full-rank
/// matrix.
fn qr_factors(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = m.clone().qr();
    (qr.q(), qr.r())
}

/// Ordinary least squares of `y` on the regressors, optionally absorbing
/// one dummy per fine cluster (no constant term either way).
pub fn ols_fit(data: &Dataset, absorb_fine_fe: bool) -> Result<RegressionFit> {
    let n = data.n();
    let structure = data.structure();
    let p = data.regressors.ncols();
    let k = data.target;

    let mut y = data.y.clone();
    let mut x = data.regressors.clone();
    if absorb_fine_fe {
        demean_within(&mut y, structure);
        for mut col in x.column_iter_mut() {
            demean_within(col.as_mut_slice(), structure);
        }
    }

    let raw_norm = sum_sq(data.regressors.column(k).as_slice()).sqrt();
    let target_norm = x.column(k).norm();
    if target_norm <= RANK_TOLERANCE * raw_norm.max(f64::MIN_POSITIVE) {
        return Err(Error::CollinearTarget(data.target_name().to_string()));
    }

    // Target regressor partialled on the other columns.
    let target_col: DVector<f64> = x.column(k).into_owned();
    let partialled = if p == 1 {
        target_col
    } else {
        let others = x.select_columns(&(0..p).filter(|&j| j != k).collect::<Vec<_>>());
        if numerical_rank(&others) < p - 1 {
            return Err(Error::RankDeficient { rank: numerical_rank(&x), columns: p });
        }
        project_out(&qr_factors(&others).0, &target_col)
    };
    let partialled_norm = partialled.norm();
    if partialled_norm <= RANK_TOLERANCE * target_norm.max(raw_norm) {
        return Err(Error::CollinearTarget(data.target_name().to_string()));
    }

    let rank = numerical_rank(&x);
    if rank < p {
        return Err(Error::RankDeficient { rank, columns: p });
    }
    let (basis, r) = qr_factors(&x);
    let y_vec = DVector::from_vec(y);
    let beta = r
        .solve_upper_triangular(&basis.tr_mul(&y_vec))
        .ok_or(Error::RankDeficient { rank, columns: p })?;
    let residuals = &y_vec - &x * &beta;

    let k_bar = p + if absorb_fine_fe { structure.n_fine() } else { 0 };
    let partialled_target: Vec<f64> = partialled.iter().copied().collect();
    let residuals: Vec<f64> = residuals.iter().copied().collect();
    let scores = compute_scores(&partialled_target, &residuals, k_bar)?;
    debug_assert_eq!(scores.len(), n);

    Ok(RegressionFit {
        beta: beta.iter().copied().collect(),
        target: k,
        residuals,
        k_bar,
        xtx_inv_kk: 1.0 / (partialled_norm * partialled_norm),
        partialled_target,
        scores,
        basis,
        absorbed: absorb_fine_fe,
    })
}

/// HC1 scores `ŝ_i = (n/(n-k̄)) x̃_i û_i` for the partialled target `x̃`.
pub fn compute_scores(partialled_target: &[f64], residuals: &[f64], k_bar: usize) -> Result<Vec<f64>> {
    let n = residuals.len();
    if partialled_target.len() != n {
        return Err(Error::LengthMismatch {
            what: "partialled target",
            found: partialled_target.len(),
            expected: n,
        });
    }
    if n <= k_bar {
        return Err(Error::NotEnoughDegreesOfFreedom { n, k: k_bar });
    }
    let factor = n as f64 / (n - k_bar) as f64;
    Ok(partialled_target
        .iter()
        .zip(residuals)
        .map(|(x, u)| factor * x * u)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fine,
    Gross,
}

/// Sums of unit scores within each fine cluster.
pub fn fine_sums(scores: &[f64], structure: &ClusterStructure) -> Vec<f64> {
    let mut sums = vec![0.0; structure.n_fine()];
    for (s, &f) in scores.iter().zip(structure.unit_to_fine()) {
        sums[f] += s;
    }
    sums
}

/// Sums of fine-cluster sums within each gross cluster of `map`, added in
/// increasing fine-cluster order.
pub fn gross_sums(fine: &[f64], map: &GrossMap) -> Vec<f64> {
    let mut sums = vec![0.0; map.n_gross()];
    for (s, &g) in fine.iter().zip(map.as_slice()) {
        sums[g] += s;
    }
    sums
}

/// Per-cluster score sums at `level`. `map` overrides the observed
/// fine→gross assignment for the gross level.
pub fn aggregate_scores(
    scores: &[f64],
    structure: &ClusterStructure,
    level: Level,
    map: Option<&GrossMap>,
) -> Result<Vec<f64>> {
    if scores.len() != structure.n() {
        return Err(Error::LengthMismatch {
            what: "scores",
            found: scores.len(),
            expected: structure.n(),
        });
    }
    let fine = fine_sums(scores, structure);
    match level {
        Level::Fine => Ok(fine),
        Level::Gross => {
            let observed;
            let map = match map {
                Some(m) => {
                    // Revalidate: the override must fit this structure.
                    GrossMap::regrouping(structure, m.as_slice().to_vec())?;
                    m
                }
                None => {
                    observed = GrossMap::observed(structure);
                    &observed
                }
            };
            Ok(gross_sums(&fine, map))
        }
    }
}
