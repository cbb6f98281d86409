//! Clustered data generators for the simulations.
//!
//! Each variable is a standard normal series whose dependence lives either
//! within fine clusters or within gross clusters. Two constructions are
//! available: an AR(1) chain and a hidden-factor model in which units of the
//! same parity share a factor.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cluster_model::ClusterStructure;
use crate::error::{Error, Result};
use crate::regression::Dataset;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    Ar1,
    #[default]
    HiddenFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarLevel {
    Fine,
    Gross,
}

/// Weights on the fine and gross components of `x` and `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixWeights {
    /// 0.5 and 0.5, so the mixture has variance 0.5.
    #[default]
    Half,
    /// `1/√2` each, so the mixture has unit variance.
    UnitVariance,
}

impl MixWeights {
    pub fn weight(self) -> f64 {
        match self {
            MixWeights::Half => 0.5,
            MixWeights::UnitVariance => std::f64::consts::FRAC_1_SQRT_2,
        }
    }
}

fn default_half() -> f64 {
    0.5
}

fn default_beta() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpParams {
    #[serde(default = "default_half")]
    pub rho_x_gross: f64,
    #[serde(default = "default_half")]
    pub rho_x_fine: f64,
    #[serde(default)]
    pub rho_u_gross: f64,
    #[serde(default)]
    pub rho_u_fine: f64,
    #[serde(default)]
    pub model: Model,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub mix: MixWeights,
    /// Also reorder `x^F` and `u^F` jointly within each fine cluster.
    #[serde(default)]
    pub reorder_fine: bool,
}

impl Default for DgpParams {
    fn default() -> Self {
        Self {
            rho_x_gross: 0.5,
            rho_x_fine: 0.5,
            rho_u_gross: 0.0,
            rho_u_fine: 0.0,
            model: Model::HiddenFactor,
            beta: 1.0,
            mix: MixWeights::Half,
            reorder_fine: false,
        }
    }
}

impl DgpParams {
    /// Sets `ρ^F_U = ρ^G_U = ρ_U`.
    pub fn with_rho_u(mut self, rho_u: f64) -> Self {
        self.rho_u_fine = rho_u;
        self.rho_u_gross = rho_u;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rho) in [
            ("rho_x_gross", self.rho_x_gross),
            ("rho_x_fine", self.rho_x_fine),
            ("rho_u_gross", self.rho_u_gross),
            ("rho_u_fine", self.rho_u_fine),
        ] {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::InvalidParameter(format!("{name} = {rho} is outside [0, 1)")));
            }
        }
        if !self.beta.is_finite() {
            return Err(Error::InvalidParameter("beta must be finite".into()));
        }
        Ok(())
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Unit lists of the chains: one per fine cluster, or one per gross cluster
/// running through its fine clusters in order.
fn chains(structure: &ClusterStructure, level: VarLevel) -> Vec<Vec<usize>> {
    let fine = structure.fine_members();
    match level {
        VarLevel::Fine => fine,
        VarLevel::Gross => {
            let mut out = vec![Vec::new(); structure.n_gross()];
            for (f, &g) in structure.fine_to_gross().iter().enumerate() {
                out[g].extend_from_slice(&fine[f]);
            }
            out
        }
    }
}

fn ar1_chain<R: Rng + ?Sized>(structure: &ClusterStructure, level: VarLevel, rho: f64, rng: &mut R) -> Vec<f64> {
    let mut q = vec![0.0; structure.n()];
    let innov = (1.0 - rho * rho).sqrt();
    for chain in chains(structure, level) {
        let mut prev = None;
        for i in chain {
            let e = normal(rng);
            let v = match prev {
                None => e,
                Some(p) => rho * p + innov * e,
            };
            q[i] = v;
            prev = Some(v);
        }
    }
    q
}

/// Position of each unit within its fine cluster, starting at 1.
fn fine_positions(structure: &ClusterStructure) -> Vec<usize> {
    let mut seen = vec![0usize; structure.n_fine()];
    structure
        .unit_to_fine()
        .iter()
        .map(|&f| {
            seen[f] += 1;
            seen[f]
        })
        .collect()
}

fn hidden_factor_raw<R: Rng + ?Sized>(
    structure: &ClusterStructure,
    level: VarLevel,
    rho: f64,
    rng: &mut R,
) -> Vec<f64> {
    let n_groups = match level {
        VarLevel::Fine => structure.n_fine(),
        VarLevel::Gross => structure.n_gross(),
    };
    let factors: Vec<[f64; 2]> = (0..n_groups).map(|_| [normal(rng), normal(rng)]).collect();
    let unit_to_gross = structure.unit_to_gross();
    let innov = (1.0 - rho * rho).sqrt();
    fine_positions(structure)
        .iter()
        .enumerate()
        .map(|(i, &pos)| {
            let group = match level {
                VarLevel::Fine => structure.unit_to_fine()[i],
                VarLevel::Gross => unit_to_gross[i],
            };
            let factor = factors[group][if pos % 2 == 1 { 0 } else { 1 }];
            rho * factor + innov * normal(rng)
        })
        .collect()
}

/// Random permutation of the units within each gross cluster:
/// `out[i] = values[perm[i]]`.
fn within_permutation<R: Rng + ?Sized>(groups: &[Vec<usize>], n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for members in groups {
        let mut shuffled = members.clone();
        shuffled.shuffle(rng);
        for (&to, &from) in members.iter().zip(&shuffled) {
            perm[to] = from;
        }
    }
    perm
}

fn apply(values: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter().map(|&p| values[p]).collect()
}

/// AR(1) series. At the fine level the chain restarts in each fine cluster;
/// at the gross level it runs on through the fine clusters of a gross
/// cluster and is then shuffled within the gross cluster.
pub fn gen_ar1<R: Rng + ?Sized>(structure: &ClusterStructure, level: VarLevel, rho: f64, rng: &mut R) -> Vec<f64> {
    let q = ar1_chain(structure, level, rho, rng);
    match level {
        VarLevel::Fine => q,
        VarLevel::Gross => {
            let perm = within_permutation(&structure.gross_units(), structure.n(), rng);
            apply(&q, &perm)
        }
    }
}

/// Hidden-factor series: `q = ρ ε^odd + sqrt(1-ρ²) ε` for units at odd
/// positions of their fine cluster and likewise with `ε^even`, where the two
/// factors are drawn per fine or per gross cluster.
pub fn gen_hidden_factor<R: Rng + ?Sized>(
    structure: &ClusterStructure,
    level: VarLevel,
    rho: f64,
    rng: &mut R,
) -> Vec<f64> {
    hidden_factor_raw(structure, level, rho, rng)
}

fn generate<R: Rng + ?Sized>(model: Model, structure: &ClusterStructure, level: VarLevel, rho: f64, rng: &mut R) -> Vec<f64> {
    match model {
        Model::Ar1 => ar1_chain(structure, level, rho, rng),
        Model::HiddenFactor => hidden_factor_raw(structure, level, rho, rng),
    }
}

mod stream {
    pub const X_GROSS: u64 = 0;
    pub const U_GROSS: u64 = 1;
    pub const X_FINE: u64 = 2;
    pub const U_FINE: u64 = 3;
    pub const PHI: u64 = 4;
    pub const GROSS_REORDER: u64 = 5;
    pub const FINE_REORDER: u64 = 6;
}

/// The random parts of one simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationDraw {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// One fixed effect per fine cluster.
    pub phi: Vec<f64>,
}

impl IterationDraw {
    /// `y = β x + φ_f + u`.
    pub fn into_dataset(self, structure: &ClusterStructure, beta: f64) -> Result<Dataset> {
        let y = self
            .x
            .iter()
            .zip(&self.u)
            .zip(structure.unit_to_fine())
            .map(|((x, u), &f)| beta * x + self.phi[f] + u)
            .collect();
        Dataset::simple(y, self.x, structure.clone())
    }
}

/// Draws `x` and `u` as mixtures of a fine-level and a gross-level series,
/// plus the fine fixed effects. The gross-level pair is shuffled within gross
/// clusters by one common permutation. Every variable has its own substream
/// of `seed`.
pub fn draw_iteration(structure: &ClusterStructure, params: &DgpParams, seed: u64) -> Result<IterationDraw> {
    params.validate()?;
    let gen = |level, rho, s| generate(params.model, structure, level, rho, &mut stream_rng(seed, s));
    let x_gross = gen(VarLevel::Gross, params.rho_x_gross, stream::X_GROSS);
    let u_gross = gen(VarLevel::Gross, params.rho_u_gross, stream::U_GROSS);
    let mut x_fine = gen(VarLevel::Fine, params.rho_x_fine, stream::X_FINE);
    let mut u_fine = gen(VarLevel::Fine, params.rho_u_fine, stream::U_FINE);

    let n = structure.n();
    let perm = within_permutation(&structure.gross_units(), n, &mut stream_rng(seed, stream::GROSS_REORDER));
    let (x_gross, u_gross) = (apply(&x_gross, &perm), apply(&u_gross, &perm));
    if params.reorder_fine {
        let perm = within_permutation(&structure.fine_members(), n, &mut stream_rng(seed, stream::FINE_REORDER));
        x_fine = apply(&x_fine, &perm);
        u_fine = apply(&u_fine, &perm);
    }

    let w = params.mix.weight();
    let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(f, g)| w * f + w * g).collect::<Vec<f64>>();
    let mut phi_rng = stream_rng(seed, stream::PHI);
    Ok(IterationDraw {
        x: mix(&x_fine, &x_gross),
        u: mix(&u_fine, &u_gross),
        phi: (0..structure.n_fine()).map(|_| normal(&mut phi_rng)).collect(),
    })
}

/// One simulated dataset with `x` as the target regressor.
pub fn make_iteration(structure: &ClusterStructure, params: &DgpParams, seed: u64) -> Result<Dataset> {
    draw_iteration(structure, params, seed)?.into_dataset(structure, params.beta)
}
