#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use reclust::{ClusterStructure, Dataset};

/// Random nested design: `n_gross` gross clusters with 1..=max_fine fine
/// clusters each and 1..=max_units units per fine cluster.
pub fn random_structure(rng: &mut ChaCha8Rng, n_gross: usize, max_fine: usize, max_units: usize) -> ClusterStructure {
    let sizes: Vec<Vec<usize>> = (0..n_gross)
        .map(|_| {
            let nf = rng.random_range(1..=max_fine);
            (0..nf).map(|_| rng.random_range(1..=max_units)).collect()
        })
        .collect();
    ClusterStructure::nested(&sizes).unwrap()
}

/// Gaussian regressors and outcome with some cluster-level noise.
pub fn random_dataset(rng: &mut ChaCha8Rng, structure: &ClusterStructure, controls: usize) -> Dataset {
    let n = structure.n();
    let p = 1 + controls;
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let shocks: Vec<f64> = (0..structure.n_gross()).map(|_| rng.sample(StandardNormal)).collect();
    let unit_to_gross = structure.unit_to_gross();
    let y = (0..n)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            0.7 * x[(i, 0)] + shocks[unit_to_gross[i]] + e
        })
        .collect();
    let names = (0..p).map(|j| format!("x{j}")).collect();
    Dataset::new(y, x, names, 0, structure.clone()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense sandwich for the target coefficient by explicit matrix inversion,
/// with fine-cluster dummies as explicit columns when `absorb` is set.
///
/// `V = (Z'Z)^{-1} [Σ_g (c h Z_g'û_g)(c h Z_g'û_g)'] (Z'Z)^{-1}` with
/// `h = n/(n-k)` and `c = G(n-1)/((G-1)n)`; returns `sqrt(V_00)`.
pub fn dense_crse(data: &Dataset, absorb: bool, gross_of_fine: &[usize], n_gross: usize) -> f64 {
    let s = data.structure();
    let n = data.n();
    let x = data.regressors();
    let extra = if absorb { s.n_fine() } else { 0 };
    let k = x.ncols() + extra;
    let z = DMatrix::from_fn(n, k, |i, j| {
        if j < x.ncols() {
            x[(i, j)]
        } else if s.unit_to_fine()[i] == j - x.ncols() {
            1.0
        } else {
            0.0
        }
    });
    let y = DVector::from_column_slice(data.y());
    let bread = (z.transpose() * &z).try_inverse().expect("full rank design");
    let beta = &bread * z.transpose() * &y;
    let resid = &y - &z * beta;
    let h = n as f64 / (n - k) as f64;
    let (g, nf) = (n_gross as f64, n as f64);
    let c = g * (nf - 1.0) / ((g - 1.0) * nf);
    let mut meat = DMatrix::zeros(k, k);
    for cluster in 0..n_gross {
        let mut sg = DVector::zeros(k);
        for i in 0..n {
            if gross_of_fine[s.unit_to_fine()[i]] == cluster {
                sg += z.row(i).transpose() * resid[i];
            }
        }
        sg *= c * h;
        meat += &sg * sg.transpose();
    }
    let v = &bread * meat * &bread;
    v[(0, 0)].sqrt()
}
