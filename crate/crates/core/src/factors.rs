//! Principal components of an asset's Gaussianized deviate panel.

use chrono::NaiveDate;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetFactors {
    pub asset_id: String,
    pub days: Vec<NaiveDate>,
    /// `H × H`, column `k` is `ψ_{k+1}`.
    pub factors: DMatrix<f64>,
    /// Descending, non-negative.
    pub eigenvalues: Vec<f64>,
    /// `days × H`, row `d` is `ψᵀ z̃_d`.
    pub amplitudes: DMatrix<f64>,
}

impl AssetFactors {
    pub fn n_hours(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `γ_k(·)` for 1-based `k`.
    pub fn amplitude_series(&self, k: usize) -> Result<Vec<f64>> {
        if k == 0 || k > self.n_hours() {
            return Err(Error::InvalidParameter(format!(
                "factor {k} outside 1..={}",
                self.n_hours()
            )));
        }
        Ok(self.amplitudes.column(k - 1).iter().copied().collect())
    }

    /// `Σ_k γ_k ψ_k` for a vector of amplitudes.
    pub fn reconstruct(&self, gamma: &[f64]) -> Vec<f64> {
        let g = nalgebra::DVector::from_column_slice(gamma);
        (&self.factors * g).as_slice().to_vec()
    }
}

/// Flip so the entries sum positive; exact ties fall back to the first
/// non-zero entry being positive.
fn fix_sign(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    let flip = if s != 0.0 {
        s < 0.0
    } else {
        v.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0)
    };
    if flip {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// PCA on the uncentred `(n−1)`-normalized second-moment matrix of the rows.
pub fn fit_factors(asset_id: &str, days: &[NaiveDate], z_tilde: &[Vec<f64>]) -> Result<AssetFactors> {
    let n = z_tilde.len();
    let h = z_tilde.first().map_or(0, |r| r.len());
    if h == 0 {
        return Err(Error::Degenerate(format!("{asset_id}: no active hours")));
    }
    if n < h + 1 {
        return Err(Error::Infeasible(format!(
            "{asset_id}: {n} days for {h} hours, need at least {}",
            h + 1
        )));
    }
    if days.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: days.len(),
        });
    }
    if let Some(r) = z_tilde.iter().find(|r| r.len() != h) {
        return Err(Error::Dimension {
            expected: h,
            actual: r.len(),
        });
    }
    let z = DMatrix::from_fn(n, h, |i, j| z_tilde[i][j]);
    let cov = (z.transpose() * &z) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut factors = DMatrix::zeros(h, h);
    let mut eigenvalues = Vec::with_capacity(h);
    for (k, &src) in order.iter().enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(src).iter().copied().collect();
        fix_sign(&mut v);
        factors.set_column(k, &nalgebra::DVector::from_vec(v));
        eigenvalues.push(eig.eigenvalues[src].max(0.0));
    }
    let amplitudes = &z * &factors;
    Ok(AssetFactors {
        asset_id: asset_id.to_string(),
        days: days.to_vec(),
        factors,
        eigenvalues,
        amplitudes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn days(n: usize) -> Vec<NaiveDate> {
        NaiveDate::from_ymd_opt(2018, 1, 1).unwrap().iter_days().take(n).collect()
    }

    fn random_panel(n: usize, h: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = substream(seed, "pca");
        (0..n).map(|_| (0..h).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    #[test]
    fn basis_is_orthonormal_and_complete() {
        let z = random_panel(60, 11, 1);
        let f = fit_factors("a", &days(60), &z).unwrap();
        assert_eq!(f.n_hours(), 11);
        let gram = f.factors.transpose() * &f.factors;
        assert!((gram - DMatrix::<f64>::identity(11, 11)).amax() < 1e-10);
        for (d, row) in z.iter().enumerate() {
            let gamma: Vec<f64> = f.amplitudes.row(d).iter().copied().collect();
            let back = f.reconstruct(&gamma);
            for (a, b) in back.iter().zip(row) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        let total: f64 = f.eigenvalues.iter().sum();
        let trace: f64 = (0..11).map(|j| z.iter().map(|r| r[j] * r[j]).sum::<f64>() / 59.0).sum();
        assert!((total - trace).abs() < 1e-10);
        assert!(f.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(f.factors.column(0).sum() > 0.0);
    }

    #[test]
    fn amplitude_covariance_is_diagonal() {
        let z = random_panel(80, 6, 2);
        let f = fit_factors("a", &days(80), &z).unwrap();
        let c = f.amplitudes.transpose() * &f.amplitudes / 79.0;
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { f.eigenvalues[i] } else { 0.0 };
                assert!((c[(i, j)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn iid_eigenvalues_near_one() {
        let z = random_panel(20000, 5, 3);
        let f = fit_factors("a", &days(20000), &z).unwrap();
        for l in &f.eigenvalues {
            assert!((l - 1.0).abs() < 0.05, "{l}");
        }
    }

    #[test]
    fn rank_one_panel_recovered() {
        let mut rng = substream(4, "rank1");
        let v: Vec<f64> = (0..8).map(|i| 1.0 + 0.2 * i as f64).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f64> = v.iter().map(|x| x / norm).collect();
        let mut planted = Vec::new();
        let z: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let g: f64 = rng.sample(StandardNormal);
                planted.push(g);
                v.iter().map(|x| g * x + 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        let f = fit_factors("a", &days(200), &z).unwrap();
        let share = f.eigenvalues[0] / f.eigenvalues.iter().sum::<f64>();
        assert!(share >= 0.99);
        let dot: f64 = f.factors.column(0).iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!(dot.abs() > 0.999);
        let g1 = f.amplitude_series(1).unwrap();
        let r = crate::stats::pearson(&g1, &planted).unwrap();
        assert!(r.abs() > 0.999);
        assert!(f.amplitude_series(0).is_err());
        assert!(f.amplitude_series(9).is_err());
    }

    #[test]
    fn day_permutation_permutes_amplitudes() {
        let z = random_panel(40, 4, 5);
        let mut rev = z.clone();
        rev.reverse();
        let a = fit_factors("a", &days(40), &z).unwrap();
        let b = fit_factors("a", &days(40), &rev).unwrap();
        assert!((&a.factors - &b.factors).amax() < 1e-10);
        for d in 0..40 {
            for k in 0..4 {
                assert!((a.amplitudes[(d, k)] - b.amplitudes[(39 - d, k)]).abs() < 1e-10);
            }
        }
        let again = fit_factors("a", &days(40), &z).unwrap();
        assert_eq!(a.factors, again.factors);
    }

    #[test]
    fn too_few_days_rejected() {
        let z = random_panel(5, 5, 6);
        assert!(matches!(fit_factors("a", &days(5), &z), Err(Error::Infeasible(_))));
    }
}
