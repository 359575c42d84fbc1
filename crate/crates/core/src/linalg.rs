//! Dense symmetric-matrix helpers: PSD repair, pseudo-inverses, square
//! roots and partitioned-Gaussian conditioning.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff for pseudo-inverses.
const PINV_RTOL: f64 = 1e-12;

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension {
            expected: m.nrows(),
            actual: m.ncols(),
        });
    }
    Ok(())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Nearest-correlation repair: clamp negative eigenvalues to zero, rebuild
/// and rescale to unit diagonal.
pub fn psd_repair(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(m)?;
    let n = m.nrows();
    if n == 0 || m.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("zero matrix cannot be repaired".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite matrix entries".into()));
    }
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    let rebuilt = if eig.eigenvalues.iter().all(|l| *l >= 0.0) {
        sym
    } else {
        let lam = eig.eigenvalues.map(|l| l.max(0.0));
        &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose()
    };
    let d: Vec<f64> = (0..n).map(|i| rebuilt[(i, i)]).collect();
    if d.iter().any(|v| *v <= 0.0) {
        return Err(Error::Degenerate("repaired matrix has a zero diagonal entry".into()));
    }
    let mut out = DMatrix::from_fn(n, n, |i, j| rebuilt[(i, j)] / (d[i] * d[j]).sqrt());
    for i in 0..n {
        out[(i, i)] = 1.0;
        for j in 0..i {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Moore–Penrose inverse of a symmetric matrix.
pub fn pinv_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let cut = PINV_RTOL * top.max(f64::MIN_POSITIVE);
    let inv = eig.eigenvalues.map(|l| if l > cut { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// A factor `L` with `L Lᵀ = m`, negative eigenvalues treated as zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    if let Some(ch) = symmetrize(m).cholesky() {
        return ch.l();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root)
}

fn complement(n: usize, known: &[usize]) -> Result<Vec<usize>> {
    let mut is_known = vec![false; n];
    for &k in known {
        if k >= n {
            return Err(Error::Dimension {
                expected: n,
                actual: k + 1,
            });
        }
        if is_known[k] {
            return Err(Error::InvalidParameter(format!("index {k} conditioned twice")));
        }
        is_known[k] = true;
    }
    Ok((0..n).filter(|i| !is_known[*i]).collect())
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Moments of the unknown coordinates of a zero-mean Gaussian given the
/// known ones. The remainder is ordered by ascending index.
pub fn conditional_gaussian(
    cov: &DMatrix<f64>,
    known: &[usize],
    values: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_square(cov)?;
    if known.len() != values.len() {
        return Err(Error::Dimension {
            expected: known.len(),
            actual: values.len(),
        });
    }
    let sampler = ConditionalSampler::new(cov, known)?;
    Ok((sampler.mean(values), sampler.cov.clone()))
}

/// Precomputed conditioning of a zero-mean Gaussian on a fixed index set,
/// for repeated draws.
#[derive(Debug, Clone)]
pub struct ConditionalSampler {
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
    /// `Σ_uk Σ_kk⁺`.
    pub regression: DMatrix<f64>,
    /// Conditional covariance of the unknown block.
    pub cov: DMatrix<f64>,
    /// Square-root factor of `cov`.
    pub factor: DMatrix<f64>,
}

impl ConditionalSampler {
    pub fn new(cov: &DMatrix<f64>, known: &[usize]) -> Result<Self> {
        check_square(cov)?;
        let unknown = complement(cov.nrows(), known)?;
        let s_uu = submatrix(cov, &unknown, &unknown);
        let (regression, cond) = if known.is_empty() {
            (DMatrix::zeros(unknown.len(), 0), s_uu)
        } else {
            let s_kk = submatrix(cov, known, known);
            let s_uk = submatrix(cov, &unknown, known);
            let reg = &s_uk * pinv_sym(&s_kk);
            let cond = symmetrize(&(s_uu - &reg * s_uk.transpose()));
            (reg, cond)
        };
        let factor = psd_sqrt(&cond);
        Ok(ConditionalSampler {
            known: known.to_vec(),
            unknown,
            regression,
            cov: cond,
            factor,
        })
    }

    pub fn mean(&self, values: &[f64]) -> DVector<f64> {
        if self.known.is_empty() {
            return DVector::zeros(self.unknown.len());
        }
        &self.regression * DVector::from_column_slice(values)
    }

    /// Conditional draw given known values and i.i.d. standard normals
    /// `noise` (length = number of unknowns).
    pub fn draw(&self, values: &[f64], noise: &[f64]) -> DVector<f64> {
        self.mean(values) + &self.factor * DVector::from_column_slice(noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repair_fixes_indefinite_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0]);
        assert!(min_eigenvalue(&m) < 0.0);
        let r = psd_repair(&m).unwrap();
        assert!(min_eigenvalue(&r) >= -1e-10);
        for i in 0..3 {
            assert!((r[(i, i)] - 1.0).abs() < 1e-12);
        }
        let again = psd_repair(&r).unwrap();
        assert!((&again - &r).amax() < 1e-12);
    }

    #[test]
    fn repair_rejects_zero() {
        assert!(psd_repair(&DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn pinv_of_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pinv_sym(&m);
        assert!((&m * &p * &m - &m).amax() < 1e-12);
    }

    #[test]
    fn sqrt_reproduces_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.3, 0.1, 0.3, 0.5]);
        let l = psd_sqrt(&m);
        assert!((&l * l.transpose() - &m).amax() < 1e-12);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_sqrt(&s);
        assert!((&l * l.transpose() - &s).amax() < 1e-12);
    }

    #[test]
    fn conditioning_rejects_bad_indices() {
        let m = DMatrix::<f64>::identity(2, 2);
        assert!(conditional_gaussian(&m, &[2], &[0.0]).is_err());
        assert!(conditional_gaussian(&m, &[0], &[0.0, 1.0]).is_err());
        assert!(conditional_gaussian(&m, &[0, 0], &[0.0, 1.0]).is_err());
    }
}
