//! Symmetric eigendecomposition, thin SVD and Cholesky, backed by nalgebra.

use std::cmp::Ordering;

use super::DenseMatrix;
use crate::error::{QuadError, Result};

/// Relative tolerance for treating two eigenvalues as tied when ordering.
const TIE_RTOL: f64 = 1e-12;

fn symmetry_defect(g: &DenseMatrix) -> f64 {
    let n = g.rows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((g.get(i, j) - g.get(j, i)).abs());
        }
    }
    worst
}

/// Flips each column so its first entry of non-negligible magnitude is positive.
fn canonicalize_signs(u: &mut DenseMatrix) {
    let n = u.rows();
    for j in 0..u.cols() {
        let col_max = (0..n).fold(0.0f64, |m, i| m.max(u.get(i, j).abs()));
        let thresh = 1e-10 * col_max.max(f64::MIN_POSITIVE);
        if let Some(first) = (0..n).map(|i| u.get(i, j)).find(|v| v.abs() > thresh) {
            if first < 0.0 {
                for i in 0..n {
                    u.set(i, j, -u.get(i, j));
                }
            }
        }
    }
}

fn argmax_abs(u: &nalgebra::DMatrix<f64>, col: usize) -> usize {
    let mut best = 0;
    for i in 0..u.nrows() {
        if u[(i, col)].abs() > u[(best, col)].abs() + 1e-12 {
            best = i;
        }
    }
    best
}

/// Eigendecomposition `G = U·diag(λ)·Uᵀ` of a symmetric positive semidefinite matrix.
///
/// Eigenvalues come back in descending order. Ties are ordered by the row of each
/// eigenvector's largest entry so that `I` decomposes to `U = I`. Tiny negative
/// eigenvalues from rounding are clamped to zero.
pub fn eig_gram(g: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
    let n = g.rows();
    if g.cols() != n {
        return Err(QuadError::dim(format!(
            "Gram matrix must be square, got {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    let scale = g.max_abs().max(1.0);
    let defect = symmetry_defect(g);
    if defect > 1e-8 * scale {
        return Err(QuadError::validation(format!(
            "Gram matrix is not symmetric (max |G - Gᵀ| = {defect:.3e})"
        )));
    }
    if n == 0 {
        return Ok((DenseMatrix::zeros(0, 0), Vec::new()));
    }
    let mut sym = g.clone();
    sym.symmetrize();
    let eig = nalgebra::SymmetricEigen::new(sym.to_nalgebra());

    let spectral = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(neg) = eig
        .eigenvalues
        .iter()
        .copied()
        .find(|&v| v < -1e-8 * spectral.max(f64::MIN_POSITIVE))
    {
        return Err(QuadError::numerical(format!(
            "Gram matrix has a negative eigenvalue {neg:.3e}; input is not positive semidefinite"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let keys: Vec<(f64, usize)> = (0..n)
        .map(|j| (eig.eigenvalues[j], argmax_abs(&eig.eigenvectors, j)))
        .collect();
    let tie = TIE_RTOL * spectral.max(f64::MIN_POSITIVE);
    order.sort_by(|&a, &b| {
        let (va, ia) = keys[a];
        let (vb, ib) = keys[b];
        if (va - vb).abs() <= tie {
            ia.cmp(&ib)
        } else {
            vb.partial_cmp(&va).unwrap_or(Ordering::Equal)
        }
    });

    let mut u = DenseMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src].max(0.0));
        for i in 0..n {
            u.set(i, dst, eig.eigenvectors[(i, src)]);
        }
    }
    canonicalize_signs(&mut u);
    Ok((u, values))
}

/// Thin SVD `A = U·diag(σ)·Vᵀ` with σ descending.
pub struct Svd {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

pub fn svd(a: &DenseMatrix) -> Result<Svd> {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Ok(Svd {
            u: DenseMatrix::zeros(m, 0),
            sigma: Vec::new(),
            vt: DenseMatrix::zeros(0, n),
        });
    }
    let dec = nalgebra::SVD::try_new(a.to_nalgebra(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| QuadError::numerical("SVD failed to converge"))?;
    let (u, vt) = match (dec.u, dec.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(QuadError::numerical("SVD did not return singular vectors")),
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| {
        dec.singular_values[y]
            .partial_cmp(&dec.singular_values[x])
            .unwrap_or(Ordering::Equal)
    });
    let u_sorted = DenseMatrix::from_fn(m, k, |i, j| u[(i, order[j])]);
    let vt_sorted = DenseMatrix::from_fn(k, n, |i, j| vt[(order[i], j)]);
    let sigma = order.iter().map(|&j| dec.singular_values[j]).collect();
    Ok(Svd {
        u: u_sorted,
        sigma,
        vt: vt_sorted,
    })
}

/// Lower Cholesky factor `L` with `A = L·Lᵀ`; `None` when `A` is not positive definite.
pub fn cholesky_lower(a: &DenseMatrix) -> Option<DenseMatrix> {
    let c = nalgebra::Cholesky::new(a.to_nalgebra())?;
    Some(DenseMatrix::from_nalgebra(&c.l()))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(a: &DenseMatrix) -> Option<DenseMatrix> {
    let c = nalgebra::Cholesky::new(a.to_nalgebra())?;
    let mut inv = DenseMatrix::from_nalgebra(&c.inverse());
    inv.symmetrize();
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(u: &DenseMatrix, vals: &[f64]) -> DenseMatrix {
        u.scale_cols(vals).matmul(&u.transpose())
    }

    #[test]
    fn identity_and_diagonal() {
        let (u, s) = eig_gram(&DenseMatrix::identity(4)).unwrap();
        assert_eq!(s, vec![1.0; 4]);
        assert!(u.max_abs_diff(&DenseMatrix::identity(4)) < 1e-15);

        let (u, s) = eig_gram(&DenseMatrix::diag(&[9.0, 1.0])).unwrap();
        assert!((s[0] - 9.0).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14);
        assert!(u.max_abs_diff(&DenseMatrix::identity(2)) < 1e-14);

        let (u, s) = eig_gram(&DenseMatrix::diag(&[1.0, 9.0])).unwrap();
        assert!((s[0] - 9.0).abs() < 1e-14);
        assert!((u.get(1, 0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_gram_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DenseMatrix::gaussian(16, 8, 1.0, &mut rng);
        let g = x.gram();
        let (u, s) = eig_gram(&g).unwrap();
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        let err = reconstruct(&u, &s).sub(&g).frobenius_norm();
        assert!(err <= 1e-9 * g.frobenius_norm());
        assert!(u.t_matmul(&u).max_abs_diff(&DenseMatrix::identity(8)) < 1e-10);
        for j in 0..8 {
            let first = (0..8).map(|i| u.get(i, j)).find(|v| v.abs() > 1e-10).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(eig_gram(&a), Err(QuadError::Validation(_))));
        let b = DenseMatrix::diag(&[1.0, -1.0]);
        assert!(matches!(eig_gram(&b), Err(QuadError::Numerical(_))));
    }

    #[test]
    fn svd_is_sorted_and_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DenseMatrix::gaussian(7, 5, 1.0, &mut rng);
        let d = svd(&a).unwrap();
        assert!(d.sigma.windows(2).all(|w| w[0] >= w[1]));
        let back = d.u.scale_cols(&d.sigma).matmul(&d.vt);
        assert!(back.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn cholesky_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DenseMatrix::gaussian(20, 6, 1.0, &mut rng);
        let g = x.gram();
        let l = cholesky_lower(&g).unwrap();
        assert!(l.matmul(&l.transpose()).max_abs_diff(&g) < 1e-10);
        let inv = spd_inverse(&g).unwrap();
        assert!(inv.matmul(&g).max_abs_diff(&DenseMatrix::identity(6)) < 1e-10);
        assert!(cholesky_lower(&DenseMatrix::diag(&[1.0, -1.0])).is_none());
    }
}
