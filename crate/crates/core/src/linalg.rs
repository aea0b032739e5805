//! Shared dense linear-algebra helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest real part over the eigenvalues of `a`.
///
/// Symmetric matrices (up to `1e-12` relative asymmetry) take the symmetric
/// eigensolver; everything else goes through the complex Schur path.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    assert!(a.is_square(), "spectral abscissa of a non-square matrix");
    if a.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    if is_symmetric(a) {
        let eig = a.clone().symmetric_eigen();
        eig.eigenvalues.max()
    } else {
        a.clone()
            .complex_eigenvalues()
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Cheap stability check: Gershgorin discs first, eigenvalues only when the
/// discs are inconclusive.
pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    assert!(a.is_square());
    if a.nrows() == 0 {
        return true;
    }
    let mut conclusive = true;
    for i in 0..a.nrows() {
        let mut radius = 0.0;
        for j in 0..a.ncols() {
            if i != j {
                radius += a[(i, j)].abs();
            }
        }
        if a[(i, i)] + radius >= 0.0 {
            conclusive = false;
            break;
        }
    }
    if conclusive {
        return true;
    }
    spectral_abscissa(a) < 0.0
}

pub fn is_symmetric(a: &DMatrix<f64>) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.amax().max(1e-300);
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                return false;
            }
        }
    }
    true
}

/// Matrix exponential by scaling-and-squaring with a diagonal Padé
/// approximant. Serves as the reference integrator against which the
/// implicit-Euler stepping is checked.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm of a non-square matrix");
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let norm = a.iter().map(|x| x.abs()).fold(0.0, f64::max) * n as f64;
    let squarings = if norm > 0.25 {
        (norm / 0.25).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings as i32);

    // diagonal Padé of order 6
    const P: usize = 6;
    let mut coeffs = [0.0; P + 1];
    coeffs[0] = 1.0;
    for j in 1..=P {
        coeffs[j] = coeffs[j - 1] * (P - j + 1) as f64 / (j * (2 * P - j + 1)) as f64;
    }
    let eye = DMatrix::identity(n, n);
    let mut power = eye.clone();
    let mut num = DMatrix::zeros(n, n);
    let mut den = DMatrix::zeros(n, n);
    for (j, &c) in coeffs.iter().enumerate() {
        num += &power * c;
        if j % 2 == 0 {
            den += &power * c;
        } else {
            den -= &power * c;
        }
        if j < P {
            power = &power * &scaled;
        }
    }
    let mut result = den
        .lu()
        .solve(&num)
        .expect("Padé denominator is singular; matrix norm out of range");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
///
/// Returns an orthonormal basis of the column span; columns whose residual
/// norm falls below `tol` times the original column norm are dropped, so the
/// returned matrix may have fewer columns than the input.
pub fn orthonormalize(columns: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = columns.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for j in 0..columns.ncols() {
        let mut v = columns.column(j).clone_owned();
        let original = v.norm().max(1e-300);
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v -= q * proj;
            }
        }
        if v.norm() > tol * original && v.norm() > 0.0 {
            v /= v.norm();
            basis.push(v);
        }
    }
    let mut out = DMatrix::zeros(n, basis.len());
    for (j, q) in basis.iter().enumerate() {
        out.set_column(j, q);
    }
    out
}

/// Solves `min ||m x - rhs||^2 + lambda ||x||^2` through the SVD filter
/// factors `sigma / (sigma^2 + lambda)`, which stays accurate for
/// arbitrarily small `lambda`. With `lambda = 0` this is the minimum-norm
/// least-squares solution.
pub fn tikhonov_solve(m: &DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    if m.nrows() != rhs.len() {
        return Err(Error::Dimension(format!(
            "design matrix has {} rows but rhs has {} entries",
            m.nrows(),
            rhs.len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::Config("regularization weight must be non-negative".into()));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let sigma_max = svd.singular_values.max();
    let mut x = DVector::zeros(m.ncols());
    for i in 0..svd.singular_values.len() {
        let sigma = svd.singular_values[i];
        if sigma <= 1e-13 * sigma_max.max(1e-300) {
            continue;
        }
        let factor = sigma / (sigma * sigma + lambda);
        let coeff = u.column(i).dot(rhs) * factor;
        x += v_t.row(i).transpose() * coeff;
    }
    Ok(x)
}

/// Minimum-norm least-squares solution of `m x = rhs` (SVD pseudo-inverse).
pub fn min_norm_lstsq(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if m.nrows() != rhs.len() {
        return Err(Error::Dimension(format!(
            "design matrix has {} rows but rhs has {} entries",
            m.nrows(),
            rhs.len()
        )));
    }
    let svd = m.clone().svd(true, true);
    svd.solve(rhs, 1e-12 * svd.singular_values.max().max(1.0))
        .map_err(|e| Error::Numerical(e.to_string()))
}

/// `count` logarithmically spaced values between `lo` and `hi` (inclusive).
pub fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && count >= 2);
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (llo + (lhi - llo) * i as f64 / (count - 1) as f64).exp())
        .collect()
}
