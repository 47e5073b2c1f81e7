//! Symmetric eigendecomposition (cyclic Jacobi) and PSD square roots.

use crate::error::{Error, Result};
use crate::numerics::ops::{matmul, transpose};
use crate::numerics::Tensor;

/// Eigenvalues below this are rejected as evidence of a non-PSD input.
pub const PSD_REJECT_TOLERANCE: f64 = 1e-6;

const MAX_SWEEPS: usize = 100;

/// `A = V diag(values) V^T`; eigenvectors are the columns of `vectors`.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Tensor,
}

fn square_dim(op: &'static str, a: &Tensor) -> Result<usize> {
    match a.shape()[..] {
        [n, m] if n == m => Ok(n),
        _ => Err(Error::shape(op, format!("expected a square matrix, got {:?}", a.shape()))),
    }
}

/// Averages `A` with its transpose.
pub fn symmetrize(a: &Tensor) -> Result<Tensor> {
    let n = square_dim("symmetrize", a)?;
    let d = a.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (d[i * n + j] + d[j * n + i]);
        }
    }
    Ok(Tensor::from_raw(vec![n, n], out))
}

pub fn symmetric_eigen(a: &Tensor) -> Result<SymmetricEigen> {
    let n = square_dim("symmetric_eigen", a)?;
    a.ensure_finite("symmetric_eigen")?;
    let scale = a.max_abs().max(1.0);
    let d = a.data();
    for i in 0..n {
        for j in i + 1..n {
            if (d[i * n + j] - d[j * n + i]).abs() > 1e-8 * scale {
                return Err(Error::invalid(
                    "symmetric_eigen",
                    format!("matrix is not symmetric at ({i}, {j})"),
                ));
            }
        }
    }
    let mut m = symmetrize(a)?.into_data();
    let mut v = Tensor::identity(n)?.into_data();

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| m[i * n + i]).collect();
    Ok(SymmetricEigen {
        values,
        vectors: Tensor::from_raw(vec![n, n], v),
    })
}

/// `V diag(f(values)) V^T`.
pub fn reconstruct(eig: &SymmetricEigen, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let n = eig.values.len();
    let mut scaled = eig.vectors.clone();
    for row in scaled.data_mut().chunks_exact_mut(n) {
        for (x, &lam) in row.iter_mut().zip(&eig.values) {
            *x *= f(lam);
        }
    }
    symmetrize(&matmul(&scaled, &transpose(&eig.vectors)?)?)
}

/// Principal square root of a positive semi-definite matrix.
///
/// Eigenvalues in `[-PSD_REJECT_TOLERANCE, 0)` are treated as rounding
/// noise and clamped to zero; anything lower is rejected.
pub fn psd_sqrt(a: &Tensor) -> Result<Tensor> {
    let eig = symmetric_eigen(a)?;
    if let Some(&worst) = eig.values.iter().find(|&&l| l < -PSD_REJECT_TOLERANCE) {
        return Err(Error::NotPsd { eigenvalue: worst });
    }
    reconstruct(&eig, |l| l.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_known_spectrum() {
        let a = Tensor::matrix(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let mut vals = symmetric_eigen(&a).unwrap().values;
        vals.sort_by(f64::total_cmp);
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = Tensor::matrix(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 2.0],
        ])
        .unwrap();
        let r = psd_sqrt(&a).unwrap();
        let rr = matmul(&r, &r).unwrap();
        for (x, y) in rr.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let a = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        assert!(matches!(psd_sqrt(&a), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn rejects_asymmetric() {
        let a = Tensor::matrix(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(symmetric_eigen(&a).is_err());
    }
}
