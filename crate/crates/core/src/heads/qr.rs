//! Householder QR of a square matrix.

use crate::error::Result;
use crate::tensor::Tensor;

/// `A = Q R` with `Q` orthogonal and `R` upper triangular with a non-negative
/// diagonal. The sign convention makes `Q` a deterministic function of `A`.
pub fn householder_qr(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, m) = a.dims2("householder_qr")?;
    if n != m {
        return Err(crate::error::Error::shape(
            "householder_qr",
            format!("expected a square matrix, got {n}x{m}"),
        ));
    }
    let mut r = a.data().to_vec();
    let mut q = Tensor::eye(n)?.into_data();
    let mut v = vec![0.0; n];

    for k in 0..n.saturating_sub(1) {
        let norm = (k..n).map(|i| r[i * n + k].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = r[k * n + k];
        // reflect x onto -sign(x0) * |x| e_k to avoid cancellation
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        for i in k..n {
            v[i] = r[i * n + k];
        }
        v[k] -= alpha;
        let vnorm2: f64 = (k..n).map(|i| v[i] * v[i]).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;

        // R <- (I - beta v v^T) R on rows k.., columns k..
        for j in k..n {
            let s: f64 = (k..n).map(|i| v[i] * r[i * n + j]).sum();
            let s = s * beta;
            for i in k..n {
                r[i * n + j] -= s * v[i];
            }
        }
        // Q <- Q (I - beta v v^T) on columns k..
        for i in 0..n {
            let s: f64 = (k..n).map(|j| q[i * n + j] * v[j]).sum();
            let s = s * beta;
            for j in k..n {
                q[i * n + j] -= s * v[j];
            }
        }
        for i in k + 1..n {
            r[i * n + k] = 0.0;
        }
    }

    for i in 0..n {
        if r[i * n + i] < 0.0 {
            for j in 0..n {
                r[i * n + j] = -r[i * n + j];
                q[j * n + i] = -q[j * n + i];
            }
        }
    }
    Ok((Tensor::new(&[n, n], q)?, Tensor::new(&[n, n], r)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gives_identity() {
        let (q, r) = householder_qr(&Tensor::eye(4).unwrap()).unwrap();
        assert_eq!(q, Tensor::eye(4).unwrap());
        assert_eq!(r, Tensor::eye(4).unwrap());
    }

    #[test]
    fn permutation_matrix() {
        let a = Tensor::new(&[2, 2], vec![0., 1., 1., 0.]).unwrap();
        let (q, r) = householder_qr(&a).unwrap();
        let det = q.at2(0, 0) * q.at2(1, 1) - q.at2(0, 1) * q.at2(1, 0);
        assert!((det.abs() - 1.0).abs() < 1e-12);
        assert!(r.at2(1, 0).abs() == 0.0);
        let qr = q.matmul2(&r).unwrap();
        for (x, y) in qr.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_square() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        assert!(householder_qr(&a).is_err());
    }

    #[test]
    fn zero_matrix_is_fine() {
        let (q, r) = householder_qr(&Tensor::zeros(&[3, 3]).unwrap()).unwrap();
        assert_eq!(q, Tensor::eye(3).unwrap());
        assert!(r.data().iter().all(|&x| x == 0.0));
    }
}
