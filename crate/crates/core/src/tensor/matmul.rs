use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices, where `op(a)`
/// is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ta: Transpose,
    b: &[T],
    tb: Transpose,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (n as isize, 1),
        Transpose::Yes => (1, k as isize),
    };
    // SAFETY: extents checked above; `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// `[M, K] x [K, N] -> [M, N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let err = || Error::shape("matmul", a.shape(), b.shape());
    let (m, k) = dims2(a).ok_or_else(err)?;
    let (k2, n) = dims2(b).ok_or_else(err)?;
    if k != k2 {
        return Err(err());
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        Transpose::No,
        b.data(),
        Transpose::No,
        T::zero(),
        out.data_mut(),
    );
    Ok(out)
}

/// Returns `(dA, dB) = (dC * B^T, A^T * dC)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let err = || Error::shape("matmul_backward", a.shape(), b.shape());
    let (m, k) = dims2(a).ok_or_else(err)?;
    let (k2, n) = dims2(b).ok_or_else(err)?;
    if k != k2 || dc.shape() != [m, n] {
        return Err(err());
    }
    let mut da = Tensor::zeros(&[m, k]);
    let mut db = Tensor::zeros(&[k, n]);
    gemm(
        m,
        n,
        k,
        T::one(),
        dc.data(),
        Transpose::No,
        b.data(),
        Transpose::Yes,
        T::zero(),
        da.data_mut(),
    );
    gemm(
        k,
        m,
        n,
        T::one(),
        a.data(),
        Transpose::Yes,
        dc.data(),
        Transpose::No,
        T::zero(),
        db.data_mut(),
    );
    Ok((da, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_left() {
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        let c = matmul(&Tensor::eye(2), &b).unwrap();
        assert_eq!(c.data(), b.data());
    }

    #[test]
    fn zero_left() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = t(&[3, 2], &[1., -2., 3.5, 4., 5., 6.]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_product() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn right_identity_is_exact() {
        let x = t(&[3, 2], &[0.5, -1.25, 3.0, 7.0, -2.0, 0.125]);
        assert_eq!(matmul(&x, &Tensor::eye(2)).unwrap().data(), x.data());
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn backward_matches_transposes() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
        let dc = t(&[2, 2], &[1., 0., 0., 1.]);
        let (da, db) = matmul_backward(&a, &b, &dc).unwrap();
        // dA = dC B^T = B^T, dB = A^T dC = A^T
        assert_eq!(da.data(), &[1., 0., 1., 0., 1., 1.]);
        assert_eq!(db.data(), &[1., 4., 2., 5., 3., 6.]);
    }
}
