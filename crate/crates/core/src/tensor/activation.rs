use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Gradient passes where the input was strictly positive; zero at the kink.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("relu_backward", x.shape(), dy.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Mean over spatial positions: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape("global_avg_pool", x.shape(), &[0, 0, 0, 0]));
    };
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::new(&[b, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, c, h, w] = input_shape else {
        return Err(Error::shape("global_avg_pool_backward", input_shape, dy.shape()));
    };
    if dy.shape() != [b, c] {
        return Err(Error::shape("global_avg_pool_backward", input_shape, dy.shape()));
    }
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut data = Vec::with_capacity(b * c * hw);
    for &g in dy.data() {
        data.extend(std::iter::repeat(g * inv).take(hw));
    }
    Tensor::new(input_shape, data)
}

/// Divides each row of `[B, D]` by `max(||row||, eps)`.
///
/// Returns the normalized rows and the per-row divisors.
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let &[b, d] = x.shape() else {
        return Err(Error::shape("l2_normalize", x.shape(), &[0, 0]));
    };
    let mut out = Vec::with_capacity(b * d);
    let mut norms = Vec::with_capacity(b);
    for row in x.data().chunks(d) {
        let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(eps);
        norms.push(n);
        out.extend(row.iter().map(|&v| v / n));
    }
    Ok((Tensor::new(&[b, d], out)?, norms))
}

/// Backward of [`l2_normalize`] given its outputs `y` and divisors.
pub fn l2_normalize_backward<T: Scalar>(
    y: &Tensor<T>,
    norms: &[T],
    dy: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let &[b, d] = y.shape() else {
        return Err(Error::shape("l2_normalize_backward", y.shape(), dy.shape()));
    };
    if dy.shape() != y.shape() || norms.len() != b {
        return Err(Error::shape("l2_normalize_backward", y.shape(), dy.shape()));
    }
    let mut dx = Vec::with_capacity(b * d);
    for ((yr, gr), &n) in y.data().chunks(d).zip(dy.data().chunks(d)).zip(norms) {
        if n > eps {
            let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
            dx.extend(yr.iter().zip(gr).map(|(&p, &q)| (q - p * dot) / n));
        } else {
            // Below the floor the divisor is a constant.
            dx.extend(gr.iter().map(|&q| q / n));
        }
    }
    Tensor::new(&[b, d], dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let x = Tensor::new(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::new(&[2], vec![-3.0f32, -0.5]).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_grad_of_sum() {
        let x = Tensor::new(&[2], vec![-1.0f64, 3.0]).unwrap();
        let g = relu_backward(&x, &Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
        let at_zero = Tensor::new(&[1], vec![0.0f64]).unwrap();
        assert_eq!(relu_backward(&at_zero, &Tensor::full(&[1], 1.0)).unwrap().data(), &[0.0]);
    }

    #[test]
    fn pooling_cases() {
        let c = Tensor::full(&[2, 3, 4, 4], 1.5f64);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 1.5));
        let z = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert_eq!(global_avg_pool(&z).unwrap().data(), &[0.0]);
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0f64, 3.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.0]);
        let g = global_avg_pool_backward(&[1, 1, 1, 2], &Tensor::full(&[1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.5, 0.5]);
    }

    #[test]
    fn normalize_cases() {
        let x = Tensor::new(&[1, 2], vec![3.0f64, 4.0]).unwrap();
        let (y, _) = l2_normalize(&x, 1e-12).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);

        let unit = Tensor::new(&[1, 3], vec![0.0f32, 0.6, 0.8]).unwrap();
        let (u, _) = l2_normalize(&unit, 1e-12).unwrap();
        for (a, b) in u.data().iter().zip(unit.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let zero = Tensor::<f32>::zeros(&[2, 4]);
        let (y0, _) = l2_normalize(&zero, 1e-12).unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.0));
    }
}
