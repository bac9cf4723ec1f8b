//! Property tests of the differentiable operations against finite
//! differences and algebraic identities.

use msf_core::tensor::gradcheck::{numeric_gradient_with, relative_error, Stencil};
use msf_core::tensor::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, global_avg_pool, global_avg_pool_backward,
    l2_normalize, l2_normalize_backward, matmul, matmul_backward, BnMode, RunningStats, Tensor,
};
use msf_core::train::{byol_reference_loss, msf_loss};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-6;
// Gradients below this magnitude are compared in absolute terms (FD noise is ~1e-11).
const FLOOR: f64 = 1e-4;

fn fd(theta: &[f64], h: f64, f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    numeric_gradient_with(theta, h, Stencil::FivePoint, f)
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(n, rng)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn assert_close(analytic: &[f64], numeric: &[f64]) -> Result<(), TestCaseError> {
    prop_assert_eq!(analytic.len(), numeric.len());
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n, FLOOR);
        prop_assert!(e < TOL, "coordinate {}: analytic {} numeric {} (rel {})", i, a, n, e);
    }
    Ok(())
}

fn unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v = rand_vec(d, rng);
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradients(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor(&[m, k], &mut rng);
        let b = tensor(&[k, n], &mut rng);
        let r = rand_vec(m * n, &mut rng);
        let dc = Tensor::new(&[m, n], r.clone()).unwrap();
        let (da, db) = matmul_backward(&a, &b, &dc).unwrap();
        let na = fd(a.data(), H, |x| {
            dot(matmul(&Tensor::new(&[m, k], x.to_vec()).unwrap(), &b).unwrap().data(), &r)
        });
        let nb = fd(b.data(), H, |x| {
            dot(matmul(&a, &Tensor::new(&[k, n], x.to_vec()).unwrap()).unwrap().data(), &r)
        });
        assert_close(da.data(), &na)?;
        assert_close(db.data(), &nb)?;
    }

    #[test]
    fn conv_gradients(
        b in 1usize..3, c in 1usize..3, f in 1usize..3,
        geometry in prop::sample::select(vec![(5usize, 3usize, 1usize, 1usize), (6, 4, 2, 1), (4, 1, 1, 0), (7, 3, 2, 0)]),
        seed: u64,
    ) {
        let (side, kernel, stride, pad) = geometry;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor(&[b, c, side, side], &mut rng);
        let w = tensor(&[f, c, kernel, kernel], &mut rng);
        let (y, cache) = conv2d(&x, &w, stride, pad).unwrap();
        let r = rand_vec(y.len(), &mut rng);
        let dy = Tensor::new(y.shape(), r.clone()).unwrap();
        let (dx, dw) = conv2d_backward(&cache, &w, &dy).unwrap();
        let nx = fd(x.data(), H, |v| {
            dot(conv2d(&Tensor::new(x.shape(), v.to_vec()).unwrap(), &w, stride, pad).unwrap().0.data(), &r)
        });
        let nw = fd(w.data(), H, |v| {
            dot(conv2d(&x, &Tensor::new(w.shape(), v.to_vec()).unwrap(), stride, pad).unwrap().0.data(), &r)
        });
        assert_close(dx.data(), &nx)?;
        assert_close(dw.data(), &nw)?;
    }

    #[test]
    fn batchnorm_train_gradients(b in 4usize..8, c in 1usize..4, spatial in prop::sample::select(vec![0usize, 2]), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape: Vec<usize> = if spatial == 0 { vec![b, c] } else { vec![b, c, spatial, spatial] };
        let x = tensor(&shape, &mut rng);
        let gamma = Tensor::new(&[c], (0..c).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        let beta = tensor(&[c], &mut rng);
        let (rm, rv) = (vec![0.0; c], vec![1.0; c]);
        let run = RunningStats { mean: &rm, var: &rv };
        let (y, cache) = batchnorm(&x, &gamma, &beta, BnMode::Train, run, 1e-5).unwrap();
        let r = rand_vec(y.len(), &mut rng);
        let (dx, dg, db) = batchnorm_backward(&cache, &gamma, &Tensor::new(y.shape(), r.clone()).unwrap()).unwrap();
        let f = |x: &Tensor<f64>, g: &Tensor<f64>, bt: &Tensor<f64>| {
            dot(batchnorm(x, g, bt, BnMode::Train, run, 1e-5).unwrap().0.data(), &r)
        };
        assert_close(dx.data(), &fd(x.data(), H, |v| f(&Tensor::new(&shape, v.to_vec()).unwrap(), &gamma, &beta)))?;
        assert_close(&dg, &fd(gamma.data(), H, |v| f(&x, &Tensor::new(&[c], v.to_vec()).unwrap(), &beta)))?;
        assert_close(&db, &fd(beta.data(), H, |v| f(&x, &gamma, &Tensor::new(&[c], v.to_vec()).unwrap())))?;
    }

    #[test]
    fn batchnorm_eval_gradients(b in 1usize..4, c in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor(&[b, c], &mut rng);
        let gamma = tensor(&[c], &mut rng);
        let beta = tensor(&[c], &mut rng);
        let rm = rand_vec(c, &mut rng);
        let rv: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
        let run = RunningStats { mean: &rm, var: &rv };
        let (y, cache) = batchnorm(&x, &gamma, &beta, BnMode::Eval, run, 1e-5).unwrap();
        let r = rand_vec(y.len(), &mut rng);
        let (dx, _, _) = batchnorm_backward(&cache, &gamma, &Tensor::new(y.shape(), r.clone()).unwrap()).unwrap();
        let nx = fd(x.data(), H, |v| {
            dot(batchnorm(&Tensor::new(&[b, c], v.to_vec()).unwrap(), &gamma, &beta, BnMode::Eval, run, 1e-5).unwrap().0.data(), &r)
        });
        assert_close(dx.data(), &nx)?;
    }

    #[test]
    fn l2_normalize_gradients_and_unit_rows(b in 1usize..4, d in 1usize..6, scale in 0.1f64..10.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(&[b, d], rand_vec(b * d, &mut rng).into_iter().map(|v| v * scale + 0.05).collect()).unwrap();
        // The step must stay small relative to the row norm.
        for i in 0..b {
            prop_assume!(dot(x.row(i), x.row(i)).sqrt() > 0.25);
        }
        let (y, norms) = l2_normalize(&x, 1e-12).unwrap();
        for i in 0..b {
            prop_assert!((dot(y.row(i), y.row(i)).sqrt() - 1.0).abs() < 1e-12);
        }
        let r = rand_vec(b * d, &mut rng);
        let dx = l2_normalize_backward(&y, &norms, &Tensor::new(&[b, d], r.clone()).unwrap(), 1e-12).unwrap();
        let nx = fd(x.data(), H, |v| dot(l2_normalize(&Tensor::new(&[b, d], v.to_vec()).unwrap(), 1e-12).unwrap().0.data(), &r));
        assert_close(dx.data(), &nx)?;
        // Scale invariance of the forward pass.
        let x2 = Tensor::new(&[b, d], x.data().iter().map(|v| v * 3.0).collect()).unwrap();
        let (y2, _) = l2_normalize(&x2, 1e-12).unwrap();
        for (p, q) in y.data().iter().zip(y2.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn global_pool_gradients(b in 1usize..3, c in 1usize..4, side in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [b, c, side, side];
        let x = tensor(&shape, &mut rng);
        let r = rand_vec(b * c, &mut rng);
        let dx = global_avg_pool_backward(&shape, &Tensor::new(&[b, c], r.clone()).unwrap()).unwrap();
        let nx = fd(x.data(), H, |v| dot(global_avg_pool(&Tensor::new(&shape, v.to_vec()).unwrap()).unwrap().data(), &r));
        assert_close(dx.data(), &nx)?;
    }

    #[test]
    fn msf_loss_forms_and_gradient(d in 2usize..16, k in 1usize..8, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = unit(d, &mut rng);
        let z: Vec<f64> = (0..k).flat_map(|_| unit(d, &mut rng)).collect();
        let (l, g) = msf_loss(&v, &z, d).unwrap();
        prop_assert!((0.0..=4.0 + 1e-12).contains(&l));
        // Sum-of-distances equals 2 - (2/k) Σ <v, z_j>.
        let cos: f64 = z.chunks(d).map(|zj| dot(&v, zj)).sum();
        prop_assert!((l - (2.0 - 2.0 * cos / k as f64)).abs() < 1e-6);
        // Gradient is 2 (v - mean z): shifting toward the neighbour mean.
        let mean: Vec<f64> = (0..d).map(|i| z.chunks(d).map(|zj| zj[i]).sum::<f64>() / k as f64).collect();
        for i in 0..d {
            prop_assert!((g[i] - 2.0 * (v[i] - mean[i])).abs() < 1e-12);
        }
        let n = fd(&v, H, |x| msf_loss(x, &z, d).unwrap().0);
        assert_close(&g, &n)?;
        if k == 1 {
            prop_assert!((l - byol_reference_loss(&z, &v)).abs() < 1e-12);
        }
    }
}

#[test]
fn distance_cosine_identity_on_ten_thousand_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0f64;
    for i in 0..10_000 {
        let d = 2 + i % 127;
        let a = unit(d, &mut rng);
        let b = unit(d, &mut rng);
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        worst = worst.max((dist - (2.0 - 2.0 * dot(&a, &b))).abs());
    }
    assert!(worst < 1e-6, "{worst}");
}
