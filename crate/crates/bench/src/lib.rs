//! Fixtures shared by the benchmarks.

use msf_core::augment::Image;
use msf_core::membank::{random_unit, MemoryBank};
use msf_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A full bank of random unit vectors.
pub fn filled_bank(capacity: usize, dim: usize, seed: u64) -> MemoryBank {
    let mut r = rng(seed);
    let mut bank = MemoryBank::new(capacity, dim, false).expect("valid bank shape");
    for _ in 0..capacity {
        bank.push(&random_unit(dim, &mut r), None).expect("unit rows");
    }
    bank
}

pub fn unit_queries(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..n).flat_map(|_| random_unit(dim, &mut r)).collect()
}

pub fn input_batch(b: usize, side: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::new(&[b, 3, side, side], (0..b * 3 * side * side).map(|_| r.gen_range(-1.0..1.0)).collect())
        .expect("consistent shape")
}

pub fn images(n: usize, side: usize, seed: u64) -> Vec<Image> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| Image::new(side, side, (0..3 * side * side).map(|_| r.gen()).collect()).expect("consistent shape"))
        .collect()
}
