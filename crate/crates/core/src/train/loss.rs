use crate::error::{Error, Result};
use crate::membank::NeighborSet;
use crate::tensor::Scalar;

/// `L = (1/k') Σ_j ||v − z_j||²` over the `k' = neighbors.len() / dim` rows
/// of `neighbors`, and `dL/dv = (2/k') Σ_j (v − z_j)`.
///
/// The gradient is with respect to the normalized `v`; the neighbours are
/// constants.
pub fn msf_loss<T: Scalar>(v: &[T], neighbors: &[T], dim: usize) -> Result<(T, Vec<T>)> {
    if dim == 0 || v.len() != dim || neighbors.len() % dim != 0 {
        return Err(Error::shape("msf_loss", &[v.len()], &[neighbors.len(), dim]));
    }
    let k = neighbors.len() / dim;
    if k == 0 {
        return Err(Error::Contract("msf_loss needs at least one neighbour".into()));
    }
    let kt = T::from_usize(k).expect("count fits");
    let mut total = T::zero();
    let mut grad = vec![T::zero(); dim];
    for z in neighbors.chunks(dim) {
        for ((g, &a), &b) in grad.iter_mut().zip(v).zip(z) {
            let d = a - b;
            total = total + d * d;
            *g = *g + d;
        }
    }
    let two = T::one() + T::one();
    grad.iter_mut().for_each(|g| *g = *g * two / kt);
    Ok((total / kt, grad))
}

/// [`msf_loss`] against a bank search result.
pub fn msf_loss_for(v: &[f32], neighbors: &NeighborSet) -> Result<(f32, Vec<f32>)> {
    if neighbors.dim != v.len() {
        return Err(Error::Config(format!(
            "embedding dim {} does not match bank dim {}",
            v.len(),
            neighbors.dim
        )));
    }
    msf_loss(v, &neighbors.embeddings, neighbors.dim)
}

/// `||v − u||²`, the single-target objective.
pub fn byol_reference_loss<T: Scalar>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + (b - a) * (b - a))
}
