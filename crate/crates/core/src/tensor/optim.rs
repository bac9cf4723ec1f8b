use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
///
/// ```text
/// g' = g + weight_decay * theta
/// v  = momentum * v + g'
/// theta -= lr * v
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub velocity: Vec<Vec<T>>,
    pub lr0: T,
    pub momentum: T,
    pub weight_decay: T,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero velocity buffers mirroring `shapes` (element counts).
    pub fn new(sizes: impl IntoIterator<Item = usize>, lr0: T, momentum: T, weight_decay: T) -> Result<Self> {
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::Config(format!("sgd momentum must lie in [0, 1), got {momentum:?}")));
        }
        if weight_decay < T::zero() {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(Self {
            velocity: sizes.into_iter().map(|n| vec![T::zero(); n]).collect(),
            lr0,
            momentum,
            weight_decay,
        })
    }
}

/// One update over `params`, each of which must carry a gradient slot.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: T,
) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(Error::Optimizer(format!(
            "{} parameters but {} velocity buffers",
            params.len(),
            state.velocity.len()
        )));
    }
    for (i, (p, v)) in params.iter_mut().zip(state.velocity.iter_mut()).enumerate() {
        let shape = p.shape().to_vec();
        let (theta, grad) = p.data_and_grad_mut();
        let grad = grad.ok_or_else(|| Error::Optimizer(format!("parameter {i} {shape:?} has no gradient")))?;
        if v.len() != theta.len() {
            return Err(Error::Optimizer(format!(
                "parameter {i} {shape:?} has {} values but velocity has {}",
                theta.len(),
                v.len()
            )));
        }
        for ((t, &g), vel) in theta.iter_mut().zip(grad.iter()).zip(v.iter_mut()) {
            let g = g + state.weight_decay * *t;
            *vel = state.momentum * *vel + g;
            *t = *t - lr * *vel;
        }
    }
    Ok(())
}
