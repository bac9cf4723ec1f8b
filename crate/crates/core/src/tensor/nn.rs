//! Stateful layers built on the tensor operations.
//!
//! Every layer offers three entry points:
//! - `infer(&self, x, mode)`: pure forward pass, nothing recorded;
//! - `forward_train(&mut self, x)`: batch statistics, running-stat update,
//!   activations kept for the backward pass;
//! - `backward(&mut self, dy)`: accumulates parameter gradients and returns
//!   the input gradient.

use rand::Rng;

use super::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, gemm, relu, relu_backward,
    BatchNormCache, BnMode, Conv2dCache, RunningStats, Scalar, Tensor, Transpose,
};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_RATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Trained by the optimizer.
    Param,
    /// Running statistics.
    Buffer,
}

/// Named access to a layer's tensors, in a fixed order.
pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind));
    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind),
    );

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>, TensorKind)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t, k| out.push((n, t, k)));
        out
    }

    fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>, TensorKind)> {
        let mut out = Vec::new();
        self.visit_mut(prefix, &mut |n, t, k| out.push((n, t, k)));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.named_tensors_mut("")
            .into_iter()
            .filter(|(_, _, k)| *k == TensorKind::Param)
            .map(|(_, t, _)| t)
            .collect()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape product").with_grad()
}

/// Fully connected layer `y = x W + b`, `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_init(&[inputs, outputs], inputs, rng),
            bias: uniform_init(&[outputs], inputs, rng),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let &[b, d] = x.shape() else {
            return Err(Error::shape("linear", x.shape(), self.weight.shape()));
        };
        let &[d2, o] = self.weight.shape() else { unreachable!() };
        if d != d2 {
            return Err(Error::shape("linear", x.shape(), self.weight.shape()));
        }
        let mut out = Vec::with_capacity(b * o);
        for _ in 0..b {
            out.extend_from_slice(self.bias.data());
        }
        gemm(
            b,
            d,
            o,
            T::one(),
            x.data(),
            Transpose::No,
            self.weight.data(),
            Transpose::No,
            T::one(),
            &mut out,
        );
        Tensor::new(&[b, o], out)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone().detach());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Contract("linear backward without recorded forward".into()))?;
        let (b, d) = (x.shape()[0], x.shape()[1]);
        let o = self.weight.shape()[1];
        if dy.shape() != [b, o] {
            return Err(Error::shape("linear_backward", dy.shape(), &[b, o]));
        }
        let mut dw = vec![T::zero(); d * o];
        gemm(d, b, o, T::one(), x.data(), Transpose::Yes, dy.data(), Transpose::No, T::zero(), &mut dw);
        self.weight.accumulate_grad(&dw)?;
        let mut db = vec![T::zero(); o];
        for row in dy.data().chunks(o) {
            db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
        }
        self.bias.accumulate_grad(&db)?;
        let mut dx = vec![T::zero(); b * d];
        gemm(b, o, d, T::one(), dy.data(), Transpose::No, self.weight.data(), Transpose::Yes, T::zero(), &mut dx);
        Tensor::new(&[b, d], dx)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        f(join(prefix, "weight"), &self.weight, TensorKind::Param);
        f(join(prefix, "bias"), &self.bias, TensorKind::Param);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind)) {
        let Self { weight, bias, .. } = self;
        f(join(prefix, "weight"), weight, TensorKind::Param);
        f(join(prefix, "bias"), bias, TensorKind::Param);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            cache: None,
        }
    }

    fn eps() -> T {
        T::from_f64_lossy(BN_EPS)
    }

    pub fn infer(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let stats = RunningStats {
            mean: self.running_mean.data(),
            var: self.running_var.data(),
        };
        Ok(batchnorm(x, &self.gamma, &self.beta, mode, stats, Self::eps())?.0)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let stats = RunningStats {
            mean: self.running_mean.data(),
            var: self.running_var.data(),
        };
        let (y, cache) = batchnorm(x, &self.gamma, &self.beta, BnMode::Train, stats, Self::eps())?;
        cache.update_running(
            self.running_mean.data_mut(),
            self.running_var.data_mut(),
            T::from_f64_lossy(BN_RATE),
        );
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Contract("batchnorm backward without recorded forward".into()))?;
        let (dx, dg, db) = batchnorm_backward(&cache, &self.gamma, dy)?;
        self.gamma.accumulate_grad(&dg)?;
        self.beta.accumulate_grad(&db)?;
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        f(join(prefix, "gamma"), &self.gamma, TensorKind::Param);
        f(join(prefix, "beta"), &self.beta, TensorKind::Param);
        f(join(prefix, "running_mean"), &self.running_mean, TensorKind::Buffer);
        f(join(prefix, "running_var"), &self.running_var, TensorKind::Buffer);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind)) {
        let Self {
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } = self;
        f(join(prefix, "gamma"), gamma, TensorKind::Param);
        f(join(prefix, "beta"), beta, TensorKind::Param);
        f(join(prefix, "running_mean"), running_mean, TensorKind::Buffer);
        f(join(prefix, "running_var"), running_var, TensorKind::Buffer);
    }
}

/// Running hash of which ReLU inputs were positive: identifies the smooth
/// piece of a ReLU network an evaluation landed on.
#[derive(Debug, Clone, Default)]
pub struct ReluSignature(crc32fast::Hasher);

impl ReluSignature {
    pub fn absorb<T: Scalar>(&mut self, z: &Tensor<T>) {
        let bits: Vec<u8> = z
            .data()
            .chunks(8)
            .map(|c| c.iter().enumerate().fold(0u8, |b, (i, &v)| b | (u8::from(v > T::zero()) << i)))
            .collect();
        self.0.update(&bits);
    }

    pub fn finish(self) -> u32 {
        self.0.finalize()
    }
}

fn traced_relu<T: Scalar>(z: &Tensor<T>, trace: Option<&mut ReluSignature>) -> Tensor<T> {
    if let Some(t) = trace {
        t.absorb(z);
    }
    relu(z)
}

/// Bias-free convolution followed by batchnorm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T> {
    pub weight: Tensor<T>,
    pub bn: BatchNorm<T>,
    pub stride: usize,
    pub pad: usize,
    conv_cache: Option<Conv2dCache<T>>,
    pre_act: Option<Tensor<T>>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: uniform_init(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bn: BatchNorm::new(out_channels),
            stride,
            pad,
            conv_cache: None,
            pre_act: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        self.infer_traced(x, mode, None)
    }

    pub fn infer_traced(&self, x: &Tensor<T>, mode: BnMode, trace: Option<&mut ReluSignature>) -> Result<Tensor<T>> {
        let (y, _) = conv2d(x, &self.weight, self.stride, self.pad)?;
        Ok(traced_relu(&self.bn.infer(&y, mode)?, trace))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = conv2d(x, &self.weight, self.stride, self.pad)?;
        self.conv_cache = Some(cache);
        let z = self.bn.forward_train(&y)?;
        let out = relu(&z);
        self.pre_act = Some(z);
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (Some(z), Some(cache)) = (self.pre_act.take(), self.conv_cache.take()) else {
            return Err(Error::Contract("conv backward without recorded forward".into()));
        };
        let dz = relu_backward(&z, dy)?;
        let dc = self.bn.backward(&dz)?;
        let (dx, dw) = conv2d_backward(&cache, &self.weight, &dc)?;
        self.weight.accumulate_grad(dw.data())?;
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for ConvBnRelu<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        f(join(prefix, "conv.weight"), &self.weight, TensorKind::Param);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind)) {
        let Self { weight, bn, .. } = self;
        f(join(prefix, "conv.weight"), weight, TensorKind::Param);
        bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Two-layer head: linear, batchnorm, ReLU, linear.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub bn: BatchNorm<T>,
    pub fc2: Linear<T>,
    pre_act: Option<Tensor<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(inputs, hidden, rng),
            bn: BatchNorm::new(hidden),
            fc2: Linear::new(hidden, outputs, rng),
            pre_act: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        self.infer_traced(x, mode, None)
    }

    pub fn infer_traced(&self, x: &Tensor<T>, mode: BnMode, trace: Option<&mut ReluSignature>) -> Result<Tensor<T>> {
        let h = self.bn.infer(&self.fc1.infer(x)?, mode)?;
        self.fc2.infer(&traced_relu(&h, trace))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.fc1.forward_train(x)?;
        let z = self.bn.forward_train(&h)?;
        let a = relu(&z);
        self.pre_act = Some(z);
        self.fc2.forward_train(&a)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let da = self.fc2.backward(dy)?;
        let z = self
            .pre_act
            .take()
            .ok_or_else(|| Error::Contract("mlp backward without recorded forward".into()))?;
        let dz = relu_backward(&z, &da)?;
        let dh = self.bn.backward(&dz)?;
        self.fc1.backward(&dh)
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind)) {
        let Self { fc1, bn, fc2, .. } = self;
        fc1.visit_mut(&join(prefix, "fc1"), f);
        bn.visit_mut(&join(prefix, "bn"), f);
        fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
