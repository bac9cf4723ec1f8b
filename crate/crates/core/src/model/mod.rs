//! Online/target encoder pair.
//!
//! The online side is backbone, projection head and prediction head; the
//! target side is a backbone and projection head of identical shape that
//! only ever changes through [`EncoderPair::ema_update`].

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::nn::{join, ConvBnRelu, Mlp, Module, ReluSignature, TensorKind};
use crate::tensor::{
    conv_out_size, global_avg_pool, global_avg_pool_backward, l2_normalize, l2_normalize_backward,
    BnMode, Scalar, Tensor,
};

pub use checkpoint::{
    decode_u64, encode_u64, load_checkpoint, read_archive, save_checkpoint, write_archive, Archive,
    CheckpointData, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

/// Floor for the l2 normalization divisor.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub pred_hidden: usize,
}

impl EncoderConfig {
    fn with_kernels(kernels: [usize; 4]) -> Self {
        let channels = [32, 64, 128, 256];
        Self {
            in_channels: 3,
            stages: channels
                .iter()
                .zip(kernels)
                .map(|(&c, k)| StageSpec {
                    channels: c,
                    kernel: k,
                    stride: 2,
                    pad: 1,
                })
                .collect(),
            proj_hidden: 512,
            embed_dim: 128,
            pred_hidden: 512,
        }
    }

    /// Four stride-2 stages (32, 64, 128, 256 channels) for 32x32 inputs:
    /// 32 -> 16 -> 8 -> 4 -> 2; heads 256 -> 512 -> 128 and 128 -> 512 -> 128.
    pub fn cifar10() -> Self {
        Self::with_kernels([4, 4, 4, 4])
    }

    /// Same widths for 28x28 inputs: 28 -> 14 -> 7 -> 4 -> 2.
    pub fn mnist() -> Self {
        Self::with_kernels([4, 4, 3, 4])
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// Spatial extent after each stage for a square input of `side` pixels.
    pub fn spatial_sizes(&self, side: usize) -> Result<Vec<usize>> {
        let mut s = side;
        let mut out = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            s = conv_out_size(s, st.kernel, st.stride, st.pad)?;
            out.push(s);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.in_channels > 0
            && !self.stages.is_empty()
            && self
                .stages
                .iter()
                .all(|s| s.channels > 0 && s.kernel > 0 && s.stride > 0)
            && self.proj_hidden > 0
            && self.embed_dim > 0
            && self.pred_hidden > 0;
        if !dims_ok {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Checks that inputs of `side x side` fit the stage geometry.
    pub fn validate_for_input(&self, side: usize) -> Result<()> {
        self.validate()?;
        self.spatial_sizes(side).map(drop)
    }

    /// Integer encoding stored in checkpoints.
    pub fn to_codes(&self) -> Vec<usize> {
        let mut v = vec![self.in_channels, self.stages.len()];
        for s in &self.stages {
            v.extend([s.channels, s.kernel, s.stride, s.pad]);
        }
        v.extend([self.proj_hidden, self.embed_dim, self.pred_hidden]);
        v
    }

    pub fn from_codes(codes: &[usize]) -> Result<Self> {
        let bad = || Error::Config(format!("malformed encoder description {codes:?}"));
        let (&in_channels, rest) = codes.split_first().ok_or_else(bad)?;
        let (&n, rest) = rest.split_first().ok_or_else(bad)?;
        if rest.len() != 4 * n + 3 {
            return Err(bad());
        }
        let stages = rest[..4 * n]
            .chunks(4)
            .map(|c| StageSpec {
                channels: c[0],
                kernel: c[1],
                stride: c[2],
                pad: c[3],
            })
            .collect();
        let cfg = Self {
            in_channels,
            stages,
            proj_hidden: rest[4 * n],
            embed_dim: rest[4 * n + 1],
            pred_hidden: rest[4 * n + 2],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Convolution stages followed by global average pooling.
#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub stages: Vec<ConvBnRelu<T>>,
    pooled_shape: Option<Vec<usize>>,
}

impl<T: Scalar> Backbone<T> {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut c = cfg.in_channels;
        let stages = cfg
            .stages
            .iter()
            .map(|s| {
                let layer = ConvBnRelu::new(c, s.channels, s.kernel, s.stride, s.pad, rng);
                c = s.channels;
                layer
            })
            .collect();
        Self {
            stages,
            pooled_shape: None,
        }
    }

    /// `[B, C, H, W] -> [B, feature_dim]`, pre-normalization.
    pub fn infer(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        self.infer_traced(x, mode, None)
    }

    pub fn infer_traced(&self, x: &Tensor<T>, mode: BnMode, mut trace: Option<&mut ReluSignature>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for s in &self.stages {
            h = s.infer_traced(&h, mode, trace.as_deref_mut())?;
        }
        global_avg_pool(&h)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for s in &mut self.stages {
            h = s.forward_train(&h)?;
        }
        self.pooled_shape = Some(h.shape().to_vec());
        global_avg_pool(&h)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .pooled_shape
            .take()
            .ok_or_else(|| Error::Contract("backbone backward without recorded forward".into()))?;
        let mut g = global_avg_pool_backward(&shape, dy)?;
        for s in self.stages.iter_mut().rev() {
            g = s.backward(&g)?;
        }
        Ok(g)
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
    }
}

/// Backbone plus projection head.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub backbone: Backbone<T>,
    pub projection: Mlp<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn infer(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        self.infer_traced(x, mode, None)
    }

    pub fn infer_traced(&self, x: &Tensor<T>, mode: BnMode, mut trace: Option<&mut ReluSignature>) -> Result<Tensor<T>> {
        let f = self.backbone.infer_traced(x, mode, trace.as_deref_mut())?;
        self.projection.infer_traced(&f, mode, trace)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.backbone.forward_train(x)?;
        self.projection.forward_train(&f)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let df = self.projection.backward(dy)?;
        self.backbone.backward(&df)
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.projection.visit(&join(prefix, "projection"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.projection.visit_mut(&join(prefix, "projection"), f);
    }
}

/// Gradient-trained side: encoder plus prediction head.
#[derive(Debug, Clone)]
pub struct OnlineEncoder<T> {
    pub encoder: Encoder<T>,
    pub predictor: Mlp<T>,
    normalized: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> OnlineEncoder<T> {
    /// Unit-norm prediction rows `v`, nothing recorded.
    pub fn infer(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        self.infer_traced(x, mode, None)
    }

    /// [`infer`](Self::infer) that also folds every ReLU pattern into `trace`.
    pub fn infer_traced(&self, x: &Tensor<T>, mode: BnMode, mut trace: Option<&mut ReluSignature>) -> Result<Tensor<T>> {
        let z = self.encoder.infer_traced(x, mode, trace.as_deref_mut())?;
        let p = self.predictor.infer_traced(&z, mode, trace)?;
        Ok(l2_normalize(&p, T::from_f64_lossy(NORM_EPS))?.0)
    }

    /// Train-mode forward that keeps activations for [`backward`](Self::backward).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.encoder.forward_train(x)?;
        let p = self.predictor.forward_train(&z)?;
        let (v, norms) = l2_normalize(&p, T::from_f64_lossy(NORM_EPS))?;
        self.normalized = Some((v.clone(), norms));
        Ok(v)
    }

    /// Backpropagates `dL/dv` and accumulates every online gradient.
    pub fn backward(&mut self, dv: &Tensor<T>) -> Result<()> {
        let (v, norms) = self
            .normalized
            .take()
            .ok_or_else(|| Error::Contract("online backward without recorded forward".into()))?;
        let dp = l2_normalize_backward(&v, &norms, dv, T::from_f64_lossy(NORM_EPS))?;
        let dz = self.predictor.backward(&dp)?;
        self.encoder.backward(&dz)?;
        Ok(())
    }
}

impl<T: Scalar> Module<T> for OnlineEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        self.encoder.visit(prefix, f);
        self.predictor.visit(&join(prefix, "prediction"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind)) {
        self.encoder.visit_mut(prefix, f);
        self.predictor.visit_mut(&join(prefix, "prediction"), f);
    }
}

fn strip_grads<T: Scalar>(enc: &mut Encoder<T>) {
    for (_, t, _) in enc.named_tensors_mut("") {
        let owned = std::mem::replace(t, Tensor::zeros(&[1]));
        *t = owned.detach();
    }
}

#[derive(Debug, Clone)]
pub struct EncoderPair<T = f32> {
    pub config: EncoderConfig,
    pub online: OnlineEncoder<T>,
    pub target: Encoder<T>,
    pub momentum: T,
}

impl<T: Scalar> EncoderPair<T> {
    /// Seeded online initialization; the target starts as an exact copy of
    /// the online backbone and projection.
    pub fn new(config: &EncoderConfig, momentum: T, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(momentum >= T::zero() && momentum <= T::one()) {
            return Err(Error::Config(format!("EMA momentum must lie in [0, 1], got {momentum:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config, &mut rng);
        let projection = Mlp::new(config.feature_dim(), config.proj_hidden, config.embed_dim, &mut rng);
        let predictor = Mlp::new(config.embed_dim, config.pred_hidden, config.embed_dim, &mut rng);
        let encoder = Encoder {
            backbone,
            projection,
        };
        let mut target = encoder.clone();
        strip_grads(&mut target);
        Ok(Self {
            config: config.clone(),
            online: OnlineEncoder {
                encoder,
                predictor,
                normalized: None,
            },
            target,
            momentum,
        })
    }

    /// `v = h(g(x)) / ||h(g(x))||` in train mode, recorded for backward.
    pub fn online_forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.online.forward_train(x)
    }

    pub fn online_backward(&mut self, dv: &Tensor<T>) -> Result<()> {
        self.online.backward(dv)
    }

    /// `u = f(x) / ||f(x)||` with batch statistics. Records nothing and
    /// leaves the target's running statistics alone.
    pub fn target_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.target_embed(x, BnMode::Train)
    }

    pub fn target_embed(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let z = self.target.infer(x, mode)?;
        Ok(l2_normalize(&z, T::from_f64_lossy(NORM_EPS))?.0)
    }

    /// `θ_target ← m θ_target + (1 − m) θ_online` over weights and running
    /// statistics of backbone and projection.
    pub fn ema_update(&mut self) {
        let m = self.momentum;
        let om = T::one() - m;
        let online = self.online.encoder.named_tensors("");
        let target = self.target.named_tensors_mut("");
        debug_assert_eq!(online.len(), target.len());
        for ((_, src, _), (_, dst, _)) in online.into_iter().zip(target) {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = m * *d + om * s;
            }
        }
    }

    /// Online backbone, used for evaluation.
    pub fn backbone(&self) -> &Backbone<T> {
        &self.online.encoder.backbone
    }

    /// Every tensor of both encoders, named `online.*` and `target.*`.
    pub fn named_state(&self) -> Vec<(String, &Tensor<T>, TensorKind)> {
        let mut v = self.online.named_tensors("online");
        v.extend(self.target.named_tensors("target"));
        v
    }
}
