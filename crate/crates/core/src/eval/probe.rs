use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::tensor::nn::Linear;
use crate::tensor::{sgd_momentum_step, OptimizerState, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Epochs at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 40,
            batch_size: 256,
            weight_decay: 1e-4,
            momentum: 0.9,
            milestones: vec![15, 30],
            gamma: 0.1,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(drops as i32)
    }
}

/// Per-dimension affine fitted on the train split: `(x - mean) * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl Standardizer {
    /// Zero-variance dimensions get scale 1.
    pub fn fit(set: &FeatureSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Data("cannot standardize an empty feature set".into()));
        }
        let (n, d) = (set.len() as f64, set.dim);
        let mut sum = vec![0f64; d];
        for r in set.features.chunks(d) {
            for (s, &x) in sum.iter_mut().zip(r) {
                *s += x as f64;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut var = vec![0f64; d];
        for r in set.features.chunks(d) {
            for ((v, &x), &m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x as f64 - m).powi(2);
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-12 {
                    (1.0 / sd) as f32
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            scale,
        })
    }

    pub fn apply(&self, set: &FeatureSet) -> Result<Vec<f32>> {
        if set.dim != self.mean.len() {
            return Err(Error::shape("standardize", &[self.mean.len()], &[set.dim]));
        }
        Ok(set
            .features
            .chunks(set.dim)
            .flat_map(|r| r.iter().zip(&self.mean).zip(&self.scale).map(|((&x, &m), &s)| (x - m) * s))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn accuracy(layer: &Linear<f32>, x: &[f32], labels: &[u32], dim: usize) -> Result<f64> {
    let mut correct = 0;
    for (xb, lb) in x.chunks(1024 * dim).zip(labels.chunks(1024)) {
        let logits = layer.infer(&Tensor::new(&[lb.len(), dim], xb.to_vec())?)?;
        let c = logits.shape()[1];
        for (row, &l) in logits.data().chunks(c).zip(lb) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best as u32 == l);
        }
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Standardizes both splits with train statistics and fits one softmax
/// linear layer on the frozen features.
pub fn linear_probe(train: &FeatureSet, test: &FeatureSet, cfg: &ProbeConfig, n_classes: usize) -> Result<ProbeResult> {
    if n_classes < 2 {
        return Err(Error::Config("linear probe needs at least two classes".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("probe batch size and epochs must be positive".into()));
    }
    if let Some(&l) = train.labels.iter().chain(&test.labels).find(|&&l| l as usize >= n_classes) {
        return Err(Error::Data(format!("label {l} outside 0..{n_classes}")));
    }
    let st = Standardizer::fit(train)?;
    let xtr = st.apply(train)?;
    let xte = st.apply(test)?;
    let d = train.dim;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layer = Linear::<f32>::new(d, n_classes, &mut rng);
    let mut opt = OptimizerState::new(
        [layer.weight.len(), layer.bias.len()],
        cfg.lr as f32,
        cfg.momentum as f32,
        cfg.weight_decay as f32,
    )?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch) as f32;
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let b = idx.len();
            let mut xb = Vec::with_capacity(b * d);
            for &i in idx {
                xb.extend_from_slice(&xtr[i * d..(i + 1) * d]);
            }
            let logits = layer.forward_train(&Tensor::new(&[b, d], xb)?)?;
            // d(mean CE)/dlogits = (softmax - onehot) / b
            let mut g = logits.into_data();
            for (row, &i) in g.chunks_mut(n_classes).zip(idx) {
                let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z * b as f32;
                }
                row[train.labels[i] as usize] -= 1.0 / b as f32;
            }
            layer.weight.zero_grad();
            layer.bias.zero_grad();
            layer.backward(&Tensor::new(&[b, n_classes], g)?)?;
            sgd_momentum_step(&mut [&mut layer.weight, &mut layer.bias], &mut opt, lr)?;
        }
    }
    Ok(ProbeResult {
        train_accuracy: accuracy(&layer, &xtr, &train.labels, d)?,
        test_accuracy: accuracy(&layer, &xte, &test.labels, d)?,
    })
}
