use crate::augment::ViewStrategy;
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, StageSpec};

/// Values of `k` swept by the k-sweep preset.
pub const K_SWEEP: [usize; 6] = [1, 2, 5, 10, 20, 50];

/// Every training hyperparameter. `Default` is the desk-scale CIFAR-10
/// weak/strong preset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: ViewStrategy,
    /// Nearest neighbours per query, the query itself included.
    pub k: usize,
    pub bank_capacity: usize,
    /// Target EMA momentum `m`.
    pub ema_momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Side of the square augmented views.
    pub out_size: usize,
    /// Feed one augmented view to both encoders (collapse control).
    pub same_view: bool,
    /// Store labels in the bank so purity can be logged.
    pub track_labels: bool,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: ViewStrategy::WeakStrong,
            k: 5,
            bank_capacity: 16_384,
            ema_momentum: 0.99,
            batch_size: 256,
            epochs: 50,
            lr0: 0.05,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            out_size: 32,
            same_view: false,
            track_labels: true,
            checkpoint_every: 10,
            encoder: EncoderConfig::cifar10(),
        }
    }
}

impl TrainConfig {
    pub fn cifar10(strategy: ViewStrategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn mnist() -> Self {
        Self {
            out_size: 28,
            encoder: EncoderConfig::mnist(),
            ..Self::default()
        }
    }

    /// Full-scale hyperparameters: 200 epochs, 1.024M-entry bank, 224-pixel
    /// views and 4096/512 heads behind a 2048-wide backbone. Not meant to run
    /// on a desk machine.
    pub fn imagenet_full() -> Self {
        let stages = [256, 512, 1024, 2048]
            .into_iter()
            .map(|channels| StageSpec {
                channels,
                kernel: 4,
                stride: 2,
                pad: 1,
            })
            .collect();
        Self {
            bank_capacity: 1_024_000,
            epochs: 200,
            out_size: 224,
            checkpoint_every: 1,
            encoder: EncoderConfig {
                in_channels: 3,
                stages,
                proj_hidden: 4096,
                embed_dim: 512,
                pred_hidden: 4096,
            },
            ..Self::default()
        }
    }

    /// Desk preset once per `k` in [`K_SWEEP`].
    pub fn k_sweep() -> Vec<Self> {
        K_SWEEP
            .iter()
            .map(|&k| Self {
                k,
                ..Self::default()
            })
            .collect()
    }

    /// Looks up a preset by name.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "cifar10" | "cifar10-ws" => Self::cifar10(ViewStrategy::WeakStrong),
            "cifar10-ss" => Self::cifar10(ViewStrategy::StrongStrong),
            "cifar10-ww" => Self::cifar10(ViewStrategy::WeakWeak),
            "mnist" => Self::mnist(),
            "imagenet-full" => Self::imagenet_full(),
            other => {
                if let Some(k) = other.strip_prefix("k-sweep-").and_then(|k| k.parse().ok()) {
                    if K_SWEEP.contains(&k) {
                        return Ok(Self {
                            k,
                            ..Self::default()
                        });
                    }
                }
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (cifar10-ws, cifar10-ss, cifar10-ww, mnist, imagenet-full, k-sweep-<k>)"
                )));
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.bank_capacity < self.batch_size {
            return fail(format!(
                "bank capacity {} is smaller than the batch size {}",
                self.bank_capacity, self.batch_size
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return fail(format!("EMA momentum must lie in [0, 1], got {}", self.ema_momentum));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return fail(format!("SGD momentum must lie in [0, 1), got {}", self.sgd_momentum));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        self.encoder.validate_for_input(self.out_size)
    }
}
