use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::loss::msf_loss_for;
use crate::augment::{batch_tensor, make_view_pair, Image, PixelNorm};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::membank::MemoryBank;
use crate::model::{decode_u64, encode_u64, Archive, CheckpointData, EncoderPair, NamedTensor};
use crate::tensor::nn::Module;
use crate::tensor::{cosine_lr_at, sgd_momentum_step, OptimizerState, Tensor};

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub loss: f32,
    pub lr: f64,
    pub bank_fill: usize,
    /// Mean cosine similarity over every realized neighbour, self included.
    pub mean_nn_sim: f32,
    /// Fraction of non-self neighbours sharing the query's label.
    pub purity: Option<f64>,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,epoch,loss,lr,bank_fill,mean_nn_sim,purity";

    pub fn csv_row(&self) -> String {
        let purity = self.purity.map(|p| p.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.loss, self.lr, self.bank_fill, self.mean_nn_sim, purity
        )
    }
}

/// Per-sample quantities of the most recent step, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDetail {
    pub dim: usize,
    /// Target embeddings, `B x dim`.
    pub u: Vec<f32>,
    /// Online predictions, `B x dim`.
    pub v: Vec<f32>,
    pub losses: Vec<f32>,
    pub neighbor_counts: Vec<usize>,
}

/// Callbacks from [`Trainer::run`].
pub trait TrainObserver {
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects every step's metrics in memory.
#[derive(Debug, Default)]
pub struct MetricsLog(pub Vec<StepMetrics>);

impl TrainObserver for MetricsLog {
    fn on_step(&mut self, m: &StepMetrics) -> Result<()> {
        self.0.push(m.clone());
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix(splitmix(a) ^ b)
}

const DOMAIN_INIT: u64 = 1;
const DOMAIN_SHUFFLE: u64 = 2;
const DOMAIN_VIEWS: u64 = 3;

/// Seed of the model initialization for run seed `seed`.
pub fn init_seed(seed: u64) -> u64 {
    mix(seed, DOMAIN_INIT)
}

/// Augmentation seed of dataset image `index` in `epoch`.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    mix(mix(mix(seed, DOMAIN_VIEWS), epoch as u64), index as u64)
}

/// Visiting order of the dataset in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, DOMAIN_SHUFFLE));
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// The input normalization a training run stored in its checkpoint.
pub fn checkpoint_pixel_norm(ckpt: &CheckpointData) -> Result<Option<PixelNorm>> {
    let Some(pn) = ckpt.extra.get("data.pixel_norm") else {
        return Ok(None);
    };
    if pn.data.len() != 6 {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: "data.pixel_norm must hold 6 values".into(),
        });
    }
    let d = &pn.data;
    PixelNorm::new([d[0], d[1], d[2]], [d[3], d[4], d[5]]).map(Some)
}

/// Parameters, optimizer, bank and step counter of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub pair: EncoderPair<f32>,
    pub optimizer: OptimizerState<f32>,
    pub bank: MemoryBank,
    pub norm: PixelNorm,
    step: u64,
    total_steps: u64,
    steps_per_epoch: usize,
    last: Option<StepDetail>,
}

impl Trainer {
    /// Fresh run over `train_len` images; incomplete final batches are dropped.
    pub fn new(config: TrainConfig, norm: PixelNorm, train_len: usize) -> Result<Self> {
        config.validate()?;
        let steps_per_epoch = train_len / config.batch_size;
        if steps_per_epoch == 0 {
            return Err(Error::Config(format!(
                "{train_len} training images do not fill one batch of {}",
                config.batch_size
            )));
        }
        let mut pair = EncoderPair::new(&config.encoder, config.ema_momentum as f32, init_seed(config.seed))?;
        let sizes: Vec<usize> = pair.online.params_mut().iter().map(|p| p.len()).collect();
        let optimizer = OptimizerState::new(
            sizes,
            config.lr0 as f32,
            config.sgd_momentum as f32,
            config.weight_decay as f32,
        )?;
        let bank = MemoryBank::new(config.bank_capacity, config.encoder.embed_dim, config.track_labels)?;
        Ok(Self {
            total_steps: (steps_per_epoch * config.epochs) as u64,
            config,
            pair,
            optimizer,
            bank,
            norm,
            step: 0,
            steps_per_epoch,
            last: None,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn epoch(&self) -> usize {
        (self.step / self.steps_per_epoch as u64) as usize
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn last_detail(&self) -> Option<&StepDetail> {
        self.last.as_ref()
    }

    #[allow(clippy::type_complexity)]
    fn views(&self, images: &[Image], seeds: &[u64]) -> Result<(Vec<Image>, Vec<Image>)> {
        let (strategy, out, same) = (self.config.strategy, self.config.out_size, self.config.same_view);
        let pairs: Vec<(Image, Image)> = images
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(img, &s)| {
                let (t1, t2) = make_view_pair(img, strategy, &mut ChaCha8Rng::seed_from_u64(s), out)?;
                Ok(if same { (t2.clone(), t2) } else { (t1, t2) })
            })
            .collect::<Result<_>>()?;
        Ok(pairs.into_iter().unzip())
    }

    /// One optimization step on `images`; `seeds[i]` drives both views of
    /// image `i`. `labels` feed only the bank's purity diagnostic.
    pub fn train_step(&mut self, images: &[Image], labels: Option<&[u32]>, seeds: &[u64]) -> Result<StepMetrics> {
        let b = images.len();
        if b < 2 {
            return Err(Error::BatchSize {
                op: "train_step",
                min: 2,
                got: b,
            });
        }
        if seeds.len() != b || labels.is_some_and(|l| l.len() != b) {
            return Err(Error::Contract("images, seeds and labels differ in length".into()));
        }
        if self.step >= self.total_steps {
            return Err(Error::Schedule {
                step: self.step as usize,
                total: self.total_steps as usize,
            });
        }
        let epoch = self.epoch();
        let lr = cosine_lr_at(self.step as usize, self.total_steps as usize, self.config.lr0)?;

        let (t1, t2) = self.views(images, seeds)?;
        let x1 = batch_tensor(&t1, &self.norm)?;
        let x2 = batch_tensor(&t2, &self.norm)?;

        let u = self.pair.target_forward(&x1)?;
        let dim = u.shape()[1];
        if dim != self.bank.dim() {
            return Err(Error::Config(format!(
                "target embedding dim {dim} does not match bank dim {}",
                self.bank.dim()
            )));
        }
        let non_finite = |rows: &[f32]| -> Vec<usize> {
            (0..b).filter(|&i| rows[i * dim..(i + 1) * dim].iter().any(|x| !x.is_finite())).collect()
        };
        // A diverged target would make every loss non-finite; stop before it
        // reaches the bank.
        let bad = non_finite(u.data());
        if !bad.is_empty() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                epoch,
                batch: (self.step % self.steps_per_epoch as u64) as usize,
                samples: bad,
            });
        }
        let cap = self.bank.capacity();
        let own_slot: Vec<usize> = (0..b).map(|i| (self.bank.head() + i) % cap).collect();
        let bank_labels = if self.bank.has_labels() { labels } else { None };
        self.bank.push_batch(u.data(), bank_labels)?;
        let neighbors = self.bank.topk_batch(u.data(), self.config.k)?;

        let v = self.pair.online_forward(&x2)?;
        let mut losses = Vec::with_capacity(b);
        let mut dv = Vec::with_capacity(b * dim);
        let scale = 1.0 / b as f32;
        for (i, set) in neighbors.iter().enumerate() {
            let (l, g) = msf_loss_for(v.row(i), set)?;
            losses.push(l);
            dv.extend(g.into_iter().map(|g| g * scale));
        }
        let loss = losses.iter().sum::<f32>() * scale;
        if !loss.is_finite() {
            let bad: Vec<usize> = (0..b).filter(|&i| !losses[i].is_finite()).collect();
            return Err(Error::NonFiniteLoss {
                step: self.step,
                epoch,
                batch: (self.step % self.steps_per_epoch as u64) as usize,
                samples: bad,
            });
        }

        self.pair.online.zero_grad();
        self.pair.online_backward(&Tensor::new(&[b, dim], dv)?)?;
        sgd_momentum_step(&mut self.pair.online.params_mut(), &mut self.optimizer, lr as f32)?;
        self.pair.ema_update();

        let sims: Vec<f32> = neighbors.iter().flat_map(|s| s.similarities.iter().copied()).collect();
        let mean_nn_sim = sims.iter().sum::<f32>() / sims.len() as f32;
        let purity = labels.filter(|_| self.bank.has_labels()).and_then(|labels| {
            let (mut agree, mut total) = (0usize, 0usize);
            for (i, set) in neighbors.iter().enumerate() {
                for &j in set.indices.iter().filter(|&&j| j != own_slot[i]) {
                    total += 1;
                    agree += usize::from(self.bank.label(j) == Some(labels[i]));
                }
            }
            (total > 0).then(|| agree as f64 / total as f64)
        });

        self.last = Some(StepDetail {
            dim,
            u: u.into_data(),
            v: v.into_data(),
            losses,
            neighbor_counts: neighbors.iter().map(|s| s.len()).collect(),
        });
        let metrics = StepMetrics {
            step: self.step,
            epoch,
            loss,
            lr,
            bank_fill: self.bank.fill(),
            mean_nn_sim,
            purity,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Trains until the schedule ends (or `max_steps` more steps have run).
    pub fn run(&mut self, data: &ImageSet, observer: &mut dyn TrainObserver, max_steps: Option<u64>) -> Result<()> {
        let expected = data.len() / self.config.batch_size;
        if expected != self.steps_per_epoch {
            return Err(Error::Config(format!(
                "dataset gives {expected} steps per epoch, run was set up for {}",
                self.steps_per_epoch
            )));
        }
        let stop = max_steps.map_or(self.total_steps, |m| (self.step + m).min(self.total_steps));
        let bs = self.config.batch_size;
        let mut order: Option<(usize, Vec<usize>)> = None;
        while self.step < stop {
            let epoch = self.epoch();
            if order.as_ref().map_or(true, |(e, _)| *e != epoch) {
                order = Some((epoch, epoch_order(self.config.seed, epoch, data.len())));
            }
            let pos = (self.step % self.steps_per_epoch as u64) as usize;
            let idx = &order.as_ref().expect("set above").1[pos * bs..(pos + 1) * bs];
            let images: Vec<Image> = idx.par_iter().map(|&i| data.image(i)).collect();
            let labels: Vec<u32> = idx.iter().map(|&i| data.label(i)).collect();
            let seeds: Vec<u64> = idx.iter().map(|&i| sample_seed(self.config.seed, epoch, i)).collect();
            let metrics = match self.train_step(&images, Some(&labels), &seeds) {
                Err(Error::NonFiniteLoss { step, epoch, batch, samples }) => {
                    return Err(Error::NonFiniteLoss {
                        step,
                        epoch,
                        batch,
                        samples: samples.into_iter().map(|s| idx[s]).collect(),
                    })
                }
                r => r?,
            };
            observer.on_step(&metrics)?;
            if pos + 1 == self.steps_per_epoch {
                observer.on_epoch_end(epoch, self)?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> CheckpointData {
        let mut extra = Archive::default();
        let (slots, labels, seq, fill, head, pushed) = self.bank.raw_parts();
        let (cap, dim) = (self.bank.capacity(), self.bank.dim());
        extra.push(NamedTensor::new("bank.slots", &[cap, dim], slots.to_vec()));
        extra.push(NamedTensor::new("bank.seq", &[cap, 4], seq.iter().flat_map(|&s| encode_u64(s)).collect()));
        if let Some(l) = labels {
            extra.push(NamedTensor::vector("bank.labels", l.iter().map(|&l| l as f32).collect()));
        }
        let cursor = [fill as u64, head as u64, pushed].iter().flat_map(|&c| encode_u64(c)).collect();
        extra.push(NamedTensor::new("bank.cursor", &[3, 4], cursor));
        let n = &self.norm;
        extra.push(NamedTensor::vector("data.pixel_norm", n.mean.iter().chain(&n.std).copied().collect()));
        extra.push(NamedTensor::vector("train.total_steps", encode_u64(self.total_steps)));
        CheckpointData {
            pair: self.pair.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            seed: self.config.seed,
            extra,
        }
    }

    /// Rebuilds a trainer from a checkpoint written by [`to_checkpoint`](Self::to_checkpoint).
    /// `config` must describe the same run.
    pub fn from_checkpoint(config: TrainConfig, ckpt: CheckpointData, train_len: usize) -> Result<Self> {
        let mut t = Self::new(config, PixelNorm::IDENTITY, train_len)?;
        let bad = |m: String| Error::Checkpoint { offset: 0, msg: m };
        if ckpt.seed != t.config.seed {
            return Err(bad(format!("checkpoint seed {} differs from configured {}", ckpt.seed, t.config.seed)));
        }
        if ckpt.pair.config != t.config.encoder {
            return Err(bad("checkpoint encoder differs from configuration".into()));
        }
        let total = decode_u64(&ckpt.extra.require("train.total_steps")?.data)?;
        if total != t.total_steps || ckpt.step > total {
            return Err(bad(format!("checkpoint schedule of {total} steps differs from configured {}", t.total_steps)));
        }
        if ckpt.optimizer.velocity.len() != t.optimizer.velocity.len() {
            return Err(bad("optimizer state does not match model".into()));
        }
        let slots = ckpt.extra.require("bank.slots")?;
        let [cap, dim] = slots.shape[..] else {
            return Err(bad("bank.slots must be rank 2".into()));
        };
        let seq = ckpt.extra.require("bank.seq")?;
        let seq: Vec<u64> = seq.data.chunks(4).map(decode_u64).collect::<Result<_>>()?;
        let labels = ckpt
            .extra
            .get("bank.labels")
            .map(|l| l.data.iter().map(|&x| x as u32).collect());
        let cursor = &ckpt.extra.require("bank.cursor")?.data;
        if cursor.len() != 12 {
            return Err(bad("bank.cursor must hold 3 values".into()));
        }
        let c: Vec<u64> = cursor.chunks(4).map(decode_u64).collect::<Result<_>>()?;
        let bank = MemoryBank::from_raw_parts(cap, dim, slots.data.clone(), labels, seq, c[0] as usize, c[1] as usize, c[2])
            .map_err(|e| bad(e.to_string()))?;
        if bank.capacity() != t.config.bank_capacity || bank.has_labels() != t.config.track_labels {
            return Err(bad("checkpoint bank differs from configuration".into()));
        }
        t.norm = checkpoint_pixel_norm(&ckpt)?.ok_or_else(|| bad("missing data.pixel_norm".into()))?;
        let mut pair = ckpt.pair;
        pair.momentum = t.config.ema_momentum as f32;
        t.pair = pair;
        t.optimizer = ckpt.optimizer;
        t.bank = bank;
        t.step = ckpt.step;
        Ok(t)
    }
}
