//! Flat `section.key=value` run configuration.
//!
//! Defaults are the desk CIFAR-10 preset. A `train.preset` line (from the
//! file or `--set`) replaces the training defaults before any other key is
//! applied, so explicit keys always win over the preset. The effective
//! configuration echoes back as a file that reproduces the run.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msf_core::eval::{ProbeConfig, KNN_TEMPERATURE};
use msf_core::model::{EncoderConfig, StageSpec};
use msf_core::train::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Mnist,
    /// Generated gratings, for smoke runs without downloaded data.
    Synthetic,
}

impl DatasetKind {
    fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Mnist => "mnist",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "mnist" => Ok(DatasetKind::Mnist),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err("expected cifar10, mnist or synthetic".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSettings {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    /// Keep only the first n images of a split (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_side: usize,
    pub synthetic_classes: usize,
    pub synthetic_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Nn,
    Linear,
    All,
}

impl Which {
    fn as_str(self) -> &'static str {
        match self {
            Which::Nn => "nn",
            Which::Linear => "linear",
            Which::All => "all",
        }
    }

    pub fn nn(self) -> bool {
        matches!(self, Which::Nn | Which::All)
    }

    pub fn linear(self) -> bool {
        matches!(self, Which::Linear | Which::All)
    }
}

impl FromStr for Which {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nn" => Ok(Which::Nn),
            "linear" => Ok(Which::Linear),
            "all" => Ok(Which::All),
            _ => Err("expected nn, linear or all".into()),
        }
    }
}

/// Which weights a command evaluates.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointRef {
    /// Newest `ckpt_<step>.msf` in the run directory.
    Latest,
    /// Fresh weights from the configured seed.
    RandomInit,
    Path(PathBuf),
}

impl CheckpointRef {
    fn parse(s: &str) -> Self {
        match s {
            "" | "latest" => CheckpointRef::Latest,
            "random-init" => CheckpointRef::RandomInit,
            p => CheckpointRef::Path(PathBuf::from(p)),
        }
    }

    fn render(&self) -> String {
        match self {
            CheckpointRef::Latest => "latest".into(),
            CheckpointRef::RandomInit => "random-init".into(),
            CheckpointRef::Path(p) => p.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub which: Which,
    pub checkpoint: CheckpointRef,
    pub knn_k: usize,
    pub temperature: f64,
    /// Resize-free centre crop side before the backbone (0: none).
    pub center_crop: usize,
    pub probe: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PuritySettings {
    pub k: usize,
    pub checkpoint: CheckpointRef,
    pub seed: u64,
    /// Entries in the rebuilt bank (0: min(bank.capacity, train size)).
    pub bank_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub capacity: usize,
    pub dim: usize,
    pub k: usize,
    pub queries: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub runs_dir: PathBuf,
    pub resume: bool,
    pub dataset: DatasetSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub purity: PuritySettings,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "msf".into(),
            runs_dir: PathBuf::from("runs"),
            resume: false,
            dataset: DatasetSettings {
                kind: DatasetKind::Cifar10,
                path: None,
                train_limit: 0,
                test_limit: 0,
                synthetic_train: 2048,
                synthetic_test: 512,
                synthetic_side: 32,
                synthetic_classes: 10,
                synthetic_seed: 0,
            },
            train: TrainConfig::default(),
            eval: EvalSettings {
                which: Which::All,
                checkpoint: CheckpointRef::Latest,
                knn_k: 20,
                temperature: KNN_TEMPERATURE,
                center_crop: 0,
                probe: ProbeConfig::default(),
            },
            purity: PuritySettings {
                k: 5,
                checkpoint: CheckpointRef::Latest,
                seed: 0,
                bank_size: 0,
            },
            bench: BenchSettings {
                capacity: 131_072,
                dim: 512,
                k: 5,
                queries: 64,
                seed: 0,
            },
        }
    }
}

const PRESET_KEY: &str = "train.preset";

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::usage(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::usage(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> CliResult<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// `channels:kernel:stride:pad` per stage, comma separated.
fn parse_stages(key: &str, value: &str) -> CliResult<Vec<StageSpec>> {
    value
        .split(',')
        .map(|s| {
            let f: Vec<usize> = s.split(':').map(|v| parse(key, v.trim())).collect::<CliResult<_>>()?;
            match f[..] {
                [channels, kernel, stride, pad] => Ok(StageSpec { channels, kernel, stride, pad }),
                _ => Err(CliError::usage(format!("{key}: stage {s:?} is not channels:kernel:stride:pad"))),
            }
        })
        .collect()
}

fn render_stages(stages: &[StageSpec]) -> String {
    stages
        .iter()
        .map(|s| format!("{}:{}:{}:{}", s.channels, s.kernel, s.stride, s.pad))
        .collect::<Vec<_>>()
        .join(",")
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_lines(text: &str, origin: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> CliResult<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--set expects key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Defaults, then the config file, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            pairs = parse_lines(&text, &path.display().to_string())?;
        }
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> CliResult<Self> {
        let mut cfg = Self::default();
        if let Some((_, preset)) = pairs.iter().rev().find(|(k, _)| k == PRESET_KEY) {
            cfg.train = TrainConfig::preset(preset).map_err(|e| CliError::usage(e.to_string()))?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != PRESET_KEY) {
            cfg.set(k, v)?;
        }
        cfg.train
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> CliResult<()> {
        let t = &mut self.train;
        let d = &mut self.dataset;
        let e = &mut self.eval;
        match key {
            "seed" => t.seed = parse(key, v)?,
            "run.name" => {
                if v.is_empty() || v.contains(['/', '\\']) || v == "." || v == ".." {
                    return Err(CliError::usage(format!("run.name must be a plain directory name, got {v:?}")));
                }
                self.name = v.into()
            }
            "run.dir" => self.runs_dir = PathBuf::from(v),
            "train.resume" => self.resume = parse_bool(key, v)?,

            "dataset.kind" => d.kind = parse(key, v)?,
            "dataset.path" => d.path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "dataset.train_limit" => d.train_limit = parse(key, v)?,
            "dataset.test_limit" => d.test_limit = parse(key, v)?,
            "dataset.synthetic_train" => d.synthetic_train = parse(key, v)?,
            "dataset.synthetic_test" => d.synthetic_test = parse(key, v)?,
            "dataset.synthetic_side" => d.synthetic_side = parse(key, v)?,
            "dataset.synthetic_classes" => d.synthetic_classes = parse(key, v)?,
            "dataset.synthetic_seed" => d.synthetic_seed = parse(key, v)?,

            "aug.strategy" => t.strategy = parse(key, v)?,
            "aug.out_size" => t.out_size = parse(key, v)?,
            "aug.same_view" => t.same_view = parse_bool(key, v)?,
            "bank.capacity" => t.bank_capacity = parse(key, v)?,
            "bank.track_labels" => t.track_labels = parse_bool(key, v)?,
            "train.k" => t.k = parse(key, v)?,
            "train.ema_momentum" => t.ema_momentum = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.lr" => t.lr0 = parse(key, v)?,
            "train.sgd_momentum" => t.sgd_momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "model.in_channels" => t.encoder.in_channels = parse(key, v)?,
            "model.stages" => t.encoder.stages = parse_stages(key, v)?,
            "model.proj_hidden" => t.encoder.proj_hidden = parse(key, v)?,
            "model.embed_dim" => t.encoder.embed_dim = parse(key, v)?,
            "model.pred_hidden" => t.encoder.pred_hidden = parse(key, v)?,

            "eval.which" => e.which = parse(key, v)?,
            "eval.checkpoint" => e.checkpoint = CheckpointRef::parse(v),
            "eval.knn_k" => e.knn_k = parse(key, v)?,
            "eval.temperature" => e.temperature = parse(key, v)?,
            "eval.center_crop" => e.center_crop = parse(key, v)?,
            "eval.probe_lr" => e.probe.lr = parse(key, v)?,
            "eval.probe_epochs" => e.probe.epochs = parse(key, v)?,
            "eval.probe_batch" => e.probe.batch_size = parse(key, v)?,
            "eval.probe_weight_decay" => e.probe.weight_decay = parse(key, v)?,
            "eval.probe_momentum" => e.probe.momentum = parse(key, v)?,
            "eval.probe_milestones" => e.probe.milestones = parse_list(key, v)?,
            "eval.probe_gamma" => e.probe.gamma = parse(key, v)?,
            "eval.probe_seed" => e.probe.seed = parse(key, v)?,

            "purity.k" => self.purity.k = parse(key, v)?,
            "purity.checkpoint" => self.purity.checkpoint = CheckpointRef::parse(v),
            "purity.seed" => self.purity.seed = parse(key, v)?,
            "purity.bank_size" => self.purity.bank_size = parse(key, v)?,

            "bench.capacity" => self.bench.capacity = parse(key, v)?,
            "bench.dim" => self.bench.dim = parse(key, v)?,
            "bench.k" => self.bench.k = parse(key, v)?,
            "bench.queries" => self.bench.queries = parse(key, v)?,
            "bench.seed" => self.bench.seed = parse(key, v)?,
            _ => return Err(CliError::usage(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let d = &self.dataset;
        let e = &self.eval;
        let enc: &EncoderConfig = &t.encoder;
        vec![
            ("run.name", self.name.clone()),
            ("run.dir", self.runs_dir.display().to_string()),
            ("train.resume", self.resume.to_string()),
            ("seed", t.seed.to_string()),
            ("dataset.kind", d.kind.as_str().into()),
            ("dataset.path", d.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("dataset.train_limit", d.train_limit.to_string()),
            ("dataset.test_limit", d.test_limit.to_string()),
            ("dataset.synthetic_train", d.synthetic_train.to_string()),
            ("dataset.synthetic_test", d.synthetic_test.to_string()),
            ("dataset.synthetic_side", d.synthetic_side.to_string()),
            ("dataset.synthetic_classes", d.synthetic_classes.to_string()),
            ("dataset.synthetic_seed", d.synthetic_seed.to_string()),
            ("aug.strategy", t.strategy.to_string()),
            ("aug.out_size", t.out_size.to_string()),
            ("aug.same_view", t.same_view.to_string()),
            ("bank.capacity", t.bank_capacity.to_string()),
            ("bank.track_labels", t.track_labels.to_string()),
            ("train.k", t.k.to_string()),
            ("train.ema_momentum", t.ema_momentum.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr", t.lr0.to_string()),
            ("train.sgd_momentum", t.sgd_momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("model.in_channels", enc.in_channels.to_string()),
            ("model.stages", render_stages(&enc.stages)),
            ("model.proj_hidden", enc.proj_hidden.to_string()),
            ("model.embed_dim", enc.embed_dim.to_string()),
            ("model.pred_hidden", enc.pred_hidden.to_string()),
            ("eval.which", e.which.as_str().into()),
            ("eval.checkpoint", e.checkpoint.render()),
            ("eval.knn_k", e.knn_k.to_string()),
            ("eval.temperature", e.temperature.to_string()),
            ("eval.center_crop", e.center_crop.to_string()),
            ("eval.probe_lr", e.probe.lr.to_string()),
            ("eval.probe_epochs", e.probe.epochs.to_string()),
            ("eval.probe_batch", e.probe.batch_size.to_string()),
            ("eval.probe_weight_decay", e.probe.weight_decay.to_string()),
            ("eval.probe_momentum", e.probe.momentum.to_string()),
            ("eval.probe_milestones", join(&e.probe.milestones)),
            ("eval.probe_gamma", e.probe.gamma.to_string()),
            ("eval.probe_seed", e.probe.seed.to_string()),
            ("purity.k", self.purity.k.to_string()),
            ("purity.checkpoint", self.purity.checkpoint.render()),
            ("purity.seed", self.purity.seed.to_string()),
            ("purity.bank_size", self.purity.bank_size.to_string()),
            ("bench.capacity", self.bench.capacity.to_string()),
            ("bench.dim", self.bench.dim.to_string()),
            ("bench.k", self.bench.k.to_string()),
            ("bench.queries", self.bench.queries.to_string()),
            ("bench.seed", self.bench.seed.to_string()),
        ]
    }

    pub fn echo(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.name)
    }
}
