mod bench;
mod eval;
mod purity;
mod train;

pub use bench::cmd_bench_bank;
pub use eval::cmd_eval;
pub use purity::cmd_purity;
pub use train::cmd_train;

use std::path::Path;

use msf_core::augment::PixelNorm;
use msf_core::data::ImageSet;
use msf_core::model::{load_checkpoint, EncoderConfig, EncoderPair};
use msf_core::train::{checkpoint_pixel_norm, init_seed};

use crate::config::{CheckpointRef, RunConfig};
use crate::error::{CliError, CliResult};
use crate::rundir::latest_checkpoint;

/// Weights a report is computed from.
pub(crate) struct LoadedModel {
    pub pair: EncoderPair<f32>,
    pub norm: PixelNorm,
    pub source: String,
}

fn describe(c: &EncoderConfig) -> String {
    let stages: Vec<String> = c.stages.iter().map(|s| format!("{}:{}:{}:{}", s.channels, s.kernel, s.stride, s.pad)).collect();
    format!(
        "in_channels={} stages={} proj_hidden={} embed_dim={} pred_hidden={}",
        c.in_channels,
        stages.join(","),
        c.proj_hidden,
        c.embed_dim,
        c.pred_hidden
    )
}

/// Checks that an encoder can read `side`-pixel images of `data` and matches
/// the configured architecture.
fn check_model(expected: &EncoderConfig, actual: &EncoderConfig, side: usize, what: &str) -> CliResult<()> {
    if expected != actual {
        return Err(CliError::runtime(format!(
            "{what} has incompatible dimensions: expected {}, actual {}",
            describe(expected),
            describe(actual)
        )));
    }
    if actual.in_channels != 3 {
        return Err(CliError::runtime(format!(
            "{what} expects {} input channels, data has 3",
            actual.in_channels
        )));
    }
    actual
        .validate_for_input(side)
        .map_err(|e| CliError::runtime(format!("{what} cannot read {side}x{side} inputs: {e}")))
}

pub(crate) fn load_model(cfg: &RunConfig, which: &CheckpointRef, train: &ImageSet, side: usize) -> CliResult<LoadedModel> {
    let expected = &cfg.train.encoder;
    match which {
        CheckpointRef::RandomInit => {
            check_model(expected, expected, side, "random-init model")?;
            let pair = EncoderPair::new(expected, cfg.train.ema_momentum as f32, init_seed(cfg.train.seed))?;
            Ok(LoadedModel { pair, norm: train.pixel_stats()?, source: "random-init".into() })
        }
        CheckpointRef::Latest => load_file(expected, &latest_checkpoint(&cfg.run_dir())?, train, side),
        CheckpointRef::Path(p) => {
            if !p.is_file() {
                return Err(CliError::usage(format!("checkpoint {} not found", p.display())));
            }
            load_file(expected, p, train, side)
        }
    }
}

fn load_file(expected: &EncoderConfig, path: &Path, train: &ImageSet, side: usize) -> CliResult<LoadedModel> {
    let ckpt = load_checkpoint(path)?;
    let what = format!("checkpoint {}", path.display());
    check_model(expected, &ckpt.pair.config, side, &what)?;
    let norm = match checkpoint_pixel_norm(&ckpt)? {
        Some(n) => n,
        None => train.pixel_stats()?,
    };
    Ok(LoadedModel { pair: ckpt.pair, norm, source: path.display().to_string() })
}
