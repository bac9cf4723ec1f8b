//! The training objective and loop.

mod config;
mod loss;
mod run;
mod trainer;

use std::path::Path;

pub use config::{TrainConfig, K_SWEEP};
pub use loss::{byol_reference_loss, msf_loss, msf_loss_for};
pub use run::{checkpoint_path, train_to_dir, RunOutputs, RunWriter, METRICS_FILE};
pub use trainer::{
    checkpoint_pixel_norm, epoch_order, init_seed, sample_seed, MetricsLog, StepDetail, StepMetrics, TrainObserver, Trainer,
};

use crate::augment::PixelNorm;
use crate::data::ImageSet;
use crate::error::Result;

/// Fresh run of `config` on `data`, writing metrics and checkpoints into `dir`.
pub fn train(
    config: TrainConfig,
    data: &ImageSet,
    norm: PixelNorm,
    dir: &Path,
    observer: &mut dyn TrainObserver,
) -> Result<(Trainer, RunOutputs)> {
    let mut trainer = Trainer::new(config, norm, data.len())?;
    let out = train_to_dir(&mut trainer, data, dir, observer)?;
    Ok((trainer, out))
}
