use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::trainer::{StepMetrics, TrainObserver, Trainer};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::model::save_checkpoint;

pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step}.msf"))
}

/// Writes `metrics.csv` and periodic checkpoints into a run directory,
/// forwarding every callback to `inner`.
pub struct RunWriter<'a> {
    dir: PathBuf,
    metrics_path: PathBuf,
    metrics: BufWriter<File>,
    checkpoint_every: usize,
    last_checkpoint: Option<PathBuf>,
    inner: &'a mut dyn TrainObserver,
}

impl<'a> RunWriter<'a> {
    /// Starts a fresh log, or, when resuming at `resume_step`, keeps the rows
    /// before that step and appends after them.
    pub fn open(
        dir: &Path,
        checkpoint_every: usize,
        resume_step: Option<u64>,
        inner: &'a mut dyn TrainObserver,
    ) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics_path = dir.join(METRICS_FILE);
        let io = |e| Error::io(&metrics_path, e);
        let mut kept = vec![StepMetrics::CSV_HEADER.to_string()];
        if let Some(step) = resume_step {
            if metrics_path.exists() {
                let f = File::open(&metrics_path).map_err(io)?;
                for line in BufReader::new(f).lines().skip(1) {
                    let line = line.map_err(io)?;
                    let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                    if row_step.is_some_and(|s| s < step) {
                        kept.push(line);
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&metrics_path)
            .map_err(io)?;
        let mut metrics = BufWriter::new(file);
        for line in &kept {
            writeln!(metrics, "{line}").map_err(io)?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics_path,
            metrics,
            checkpoint_every,
            last_checkpoint: None,
            inner,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))
    }

    pub fn checkpoint(&mut self, trainer: &Trainer) -> Result<PathBuf> {
        let path = checkpoint_path(&self.dir, trainer.step());
        save_checkpoint(&path, &trainer.to_checkpoint())?;
        self.last_checkpoint = Some(path.clone());
        Ok(path)
    }

    pub fn metrics_path(&self) -> &Path {
        &self.metrics_path
    }
}

impl TrainObserver for RunWriter<'_> {
    fn on_step(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.metrics, "{}", m.csv_row()).map_err(|e| Error::io(&self.metrics_path, e))?;
        self.inner.on_step(m)
    }

    fn on_epoch_end(&mut self, epoch: usize, trainer: &Trainer) -> Result<()> {
        self.flush()?;
        if self.checkpoint_every > 0 && (epoch + 1) % self.checkpoint_every == 0 {
            self.checkpoint(trainer)?;
        }
        self.inner.on_epoch_end(epoch, trainer)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Runs `trainer` to the end of its schedule, logging into `dir`.
pub fn train_to_dir(
    trainer: &mut Trainer,
    data: &ImageSet,
    dir: &Path,
    observer: &mut dyn TrainObserver,
) -> Result<RunOutputs> {
    let resume = (trainer.step() > 0).then(|| trainer.step());
    let every = trainer.config.checkpoint_every;
    let mut writer = RunWriter::open(dir, every, resume, observer)?;
    trainer.run(data, &mut writer, None)?;
    writer.flush()?;
    let final_path = checkpoint_path(dir, trainer.step());
    let final_checkpoint = if writer.last_checkpoint.as_deref() == Some(final_path.as_path()) {
        final_path
    } else {
        writer.checkpoint(trainer)?
    };
    Ok(RunOutputs {
        final_checkpoint,
        metrics: writer.metrics_path.clone(),
    })
}
