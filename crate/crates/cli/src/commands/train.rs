use std::time::Instant;

use msf_core::model::load_checkpoint;
use msf_core::train::{train_to_dir, StepMetrics, TrainObserver, Trainer};
use msf_core::Error;

use crate::config::RunConfig;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::rundir::{checkpoints, write_file, RunLock, ECHO_FILE};

/// Prints one line per epoch.
struct EpochSummary {
    start: Instant,
    loss: f64,
    purity: f64,
    purity_n: usize,
    steps: usize,
    last: Option<StepMetrics>,
}

impl EpochSummary {
    fn new() -> Self {
        Self { start: Instant::now(), loss: 0.0, purity: 0.0, purity_n: 0, steps: 0, last: None }
    }
}

impl TrainObserver for EpochSummary {
    fn on_step(&mut self, m: &StepMetrics) -> msf_core::Result<()> {
        self.loss += m.loss as f64;
        if let Some(p) = m.purity {
            self.purity += p;
            self.purity_n += 1;
        }
        self.steps += 1;
        self.last = Some(m.clone());
        Ok(())
    }

    fn on_epoch_end(&mut self, epoch: usize, trainer: &Trainer) -> msf_core::Result<()> {
        let Some(last) = self.last.take() else {
            return Ok(());
        };
        let purity = if self.purity_n > 0 {
            format!("{:.2}", 100.0 * self.purity / self.purity_n as f64)
        } else {
            "-".into()
        };
        println!(
            "epoch {}/{} step {} loss {:.4} lr {:.5} bank {}/{} nn_sim {:.4} purity {} elapsed {:.1}s",
            epoch + 1,
            trainer.config.epochs,
            trainer.step(),
            self.loss / self.steps.max(1) as f64,
            last.lr,
            last.bank_fill,
            trainer.bank.capacity(),
            last.mean_nn_sim,
            purity,
            self.start.elapsed().as_secs_f64()
        );
        *self = Self { start: self.start, ..Self::new() };
        Ok(())
    }
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    // Inputs first, so a bad dataset leaves nothing on disk.
    let data = dataset::load(&cfg.dataset)?;
    let train = &data.train;
    let dir = cfg.run_dir();
    let existing = checkpoints(&dir)?;
    if !cfg.resume && !existing.is_empty() {
        return Err(CliError::usage(format!(
            "{} already holds checkpoints; set train.resume=true or pick another run.name",
            dir.display()
        )));
    }
    let mut trainer = match existing.last() {
        Some((_, path)) if cfg.resume => {
            println!("resuming from {}", path.display());
            Trainer::from_checkpoint(cfg.train.clone(), load_checkpoint(path)?, train.len())?
        }
        _ => Trainer::new(cfg.train.clone(), train.pixel_stats()?, train.len())?,
    };
    let _lock = RunLock::acquire(&dir)?;
    write_file(&dir.join(ECHO_FILE), &cfg.echo())?;
    println!(
        "training {} on {} images: {} steps of batch {}, k={}, m={}, views {}",
        cfg.name,
        train.len(),
        trainer.total_steps(),
        cfg.train.batch_size,
        cfg.train.k,
        cfg.train.ema_momentum,
        cfg.train.strategy
    );
    let mut summary = EpochSummary::new();
    match train_to_dir(&mut trainer, train, &dir, &mut summary) {
        Ok(out) => {
            println!("final checkpoint {}", out.final_checkpoint.display());
            Ok(())
        }
        Err(e @ Error::NonFiniteLoss { .. }) => Err(CliError::runtime(format!(
            "{e}; training stopped before updating parameters, {} keeps the metrics and checkpoints written so far",
            dir.display()
        ))),
        Err(e) => Err(e.into()),
    }
}
