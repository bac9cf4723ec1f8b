use rayon::prelude::*;

use msf_core::augment::{augment, batch_tensor, AugmentationPolicy, Image};
use msf_core::eval::{purity, EvalRow, Split};
use msf_core::membank::MemoryBank;
use msf_core::tensor::BnMode;
use msf_core::train::{epoch_order, sample_seed};

use crate::config::RunConfig;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::rundir::{merge_eval_rows, RunLock};

use super::load_model;

/// Purity (in percent) of a bank of target embeddings of weakly augmented
/// train images.
pub fn cmd_purity(cfg: &RunConfig) -> CliResult<f64> {
    let p = &cfg.purity;
    if p.k < 2 {
        return Err(CliError::usage(format!("purity.k must be at least 2, got {}", p.k)));
    }
    let data = dataset::load(&cfg.dataset)?;
    let train = &data.train;
    let out = cfg.train.out_size;
    let model = load_model(cfg, &p.checkpoint, train, out)?;

    let mut n = match p.bank_size {
        0 => cfg.train.bank_capacity.min(train.len()),
        s => s.min(train.len()),
    };
    let bs = cfg.train.batch_size.max(2);
    // Train-mode batch norm needs two samples per batch.
    if n % bs == 1 {
        n -= 1;
    }
    if n <= p.k {
        return Err(CliError::usage(format!("purity at k={} needs more than {} train images, have {n}", p.k, p.k)));
    }
    let order = epoch_order(p.seed, 0, train.len());
    let idx = &order[..n];
    let weak = AugmentationPolicy::weak();
    let dim = cfg.train.encoder.embed_dim;
    let mut bank = MemoryBank::new(n, dim, true)?;
    for chunk in idx.chunks(bs) {
        let views: Vec<Image> = chunk
            .par_iter()
            .map(|&i| augment(&train.image(i), &weak, sample_seed(p.seed, 0, i), out))
            .collect::<msf_core::Result<_>>()?;
        let x = batch_tensor(&views, &model.norm)?;
        let u = model.pair.target_embed(&x, BnMode::Train)?;
        let labels: Vec<u32> = chunk.iter().map(|&i| train.label(i)).collect();
        bank.push_batch(u.data(), Some(&labels))?;
    }
    let value = purity(&bank, p.k)?;
    let dir = cfg.run_dir();
    let _lock = RunLock::acquire(&dir)?;
    merge_eval_rows(&dir, &[EvalRow::new("purity", Split::Train, Some(p.k), value)])?;
    println!("purity@{}={value:.2} ({} bank entries; {})", p.k, bank.fill(), model.source);
    Ok(value)
}
