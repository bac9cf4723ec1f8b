use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msf_core::membank::{bank_bench, random_unit, BenchReport, MemoryBank};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Fills a bank with random unit vectors and times exact top-k queries.
pub fn cmd_bench_bank(cfg: &RunConfig) -> CliResult<BenchReport> {
    let b = &cfg.bench;
    if b.capacity == 0 || b.dim == 0 || b.k == 0 {
        return Err(CliError::usage("bench.capacity, bench.dim and bench.k must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(b.seed);
    let mut bank = MemoryBank::new(b.capacity, b.dim, false)?;
    for _ in 0..b.capacity {
        bank.push(&random_unit(b.dim, &mut rng), None)?;
    }
    let report = bank_bench(&bank, b.queries, b.k, &mut rng)?;
    println!("{}", BenchReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(report)
}
