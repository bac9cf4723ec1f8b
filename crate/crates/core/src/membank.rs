//! FIFO ring of unit-norm target embeddings with exact top-k cosine search.
//!
//! Search is a blocked scan: similarities for a block of queries against a
//! block of bank rows come from one matrix product, and each query keeps a
//! small sorted top-k list that the block results are merged into. Equal
//! similarities rank the older (earlier-pushed) entry first.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Transpose};

pub const UNIT_TOLERANCE: f32 = 1e-4;

/// Bank rows per similarity block.
pub const BANK_BLOCK: usize = 4096;
/// Queries per search task.
pub const QUERY_BLOCK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    slots: Vec<f32>,
    labels: Option<Vec<u32>>,
    /// Push sequence number of each slot's current occupant.
    seq: Vec<u64>,
    fill: usize,
    head: usize,
    pushed: u64,
}

/// The `k` nearest bank entries of one query, most similar first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    /// `len x dim`, row `j` is the embedding at `indices[j]`.
    pub embeddings: Vec<f32>,
    pub similarities: Vec<f32>,
    pub dim: usize,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn embedding(&self, j: usize) -> &[f32] {
        &self.embeddings[j * self.dim..(j + 1) * self.dim]
    }
}

fn check_unit(e: &[f32]) -> Result<()> {
    let n = e.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if !((1.0 - UNIT_TOLERANCE as f64)..=(1.0 + UNIT_TOLERANCE as f64)).contains(&n) {
        return Err(Error::Contract(format!("embedding norm {n} is not 1 within {UNIT_TOLERANCE}")));
    }
    Ok(())
}

/// Candidate ordering: higher similarity first, then older entry first.
#[inline]
fn ranks_before(a: (f32, u64), b: (f32, u64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

pub(crate) struct TopK {
    k: usize,
    /// (similarity, seq, slot), sorted best first.
    pub(crate) items: Vec<(f32, u64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, sim: f32, seq: u64, slot: usize) {
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if !ranks_before((sim, seq), (last.0, last.1)) {
                return;
            }
            self.items.pop();
        }
        let pos = self
            .items
            .partition_point(|&(s, q, _)| ranks_before((s, q), (sim, seq)));
        self.items.insert(pos, (sim, seq, slot));
    }
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize, with_labels: bool) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "memory bank needs positive capacity and dim, got {capacity} x {dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            slots: vec![0.0; capacity * dim],
            labels: with_labels.then(|| vec![0; capacity]),
            seq: vec![0; capacity],
            fill: 0,
            head: 0,
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Total pushes since creation.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn slot(&self, i: usize) -> &[f32] {
        &self.slots[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Occupied slots, oldest first.
    pub fn occupied_in_order(&self) -> Vec<usize> {
        if self.fill < self.capacity {
            (0..self.fill).collect()
        } else {
            (self.head..self.capacity).chain(0..self.head).collect()
        }
    }

    pub fn push(&mut self, e: &[f32], label: Option<u32>) -> Result<()> {
        if e.len() != self.dim {
            return Err(Error::Contract(format!(
                "embedding has dim {} but bank dim is {}",
                e.len(),
                self.dim
            )));
        }
        check_unit(e)?;
        self.pushed += 1;
        let h = self.head;
        self.slots[h * self.dim..(h + 1) * self.dim].copy_from_slice(e);
        self.seq[h] = self.pushed;
        if let Some(labels) = self.labels.as_mut() {
            labels[h] = label.unwrap_or(0);
        }
        self.head = (h + 1) % self.capacity;
        self.fill = (self.fill + 1).min(self.capacity);
        Ok(())
    }

    /// Pushes the rows of a `n x dim` matrix in order.
    pub fn push_batch(&mut self, rows: &[f32], labels: Option<&[u32]>) -> Result<()> {
        if rows.len() % self.dim != 0 {
            return Err(Error::Contract(format!(
                "{} values do not split into rows of {}",
                rows.len(),
                self.dim
            )));
        }
        let n = rows.len() / self.dim;
        if labels.is_some_and(|l| l.len() != n) {
            return Err(Error::Contract("label count differs from row count".into()));
        }
        // Validate first so a bad row leaves the bank untouched.
        for r in rows.chunks(self.dim) {
            check_unit(r)?;
        }
        for (i, r) in rows.chunks(self.dim).enumerate() {
            self.push(r, labels.map(|l| l[i]))?;
        }
        Ok(())
    }

    pub fn topk(&self, query: &[f32], k: usize) -> Result<NeighborSet> {
        Ok(self.topk_batch(query, k)?.pop().expect("one query"))
    }

    /// Exact top-`min(k, fill)` search for each row of the `n x dim` `queries`.
    pub fn topk_batch(&self, queries: &[f32], k: usize) -> Result<Vec<NeighborSet>> {
        if self.fill == 0 {
            return Err(Error::EmptyBank);
        }
        if k == 0 {
            return Err(Error::Config("top-k needs k >= 1".into()));
        }
        if queries.is_empty() || queries.len() % self.dim != 0 {
            return Err(Error::Contract(format!(
                "query values ({}) are not a multiple of the bank dim {}",
                queries.len(),
                self.dim
            )));
        }
        let k = k.min(self.fill);
        let dim = self.dim;
        let out: Vec<Vec<NeighborSet>> = queries
            .par_chunks(QUERY_BLOCK * dim)
            .map(|qb| self.search_block(qb, k))
            .collect();
        Ok(out.into_iter().flatten().collect())
    }

    fn search_block(&self, queries: &[f32], k: usize) -> Vec<NeighborSet> {
        let dim = self.dim;
        let rows = &self.slots[..self.fill * dim];
        let tops = scan_topk(rows, dim, queries, k, |slot| self.seq[slot]);
        tops.into_iter()
            .map(|t| {
                let mut embeddings = Vec::with_capacity(t.items.len() * dim);
                for &(_, _, slot) in &t.items {
                    embeddings.extend_from_slice(self.slot(slot));
                }
                NeighborSet {
                    indices: t.items.iter().map(|x| x.2).collect(),
                    similarities: t.items.iter().map(|x| x.0).collect(),
                    embeddings,
                    dim,
                }
            })
            .collect()
    }

    /// Raw state for checkpointing: `(slots, labels, seq, fill, head, pushed)`.
    pub fn raw_parts(&self) -> (&[f32], Option<&[u32]>, &[u64], usize, usize, u64) {
        (
            &self.slots,
            self.labels.as_deref(),
            &self.seq,
            self.fill,
            self.head,
            self.pushed,
        )
    }

    /// Inverse of [`raw_parts`](Self::raw_parts).
    #[allow(clippy::too_many_arguments)]
    pub fn from_raw_parts(
        capacity: usize,
        dim: usize,
        slots: Vec<f32>,
        labels: Option<Vec<u32>>,
        seq: Vec<u64>,
        fill: usize,
        head: usize,
        pushed: u64,
    ) -> Result<Self> {
        let ok = capacity > 0
            && dim > 0
            && slots.len() == capacity * dim
            && seq.len() == capacity
            && labels.as_ref().map_or(true, |l| l.len() == capacity)
            && fill <= capacity
            && head < capacity
            && pushed >= fill as u64;
        if !ok {
            return Err(Error::Contract("inconsistent memory bank state".into()));
        }
        Ok(Self {
            capacity,
            dim,
            slots,
            labels,
            seq,
            fill,
            head,
            pushed,
        })
    }
}

/// Exact top-`k` rows of `corpus` (row-major, `dim` wide) by inner product
/// with each query row. Equal scores go to the smaller `order` key. Scans the
/// corpus in blocks of [`BANK_BLOCK`] rows.
pub(crate) fn scan_topk(
    corpus: &[f32],
    dim: usize,
    queries: &[f32],
    k: usize,
    order: impl Fn(usize) -> u64,
) -> Vec<TopK> {
    let n = corpus.len() / dim;
    let nq = queries.len() / dim;
    let mut tops: Vec<TopK> = (0..nq).map(|_| TopK::new(k)).collect();
    let mut sims = vec![0.0f32; nq * BANK_BLOCK.min(n)];
    let mut start = 0;
    while start < n {
        let rows = BANK_BLOCK.min(n - start);
        let block = &corpus[start * dim..(start + rows) * dim];
        // sims[q, r] = <query q, row start + r>
        gemm(
            nq,
            dim,
            rows,
            1.0,
            queries,
            Transpose::No,
            block,
            Transpose::Yes,
            0.0,
            &mut sims[..nq * rows],
        );
        for (q, top) in tops.iter_mut().enumerate() {
            for (r, &s) in sims[q * rows..(q + 1) * rows].iter().enumerate() {
                let row = start + r;
                top.offer(s, order(row), row);
            }
        }
        start += rows;
    }
    tops
}

/// Random unit vector with isotropic direction.
pub fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// One bench-bank result row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub fill: usize,
    pub dim: usize,
    pub k: usize,
    pub queries: usize,
    pub seconds: f64,
    pub queries_per_s: f64,
    pub gflops_per_query: f64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "fill,dim,k,queries_per_s,gflops_per_query";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.3},{:.2}",
            self.fill, self.dim, self.k, self.queries_per_s, self.gflops_per_query
        )
    }
}

/// Multiply-adds of an exhaustive scan, counted as two flops each.
pub fn flops_per_query(fill: usize, dim: usize) -> f64 {
    2.0 * fill as f64 * dim as f64
}

/// Times `n_queries` random unit queries against `bank`.
pub fn bank_bench<R: Rng + ?Sized>(bank: &MemoryBank, n_queries: usize, k: usize, rng: &mut R) -> Result<BenchReport> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let n_queries = n_queries.max(1);
    let queries: Vec<f32> = (0..n_queries).flat_map(|_| random_unit(bank.dim(), rng)).collect();
    let t0 = Instant::now();
    let res = bank.topk_batch(&queries, k)?;
    let seconds = t0.elapsed().as_secs_f64().max(1e-9);
    debug_assert_eq!(res.len(), n_queries);
    Ok(BenchReport {
        fill: bank.fill(),
        dim: bank.dim(),
        k: res[0].len(),
        queries: n_queries,
        seconds,
        queries_per_s: n_queries as f64 / seconds,
        gflops_per_query: flops_per_query(bank.fill(), bank.dim()) / 1e9,
    })
}
