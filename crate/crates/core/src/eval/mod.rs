//! Frozen-backbone evaluation: feature extraction, kNN and linear probes,
//! and bank purity.

mod probe;

use std::fmt;

use rayon::prelude::*;

use crate::augment::{batch_tensor, center_crop, Image, PixelNorm};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::membank::{scan_topk, MemoryBank, QUERY_BLOCK};
use crate::model::{Backbone, NORM_EPS};
use crate::tensor::{l2_normalize, BnMode};

pub use probe::{linear_probe, ProbeConfig, ProbeResult, Standardizer};

/// Temperature of the similarity-weighted kNN vote.
pub const KNN_TEMPERATURE: f64 = 0.07;

const EXTRACT_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Unit-norm backbone features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub split: Split,
}

impl FeatureSet {
    pub fn new(dim: usize, features: Vec<f32>, labels: Vec<u32>, split: Split) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Data(format!(
                "{} feature values for {} labels of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            dim,
            features,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Preprocessing applied before the backbone at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPreprocess {
    pub norm: PixelNorm,
    /// Resize-then-centre-crop to this side; `None` feeds the image as is.
    pub center_crop: Option<usize>,
}

/// Runs the backbone in eval mode over `data` and l2-normalizes each row.
pub fn extract_features(
    backbone: &Backbone<f32>,
    data: &ImageSet,
    pre: &EvalPreprocess,
    split: Split,
) -> Result<FeatureSet> {
    if data.is_empty() {
        return Err(Error::Data(format!("{split} split is empty")));
    }
    let chunks: Vec<usize> = (0..data.len()).step_by(EXTRACT_BATCH).collect();
    let parts: Vec<(usize, Vec<f32>)> = chunks
        .par_iter()
        .map(|&start| {
            let end = (start + EXTRACT_BATCH).min(data.len());
            let images: Vec<Image> = (start..end)
                .map(|i| {
                    let img = data.image(i);
                    match pre.center_crop {
                        Some(side) => center_crop(&img, side),
                        None => img,
                    }
                })
                .collect();
            let x = batch_tensor(&images, &pre.norm)?;
            let f = backbone.infer(&x, BnMode::Eval)?;
            let dim = f.shape()[1];
            let (f, _) = l2_normalize(&f, NORM_EPS as f32)?;
            Ok((dim, f.into_data()))
        })
        .collect::<Result<_>>()?;
    let dim = parts[0].0;
    let features = parts.into_iter().flat_map(|(_, f)| f).collect();
    FeatureSet::new(dim, features, data.labels().to_vec(), split)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnResult {
    pub accuracy: f64,
    /// Neighbours actually used (`k` clamped to the train size).
    pub k: usize,
    pub clamped: bool,
}

/// Predicted class of each test row.
pub fn knn_predict(train: &FeatureSet, test: &FeatureSet, k: usize, temperature: f64) -> Result<(Vec<u32>, usize)> {
    if k == 0 {
        return Err(Error::Config("kNN needs k >= 1".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("kNN needs a nonempty train set".into()));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!("kNN temperature must be positive, got {temperature}")));
    }
    if train.dim != test.dim {
        return Err(Error::shape("knn_classify", &[train.dim], &[test.dim]));
    }
    let k = k.min(train.len());
    let classes = train.labels.iter().chain(&test.labels).max().map_or(1, |&m| m as usize + 1);
    let dim = train.dim;
    let blocks: Vec<Vec<u32>> = test
        .features
        .par_chunks(QUERY_BLOCK * dim)
        .map(|qb| {
            scan_topk(&train.features, dim, qb, k, |i| i as u64)
                .into_iter()
                .map(|top| {
                    let mut score = vec![0f64; classes];
                    for &(sim, _, i) in &top.items {
                        score[train.labels[i] as usize] += (sim as f64 / temperature).exp();
                    }
                    // First maximum wins, so ties go to the smaller class id.
                    let mut best = 0;
                    for (c, &s) in score.iter().enumerate() {
                        if s > score[best] {
                            best = c;
                        }
                    }
                    best as u32
                })
                .collect()
        })
        .collect();
    Ok((blocks.into_iter().flatten().collect(), k))
}

/// Top-1 accuracy of the similarity-weighted kNN vote `Σ exp(sim / τ)`.
pub fn knn_classify(train: &FeatureSet, test: &FeatureSet, k: usize, temperature: f64) -> Result<KnnResult> {
    let (pred, used) = knn_predict(train, test, k, temperature)?;
    let correct = pred.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(KnnResult {
        accuracy: correct as f64 / test.len().max(1) as f64,
        k: used,
        clamped: used < k,
    })
}

/// Mean percentage of non-self top-`k` neighbours that share each occupied
/// slot's label, every occupied slot acting as a query.
pub fn purity(bank: &MemoryBank, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Config("purity needs k >= 2: k = 1 leaves no non-self neighbours".into()));
    }
    if !bank.has_labels() {
        return Err(Error::Config("purity needs a bank with labels".into()));
    }
    if bank.fill() <= k {
        return Err(Error::Config(format!("purity needs more than {k} entries, bank holds {}", bank.fill())));
    }
    let queries: Vec<f32> = (0..bank.fill()).flat_map(|i| bank.slot(i).to_vec()).collect();
    let sets = bank.topk_batch(&queries, k)?;
    let fractions: Vec<f64> = sets
        .par_iter()
        .enumerate()
        .map(|(q, set)| {
            let label = bank.label(q);
            // The query's own slot; if an exact duplicate outranks it, drop rank 1.
            let skip = set.indices.iter().position(|&i| i == q).unwrap_or(0);
            let agree = set
                .indices
                .iter()
                .enumerate()
                .filter(|&(r, &i)| r != skip && bank.label(i) == label)
                .count();
            agree as f64 / (set.len() - 1) as f64
        })
        .collect();
    Ok(100.0 * fractions.iter().sum::<f64>() / sets.len() as f64)
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub metric: String,
    pub split: String,
    pub k: Option<usize>,
    pub value: f64,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "metric,split,k,value";

    pub fn new(metric: &str, split: impl fmt::Display, k: Option<usize>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            split: split.to_string(),
            k,
            value,
        }
    }

    pub fn csv_row(&self) -> String {
        let k = self.k.map(|k| k.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.metric, self.split, k, self.value)
    }
}
