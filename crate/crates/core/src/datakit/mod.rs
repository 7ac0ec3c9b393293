//! Datasets: synthetic Gaussian mixtures, CSV and IDX ingestion, stratified
//! splits and deterministic batching.

mod io;
pub mod seed;
mod synth;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub use io::{format_sig, load_csv, load_idx, parse_csv, parse_idx, write_labeled_csv};
pub use synth::{gen_gaussian_mixture, gen_id_ood, BlobSpec, IdOodData, Warp, WarpSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    IdTrain,
    IdTest,
    Ood,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::IdTrain => "id_train",
            Split::IdTest => "id_test",
            Split::Ood => "ood",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Csv,
    Idx,
}

/// Labeled feature matrix with dense labels in `[0, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: Provenance,
    pub seed: Option<u64>,
    /// Original label of each dense class, when labels were remapped on load.
    pub label_map: Option<Vec<i64>>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, split: Split, provenance: Provenance) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if !features.all_finite() {
            return Err(Error::domain("dataset features must be finite"));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
            provenance,
            seed: None,
            label_map: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Sub-dataset over the given row indices, keeping the class count.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            provenance: self.provenance,
            seed: self.seed,
            label_map: self.label_map.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Stratified split into `fractions.len()` disjoint index sets.
///
/// Each class contributes `max(1, floor(f · n_class))` samples to each part.
/// Indices within each part are ascending.
pub fn split_indices(labels: &[usize], num_classes: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Config("split fractions must be positive".into()));
    }
    if fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::Config("split fractions must sum to at most 1".into()));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut parts = vec![Vec::new(); fractions.len()];
    for (class, mut members) in by_class.into_iter().enumerate() {
        let n = members.len();
        let counts: Vec<usize> = fractions
            .iter()
            .map(|f| ((f * n as f64 + 1e-9).floor() as usize).max(1))
            .collect();
        if counts.iter().sum::<usize>() > n {
            return Err(Error::domain(format!(
                "class {class} has {n} samples, too few for {} splits",
                fractions.len()
            )));
        }
        members.shuffle(&mut seed::rng(seed, &format!("split/{class}")));
        let mut start = 0;
        for (part, c) in parts.iter_mut().zip(counts) {
            part.extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    Ok(split_indices(&ds.labels, ds.num_classes, fractions, seed)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect())
}

/// Epoch-dependent permutation of `0..n` cut into batches; the final partial
/// batch is kept.
///
/// When `needs_pairs` is set (entropy regularization or batch norm in the
/// model) `batch_size` must be at least 2 and a trailing single-sample batch
/// is merged into the batch before it.
pub fn batches(
    n: usize,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
    needs_pairs: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if needs_pairs && batch_size < 2 {
        return Err(Error::Config(
            "batch_size must be >= 2 when the loss or model needs sample pairs".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(shuffle_seed, &format!("epoch/{epoch}")));
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if needs_pairs && out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    Ok(out)
}
