//! Positive-pair datasets, labeled datasets, synthetic generators and
//! file ingestion.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{norm, Tensor};

/// `n` positive pairs `(x_i, x'_i)`. Carries no labels: this is the only
/// view of the data that training steps receive.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    anchors: Tensor,
    positives: Tensor,
}

impl PairBatch {
    pub fn new(anchors: Tensor, positives: Tensor) -> Result<Self> {
        if anchors.shape().len() != 2 || anchors.shape() != positives.shape() {
            return Err(Error::shape(format!(
                "anchors {:?} and positives {:?} must be equal-shaped matrices",
                anchors.shape(),
                positives.shape()
            )));
        }
        if anchors.rows() == 0 {
            return Err(Error::shape("a pair batch needs at least one pair"));
        }
        Ok(Self { anchors, positives })
    }

    pub fn from_rows(anchors: &[Vec<f64>], positives: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(anchors)?, Tensor::from_rows(positives)?)
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn anchor(&self, i: usize) -> &[f64] {
        self.anchors.row(i)
    }

    pub fn positive(&self, i: usize) -> &[f64] {
        self.positives.row(i)
    }

    pub fn anchors(&self) -> &Tensor {
        &self.anchors
    }

    pub fn positives(&self) -> &Tensor {
        &self.positives
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.anchors.select_rows(idx), self.positives.select_rows(idx))
    }

    /// The first `m` pairs (the neighboring batch for add/remove-one when
    /// `m = n − 1`).
    pub fn prefix(&self, m: usize) -> Result<Self> {
        self.select(&(0..m.min(self.len())).collect::<Vec<_>>())
    }
}

/// Pairs together with latent class labels used only for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pairs: PairBatch,
    labels: Vec<usize>,
    num_classes: usize,
}

impl PairDataset {
    pub fn new(pairs: PairBatch, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != pairs.len() {
            return Err(Error::Data("one latent label per pair required".into()));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::Data(format!("label {l} outside {num_classes} classes")));
        }
        Ok(Self {
            pairs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pairs.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Label-free view of the selected pairs.
    pub fn batch(&self, idx: &[usize]) -> Result<PairBatch> {
        self.pairs.select(idx)
    }

    pub fn pairs(&self) -> &PairBatch {
        &self.pairs
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            self.pairs.select(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let (a, b) = split_indices(self.len(), train_fraction, seed)?;
        Ok((self.select(&a)?, self.select(&b)?))
    }

    /// Anchors with their latent labels, for embedding-quality evaluation.
    pub fn anchors_labeled(&self) -> LabeledDataset {
        LabeledDataset {
            features: self.pairs.anchors().clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for feature matrix {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::Data(format!("label {l} outside {num_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let (a, b) = split_indices(self.len(), train_fraction, seed)?;
        Ok((self.select(&a)?, self.select(&b)?))
    }
}

/// Seeded shuffle of `0..n` cut into `⌊f·n⌋` and the remainder.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (train_fraction * n as f64).floor() as usize;
    let test = idx.split_off(cut);
    Ok((idx, test))
}

/// Parameters of the clustered positive-pair generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_clusters: usize,
    pub dim: usize,
    pub points_per_cluster: usize,
    /// Std of points around their cluster center.
    pub cluster_spread: f64,
    /// Norm of every cluster center.
    pub separation: f64,
    /// Std of the perturbation that turns `x_i` into `x'_i`.
    pub augment_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_clusters: 4,
            dim: 16,
            points_per_cluster: 500,
            cluster_spread: 0.5,
            separation: 3.0,
            augment_noise: 0.1,
            seed: 0,
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Cluster centers on the sphere of radius `separation`, points at
/// `center + N(0, spread²)`, positives at `x + N(0, augment²)`.
pub fn synth_pairs(spec: &SynthSpec) -> Result<PairDataset> {
    if spec.num_clusters == 0 || spec.dim == 0 || spec.points_per_cluster == 0 {
        return Err(Error::config("synthetic data dimensions must be positive"));
    }
    if !(spec.augment_noise >= 0.0 && spec.cluster_spread >= 0.0 && spec.separation >= 0.0) {
        return Err(Error::config("synthetic noise scales must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.num_clusters)
        .map(|_| loop {
            let v = gaussian_vec(&mut rng, spec.dim, 1.0);
            let n = norm(&v);
            if n > 1e-12 {
                break v.into_iter().map(|x| spec.separation * x / n).collect();
            }
        })
        .collect();
    let total = spec.num_clusters * spec.points_per_cluster;
    let mut anchors = Vec::with_capacity(total);
    let mut positives = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.points_per_cluster {
            let x: Vec<f64> = gaussian_vec(&mut rng, spec.dim, spec.cluster_spread)
                .iter()
                .zip(center)
                .map(|(e, m)| m + e)
                .collect();
            let xp = perturb(&mut rng, &x, spec.augment_noise);
            anchors.push(x);
            positives.push(xp);
            labels.push(c);
        }
    }
    PairDataset::new(PairBatch::from_rows(&anchors, &positives)?, labels, spec.num_clusters)
}

fn perturb(rng: &mut ChaCha8Rng, x: &[f64], std: f64) -> Vec<f64> {
    if std == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .zip(gaussian_vec(rng, x.len(), std))
        .map(|(a, e)| a + e)
        .collect()
}

/// Labeled points drawn from the same clustered generator (anchors only).
pub fn synth_labeled(spec: &SynthSpec) -> Result<LabeledDataset> {
    Ok(synth_pairs(&SynthSpec {
        augment_noise: 0.0,
        ..spec.clone()
    })?
    .anchors_labeled())
}

/// Pairs every example with a noise-perturbed copy of itself.
pub fn pairs_from_labeled(dataset: &LabeledDataset, augment_noise: f64, seed: u64) -> Result<PairDataset> {
    if !(augment_noise >= 0.0) {
        return Err(Error::config("augment noise must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats = dataset.features();
    let mut positives = Vec::with_capacity(feats.len());
    for i in 0..feats.rows() {
        positives.extend(perturb(&mut rng, feats.row(i), augment_noise));
    }
    PairDataset::new(
        PairBatch::new(feats.clone(), Tensor::new(feats.shape().to_vec(), positives)?)?,
        dataset.labels().to_vec(),
        dataset.num_classes(),
    )
}

pub const CIFAR10_RECORD: usize = 1 + CIFAR10_PIXELS;
pub const CIFAR10_PIXELS: usize = 3 * 32 * 32;

/// Parses the CIFAR-10 binary batch layout: per record one label byte (0–9)
/// followed by 3072 pixel bytes (R, G, B planes of 32×32, row-major).
/// Pixels are scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        return Err(Error::Format(format!(
            "length {} is not a multiple of {CIFAR10_RECORD}",
            bytes.len()
        )));
    }
    let records = bytes.len() / CIFAR10_RECORD;
    let mut features = Vec::with_capacity(records * CIFAR10_PIXELS);
    let mut labels = Vec::with_capacity(records);
    for (r, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format(format!("record {r} has label {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        features.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    LabeledDataset::new(Tensor::new(vec![records, CIFAR10_PIXELS], features)?, labels, 10)
}

pub fn read_cifar10_binary(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    parse_cifar10(&std::fs::read(path)?)
}

/// Inverse of [`parse_cifar10`] for datasets whose features are multiples
/// of `1/255` in `[0, 1]`.
pub fn encode_cifar10(dataset: &LabeledDataset) -> Result<Vec<u8>> {
    let f = dataset.features();
    if f.cols() != CIFAR10_PIXELS || dataset.num_classes() > 10 {
        return Err(Error::Format("dataset is not CIFAR-10 shaped".into()));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR10_RECORD);
    for i in 0..dataset.len() {
        out.push(dataset.labels()[i] as u8);
        for &v in f.row(i) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Format(format!("pixel value {v} outside [0, 1]")));
            }
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_cifar10_binary(path: impl AsRef<Path>, dataset: &LabeledDataset) -> Result<()> {
    std::fs::write(path, encode_cifar10(dataset)?)?;
    Ok(())
}

/// Sidecar manifest of a cached pair dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub dim: usize,
    pub pairs: usize,
    pub num_classes: usize,
    pub seed: u64,
}

fn cache_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `<stem>.bin` (anchors then positives as little-endian `f64`, then
/// labels as little-endian `u32`) and `<stem>.json`.
pub fn write_cache(stem: impl AsRef<Path>, dataset: &PairDataset, seed: u64) -> Result<()> {
    let (bin, json) = cache_paths(stem.as_ref());
    let mut bytes = Vec::new();
    for t in [dataset.pairs.anchors(), dataset.pairs.positives()] {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &l in &dataset.labels {
        bytes.extend_from_slice(&(l as u32).to_le_bytes());
    }
    std::fs::write(bin, bytes)?;
    let manifest = CacheManifest {
        dim: dataset.dim(),
        pairs: dataset.len(),
        num_classes: dataset.num_classes,
        seed,
    };
    std::fs::write(json, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_cache(stem: impl AsRef<Path>) -> Result<(PairDataset, CacheManifest)> {
    let (bin, json) = cache_paths(stem.as_ref());
    let manifest: CacheManifest = serde_json::from_slice(&std::fs::read(json)?)?;
    let bytes = std::fs::read(bin)?;
    let cells = manifest.dim * manifest.pairs;
    if bytes.len() != 2 * cells * 8 + manifest.pairs * 4 {
        return Err(Error::Format("cache size disagrees with manifest".into()));
    }
    let floats: Vec<f64> = bytes[..2 * cells * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = bytes[2 * cells * 8..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let shape = vec![manifest.pairs, manifest.dim];
    let pairs = PairBatch::new(
        Tensor::new(shape.clone(), floats[..cells].to_vec())?,
        Tensor::new(shape, floats[cells..].to_vec())?,
    )?;
    Ok((PairDataset::new(pairs, labels, manifest.num_classes)?, manifest))
}
