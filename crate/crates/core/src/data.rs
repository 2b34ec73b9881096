//! Datasets, non-IID client partitioning, label-distribution distance and the
//! label-flip attacker.

use std::io::Read;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Samples;

const HIST_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::Config("dataset dimension and class count must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Config(format!(
                "{} feature values cannot form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Config(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self { features, labels, dim, num_classes })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the listed rows into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        Dataset { features, labels, dim: self.dim, num_classes: self.num_classes }
    }

    /// Seeded random split into `(kept, held_out)` with `round(fraction * len)`
    /// rows held out.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Precondition(format!("holdout fraction {fraction} outside [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = (fraction * self.len() as f64).round() as usize;
        let (h, k) = order.split_at(held);
        let mut h = h.to_vec();
        let mut k = k.to_vec();
        h.sort_unstable();
        k.sort_unstable();
        Ok((self.subset(&k), self.subset(&h)))
    }

    pub fn label_hist(&self) -> Vec<f64> {
        histogram(&self.labels, self.num_classes)
    }
}

impl Samples for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

fn histogram(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let n = labels.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// One client's shard: row indices into a parent [`Dataset`] plus the labels
/// the client actually trains on (which differ from the parent's after
/// [`flip_labels`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub label_hist: Vec<f64>,
}

impl ClientDataset {
    pub fn from_parent(client_id: usize, parent: &Dataset, indices: Vec<usize>) -> Self {
        let labels: Vec<usize> = indices.iter().map(|&i| parent.labels[i]).collect();
        let label_hist = histogram(&labels, parent.num_classes);
        Self { client_id, indices, labels, label_hist }
    }

    /// `d_k`.
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn view<'a>(&'a self, parent: &'a Dataset) -> ClientView<'a> {
        ClientView { parent, client: self }
    }
}

/// Borrowed pairing of a client shard with the dataset it indexes.
#[derive(Debug, Clone, Copy)]
pub struct ClientView<'a> {
    pub parent: &'a Dataset,
    pub client: &'a ClientDataset,
}

impl Samples for ClientView<'_> {
    fn len(&self) -> usize {
        self.client.indices.len()
    }
    fn dim(&self) -> usize {
        self.parent.dim
    }
    fn features(&self, i: usize) -> &[f64] {
        self.parent.features(self.client.indices[i])
    }
    fn label(&self, i: usize) -> usize {
        self.client.labels[i]
    }
}

/// Concatenation of several client shards over the same parent.
pub struct PooledView<'a> {
    parent: &'a Dataset,
    rows: Vec<(usize, usize)>,
}

impl<'a> PooledView<'a> {
    pub fn new(parent: &'a Dataset, clients: &'a [ClientDataset]) -> Self {
        let rows = clients
            .iter()
            .flat_map(|c| c.indices.iter().zip(&c.labels).map(|(&i, &y)| (i, y)))
            .collect();
        Self { parent, rows }
    }
}

impl Samples for PooledView<'_> {
    fn len(&self) -> usize {
        self.rows.len()
    }
    fn dim(&self) -> usize {
        self.parent.dim
    }
    fn features(&self, i: usize) -> &[f64] {
        self.parent.features(self.rows[i].0)
    }
    fn label(&self, i: usize) -> usize {
        self.rows[i].1
    }
}

// ---------------------------------------------------------------------------
// IDX

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse { offset, msg: format!("truncated {what}") })
}

/// Decodes an IDX image file (`0x00000803`) and label file (`0x00000801`).
/// Pixels are scaled from `0..=255` to `[0, 1]`; the class count is one past
/// the largest label seen.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let magic = be_u32(image_bytes, 0, "image magic")?;
    if magic != IDX_IMAGES {
        return Err(Error::Parse { offset: 0, msg: format!("image magic {magic:#010x}, expected 0x00000803") });
    }
    let count = be_u32(image_bytes, 4, "image count")? as usize;
    let rows = be_u32(image_bytes, 8, "row count")? as usize;
    let cols = be_u32(image_bytes, 12, "column count")? as usize;
    let dim = rows * cols;
    let need = 16 + count * dim;
    if image_bytes.len() < need {
        return Err(Error::Parse {
            offset: image_bytes.len(),
            msg: format!("image payload truncated, need {need} bytes"),
        });
    }

    let magic = be_u32(label_bytes, 0, "label magic")?;
    if magic != IDX_LABELS {
        return Err(Error::Parse { offset: 0, msg: format!("label magic {magic:#010x}, expected 0x00000801") });
    }
    let label_count = be_u32(label_bytes, 4, "label count")? as usize;
    if label_count != count {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("label file holds {label_count} entries, image file {count}"),
        });
    }
    if label_bytes.len() < 8 + count {
        return Err(Error::Parse {
            offset: label_bytes.len(),
            msg: format!("label payload truncated, need {} bytes", 8 + count),
        });
    }

    let features = image_bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes[8..8 + count].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(features, labels, dim.max(1), num_classes)
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads an IDX image/label pair from disk; either file may be gzip-compressed.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    parse_idx(&read_maybe_gzip(images)?, &read_maybe_gzip(labels)?)
}

// ---------------------------------------------------------------------------
// synthetic data

/// Gaussian class blobs inside the unit cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Standard deviation of every blob along every axis.
    pub spread: f64,
    /// Seed for the class centres; shared by train and test draws.
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 10, dim: 32, spread: 0.25, seed: 7 }
    }
}

impl SyntheticSpec {
    fn centers(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.classes * self.dim).map(|_| rng.random_range(0.2..0.8)).collect()
    }

    /// Draws `count` samples with balanced labels from stream `stream`.
    pub fn generate(&self, count: usize, stream: u64) -> Result<Dataset> {
        if self.classes == 0 || self.dim == 0 || !(self.spread >= 0.0) {
            return Err(Error::Config(format!("invalid synthetic spec {self:?}")));
        }
        let centers = self.centers();
        let noise = Normal::new(0.0, self.spread).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
        let mut labels: Vec<usize> = (0..count).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(count * self.dim);
        for &y in &labels {
            let c = &centers[y * self.dim..(y + 1) * self.dim];
            features.extend(c.iter().map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
        }
        Dataset::new(features, labels, self.dim, self.classes)
    }
}

// ---------------------------------------------------------------------------
// partitioning

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub zipf_exponent: f64,
    pub dirichlet_alpha: f64,
    pub max_classes_per_client: usize,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            num_clients: 100,
            zipf_exponent: 1.0,
            dirichlet_alpha: 0.1,
            max_classes_per_client: 4,
            seed: 0,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("at least one client is required".into()));
        }
        if !(self.zipf_exponent > 0.0) || !(self.dirichlet_alpha > 0.0) {
            return Err(Error::Config("zipf exponent and dirichlet alpha must be positive".into()));
        }
        if self.max_classes_per_client == 0 || self.max_classes_per_client > num_classes {
            return Err(Error::Config(format!(
                "max classes per client {} outside 1..={num_classes}",
                self.max_classes_per_client
            )));
        }
        Ok(())
    }
}

/// Allocates `total` units proportionally to `weights`, rounding by largest
/// remainder (ties go to the lower index) so the parts sum to `total`.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Zipf sample counts for `k` ranked clients over a pool of `pool` samples.
pub fn zipf_quantities(k: usize, exponent: f64, pool: usize) -> Vec<usize> {
    let weights: Vec<f64> = (1..=k).map(|r| (r as f64).powf(-exponent)).collect();
    largest_remainder(&weights, pool)
}

fn dirichlet(alpha: f64, classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter_mut().for_each(|v| *v /= sum);
    } else {
        // every gamma draw underflowed; fall back to a single class
        draws = vec![0.0; classes];
        draws[rng.random_range(0..classes)] = 1.0;
    }
    draws
}

/// Splits `ds` across `spec.num_clients` clients: Zipf-distributed sample
/// counts, Dirichlet class mixes truncated to the client's top classes.
///
/// Clients are filled in rank order from per-class pools. When a class pool
/// runs dry the shortfall spills to the client's next-ranked class, never
/// exceeding `max_classes_per_client` distinct classes. A client that still
/// falls short, or that would outgrow its higher-ranked neighbour, is trimmed
/// so counts stay non-increasing; trimmed samples are left unassigned.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    let classes = ds.num_classes();
    spec.validate(classes)?;
    let k = spec.num_clients;
    if k > ds.len() {
        return Err(Error::Config(format!("{k} clients cannot share {} samples", ds.len())));
    }
    if k == 1 {
        // a lone client owns the whole pool
        return Ok(vec![ClientDataset::from_parent(0, ds, (0..ds.len()).collect())]);
    }

    let mut quantities = zipf_quantities(k, spec.zipf_exponent, ds.len());
    // every client needs at least one sample; take from the head of the list
    for i in (0..k).rev() {
        if quantities[i] == 0 {
            let donor = (0..k).max_by_key(|&j| (quantities[j], std::cmp::Reverse(j))).unwrap();
            quantities[donor] -= 1;
            quantities[i] = 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in ds.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; classes];

    let cap = spec.max_classes_per_client;
    let mut shards: Vec<Vec<usize>> = Vec::with_capacity(k);
    for &want_total in &quantities {
        let mix = dirichlet(spec.dirichlet_alpha, classes, &mut rng);
        let mut ranked: Vec<usize> = (0..classes).collect();
        ranked.sort_by(|&a, &b| mix[b].total_cmp(&mix[a]).then(a.cmp(&b)));
        let kept: Vec<f64> = ranked[..cap].iter().map(|&c| mix[c]).collect();
        let desired = largest_remainder(&kept, want_total);

        let mut shard = Vec::with_capacity(want_total);
        let mut carry = 0usize;
        let mut used = 0usize;
        for (rank, &c) in ranked.iter().enumerate() {
            if used == cap {
                break;
            }
            let want = desired.get(rank).copied().unwrap_or(0) + carry;
            let avail = pools[c].len() - cursor[c];
            let take = want.min(avail);
            if take > 0 {
                used += 1;
                shard.extend_from_slice(&pools[c][cursor[c]..cursor[c] + take]);
                cursor[c] += take;
            }
            carry = want - take;
        }
        shards.push(shard);
    }

    for i in 1..k {
        let limit = shards[i - 1].len();
        if shards[i].len() > limit {
            shards[i].truncate(limit);
        }
    }
    if let Some(i) = shards.iter().position(|s| s.is_empty()) {
        return Err(Error::Config(format!(
            "client {i} received no samples; the pool is too small for {k} clients"
        )));
    }

    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(id, idx)| ClientDataset::from_parent(id, ds, idx))
        .collect())
}

/// Distance between two label distributions under unit ground distance,
/// which reduces to `Σ_j |p_j - q_j|`.
pub fn emd(label_hist: &[f64], benchmark: &[f64]) -> Result<f64> {
    if label_hist.len() != benchmark.len() {
        return Err(Error::Precondition(format!(
            "histogram lengths differ: {} vs {}",
            label_hist.len(),
            benchmark.len()
        )));
    }
    for (name, v) in [("histogram", label_hist), ("benchmark", benchmark)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > HIST_TOL || v.iter().any(|p| *p < 0.0) {
            return Err(Error::Precondition(format!("{name} is not a probability vector (sum {s})")));
        }
    }
    Ok(label_hist.iter().zip(benchmark).map(|(p, q)| (p - q).abs()).sum())
}

pub fn uniform_benchmark(classes: usize) -> Vec<f64> {
    vec![1.0 / classes as f64; classes]
}

/// Relabels `floor(fraction * d_k)` uniformly chosen samples with a label
/// drawn uniformly from the other classes.
pub fn flip_labels(cd: &ClientDataset, fraction: f64, num_classes: usize, seed: u64) -> Result<ClientDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Precondition(format!("flip fraction {fraction} outside [0, 1]")));
    }
    if num_classes < 2 && fraction > 0.0 {
        return Err(Error::Precondition("flipping needs at least two classes".into()));
    }
    let count = (fraction * cd.size() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cd.clone();
    for i in index::sample(&mut rng, cd.size(), count) {
        let orig = out.labels[i];
        let r = rng.random_range(0..num_classes - 1);
        out.labels[i] = if r < orig { r } else { r + 1 };
    }
    out.label_hist = histogram(&out.labels, num_classes);
    Ok(out)
}
