//! Dataset sources and non-IID partitioners.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::LabeledDataset;
use crate::seeds::SimRng;

/// Bits used to store one synthetic feature (an `f32`).
pub const SYNTH_BITS_PER_FEATURE: u64 = 32;

/// Maximum number of Dirichlet redraws before giving up on `min_size`.
pub const DIRICHLET_MAX_RETRIES: usize = 100;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Gaussian class clusters around class means drawn uniformly in `[-1, 1]^d`.
///
/// A spread of zero is allowed and places every sample on its class mean.
pub fn synth_blobs<R: Rng + ?Sized>(
    num_classes: usize,
    input_dim: usize,
    n_per_class: usize,
    spread: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::invalid("synth_blobs needs at least 2 classes"));
    }
    if n_per_class < 1 || input_dim < 1 {
        return Err(Error::invalid(
            "synth_blobs needs n_per_class >= 1 and input_dim >= 1",
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!(
            "synth_blobs spread must be finite and non-negative, got {spread}"
        )));
    }
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let n = num_classes * n_per_class;
    let mut features = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for (c, mean) in means.iter().enumerate() {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                features.push(m + spread * z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(
        features,
        labels,
        input_dim,
        num_classes,
        input_dim as u64 * SYNTH_BITS_PER_FEATURE,
    )
}

/// Stratified train/validation split: each class sends `round(n_c * fraction)`
/// of its samples to validation, so equal-sized classes stay equal in the
/// training set.
pub fn train_validation_split(
    ds: &LabeledDataset,
    fraction: f64,
    rng: &mut SimRng,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "validation fraction {fraction} not in [0,1)"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut val = Vec::new();
    let mut train = Vec::with_capacity(ds.len());
    for mut members in by_class {
        members.shuffle(rng);
        let n_val = (members.len() as f64 * fraction).round() as usize;
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    val.sort_unstable();
    train.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val)))
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> IdxReader<'a> {
    fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Idx {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        if end > self.bytes.len() {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated while reading {what}"),
            ));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(v)
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(self.err(
                self.bytes.len(),
                format!(
                    "truncated {what}: expected {len} bytes from offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parse an IDX image file (`0x00000803`, unsigned bytes). Returns
/// `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = IdxReader {
        bytes,
        pos: 0,
        path,
    };
    let magic = r.u32("magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.err(0, format!("bad image magic {magic:#010x}, expected 0x00000803")));
    }
    let n = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let pixels = r.take(n * rows * cols, "pixel data")?.to_vec();
    Ok((n, rows, cols, pixels))
}

/// Parse an IDX label file (`0x00000801`).
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = IdxReader {
        bytes,
        pos: 0,
        path,
    };
    let magic = r.u32("magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.err(0, format!("bad label magic {magic:#010x}, expected 0x00000801")));
    }
    let n = r.u32("label count")? as usize;
    Ok(r.take(n, "label data")?.to_vec())
}

/// Load an MNIST-family image/label pair. Pixels are scaled to `[0,1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images_path, &read_file(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read_file(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let input_dim = rows * cols;
    if input_dim == 0 {
        return Err(Error::Idx {
            path: images_path.to_path_buf(),
            offset: 8,
            reason: "image dimensions are zero".into(),
        });
    }
    let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2);
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    LabeledDataset::new(
        features,
        labels.into_iter().map(usize::from).collect(),
        input_dim,
        num_classes,
        input_dim as u64 * 8,
    )
}

/// Serialize a dataset as an IDX pair. Features are quantized with
/// `round(x·255)`; mostly useful for fixtures.
pub fn encode_idx(ds: &LabeledDataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.input_dim {
        return Err(Error::DimensionMismatch {
            context: "idx image shape",
            expected: ds.input_dim,
            actual: rows * cols,
        });
    }
    let mut images = Vec::with_capacity(16 + ds.features.len());
    images.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend((ds.len() as u32).to_be_bytes());
    images.extend((rows as u32).to_be_bytes());
    images.extend((cols as u32).to_be_bytes());
    images.extend(ds.features.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend(IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend((ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&y| y as u8));
    Ok((images, labels))
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", content = "params", rename_all = "snake_case")]
pub enum PartitionScheme {
    HeteroDirichlet { alpha: f64, min_size: usize },
    Shards { shards_per_client: usize },
    NoniidLabel { labels_per_client: usize, size_jitter: f64 },
    LabelSkew { labels_per_client: usize },
}

/// Disjoint per-client index lists into a source dataset.
///
/// Serializes as `{scheme, params, seed, assignments}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    #[serde(flatten)]
    pub scheme: PartitionScheme,
    pub seed: Option<u64>,
    pub assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn total_samples(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Check disjointness, bounds, and non-emptiness against a source of
    /// `source_len` samples.
    pub fn validate(&self, source_len: usize) -> Result<()> {
        let mut seen = vec![false; source_len];
        for (k, idx) in self.assignments.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::InfeasiblePartition(format!("client {k} is empty")));
            }
            for &i in idx {
                if i >= source_len {
                    return Err(Error::InfeasiblePartition(format!(
                        "client {k} references index {i} outside source of {source_len}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InfeasiblePartition(format!(
                        "index {i} assigned twice"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `[client][label]` sample counts.
    pub fn label_histograms(&self, ds: &LabeledDataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|idx| {
                let mut h = vec![0; ds.num_classes];
                for &i in idx {
                    h[ds.labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn indices_by_label(ds: &LabeledDataset) -> Vec<Vec<usize>> {
    let mut by_label = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_label[y].push(i);
    }
    by_label
}

fn check_clients(num_clients: usize) -> Result<()> {
    if num_clients < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 clients, got {num_clients}"
        )));
    }
    Ok(())
}

fn dirichlet_sample(alpha: f64, k: usize, rng: &mut SimRng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Per-label Dirichlet proportion splitting.
///
/// For each label the samples are shuffled and cut according to a fresh
/// `Dirichlet(alpha·1)` draw over clients; clients that already hold more
/// than `n/N` samples receive no further samples for that label. The whole
/// draw is repeated until every client holds at least `min_size` samples.
pub fn partition_hetero_dirichlet(
    ds: &LabeledDataset,
    num_clients: usize,
    alpha: f64,
    min_size: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    check_clients(num_clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    let n = ds.len();
    let need = min_size.max(1);
    if num_clients * need > n {
        return Err(Error::InfeasiblePartition(format!(
            "{num_clients} clients x min_size {need} exceeds {n} samples"
        )));
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let by_label = indices_by_label(ds);
    let cap = n as f64 / num_clients as f64;

    for _ in 0..DIRICHLET_MAX_RETRIES {
        let mut batches: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for label_idx in &by_label {
            if label_idx.is_empty() {
                continue;
            }
            let mut idx = label_idx.clone();
            idx.shuffle(&mut rng);
            let mut p = dirichlet_sample(alpha, num_clients, &mut rng);
            for (pj, b) in p.iter_mut().zip(&batches) {
                if b.len() as f64 >= cap {
                    *pj = 0.0;
                }
            }
            let sum: f64 = p.iter().sum();
            if sum > 0.0 {
                p.iter_mut().for_each(|v| *v /= sum);
            } else {
                p = vec![1.0 / num_clients as f64; num_clients];
            }
            let m = idx.len();
            let mut start = 0;
            let mut acc = 0.0;
            for (j, pj) in p.iter().enumerate() {
                acc += pj;
                let end = if j + 1 == num_clients {
                    m
                } else {
                    ((acc * m as f64) as usize).clamp(start, m)
                };
                batches[j].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if batches.iter().all(|b| b.len() >= need) {
            for b in &mut batches {
                b.sort_unstable();
            }
            return Ok(PartitionPlan {
                scheme: PartitionScheme::HeteroDirichlet { alpha, min_size },
                seed: Some(seed),
                assignments: batches,
            });
        }
    }
    Err(Error::InfeasiblePartition(format!(
        "no Dirichlet(alpha={alpha}) draw gave every client >= {need} samples in {DIRICHLET_MAX_RETRIES} attempts"
    )))
}

/// Label-sorted contiguous shards, `shards_per_client` per client.
///
/// The label-sorted order is cut into `N·s` shards of `⌊n/(N·s)⌋` samples
/// (the remainder at the end of the sorted order is dropped) and a seeded
/// permutation of shard ids is dealt out `s` at a time.
pub fn partition_shards(
    ds: &LabeledDataset,
    num_clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    check_clients(num_clients)?;
    if shards_per_client < 1 {
        return Err(Error::invalid("shards_per_client must be >= 1"));
    }
    let num_shards = num_clients * shards_per_client;
    let n = ds.len();
    if num_shards > n {
        return Err(Error::InfeasiblePartition(format!(
            "{num_shards} shards requested from {n} samples"
        )));
    }
    let shard_size = n / num_shards;
    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by_key(|&i| (ds.labels[i], i));

    let mut rng = SimRng::seed_from_u64(seed);
    let mut shard_ids: Vec<usize> = (0..num_shards).collect();
    shard_ids.shuffle(&mut rng);

    let assignments = shard_ids
        .chunks(shards_per_client)
        .map(|ids| {
            let mut idx: Vec<usize> = ids
                .iter()
                .flat_map(|&s| sorted[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(PartitionPlan {
        scheme: PartitionScheme::Shards { shards_per_client },
        seed: Some(seed),
        assignments,
    })
}

/// Split `count` items among holders with the given positive weights. Each
/// holder gets at least one; the rest is apportioned by largest remainder.
fn apportion(count: usize, weights: &[f64]) -> Vec<usize> {
    let h = weights.len();
    let extra = count - h;
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * extra as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = extra - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        alloc[j] += 1;
        left -= 1;
    }
    alloc.iter().map(|a| a + 1).collect()
}

fn split_label_among_holders(
    ds: &LabeledDataset,
    holders_of: &[Vec<usize>],
    num_clients: usize,
    mut weight_of: impl FnMut(usize) -> f64,
    mut order_label: impl FnMut(&mut Vec<usize>),
) -> Result<Vec<Vec<usize>>> {
    let by_label = indices_by_label(ds);
    let mut assignments = vec![Vec::new(); num_clients];
    for (label, holders) in holders_of.iter().enumerate() {
        if holders.is_empty() {
            continue;
        }
        let mut idx = by_label[label].clone();
        if idx.len() < holders.len() {
            return Err(Error::InfeasiblePartition(format!(
                "label {label} has {} samples but {} clients need it",
                idx.len(),
                holders.len()
            )));
        }
        order_label(&mut idx);
        let weights: Vec<f64> = holders.iter().map(|&k| weight_of(k)).collect();
        let alloc = apportion(idx.len(), &weights);
        let mut start = 0;
        for (&k, take) in holders.iter().zip(alloc) {
            assignments[k].extend_from_slice(&idx[start..start + take]);
            start += take;
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(assignments)
}

/// Each client holds exactly `labels_per_client` labels; the sample count
/// a client takes from each of its labels is scaled by a per-client factor
/// `1 + size_jitter·u`, `u ~ U(-1, 1)`.
pub fn partition_noniid_label(
    ds: &LabeledDataset,
    num_clients: usize,
    labels_per_client: usize,
    size_jitter: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    check_clients(num_clients)?;
    let c = ds.num_classes;
    if labels_per_client < 1 || labels_per_client > c {
        return Err(Error::invalid(format!(
            "labels_per_client must be in [1, {c}], got {labels_per_client}"
        )));
    }
    if !(0.0..1.0).contains(&size_jitter) {
        return Err(Error::invalid(format!(
            "size_jitter must be in [0,1), got {size_jitter}"
        )));
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let mut label_perm: Vec<usize> = (0..c).collect();
    label_perm.shuffle(&mut rng);
    let factors: Vec<f64> = (0..num_clients)
        .map(|_| 1.0 + size_jitter * rng.random_range(-1.0..1.0))
        .collect();

    let mut holders_of = vec![Vec::new(); c];
    for k in 0..num_clients {
        for j in 0..labels_per_client {
            holders_of[label_perm[(k * labels_per_client + j) % c]].push(k);
        }
    }
    let assignments = split_label_among_holders(
        ds,
        &holders_of,
        num_clients,
        |k| factors[k],
        |idx| idx.shuffle(&mut rng),
    )?;
    Ok(PartitionPlan {
        scheme: PartitionScheme::NoniidLabel {
            labels_per_client,
            size_jitter,
        },
        seed: Some(seed),
        assignments,
    })
}

/// Client `k` holds labels `{(k·K + j) mod C : j < K}`; each label's samples
/// are split evenly, in index order, among the clients holding it.
pub fn label_skew_partition(
    ds: &LabeledDataset,
    num_clients: usize,
    labels_per_client: usize,
) -> Result<PartitionPlan> {
    if num_clients < 1 {
        return Err(Error::invalid("need at least 1 client"));
    }
    let c = ds.num_classes;
    if labels_per_client < 1 {
        return Err(Error::invalid("labels per client must be >= 1"));
    }
    if labels_per_client > c {
        return Err(Error::invalid(format!(
            "labels per client {labels_per_client} exceeds {c} classes"
        )));
    }
    let mut holders_of = vec![Vec::new(); c];
    for k in 0..num_clients {
        for j in 0..labels_per_client {
            holders_of[(k * labels_per_client + j) % c].push(k);
        }
    }
    let assignments = split_label_among_holders(ds, &holders_of, num_clients, |_| 1.0, |_| {})?;
    Ok(PartitionPlan {
        scheme: PartitionScheme::LabelSkew { labels_per_client },
        seed: None,
        assignments,
    })
}

/// Dispatch on a scheme description.
pub fn partition(
    ds: &LabeledDataset,
    num_clients: usize,
    scheme: &PartitionScheme,
    seed: u64,
) -> Result<PartitionPlan> {
    let plan = match *scheme {
        PartitionScheme::HeteroDirichlet { alpha, min_size } => {
            partition_hetero_dirichlet(ds, num_clients, alpha, min_size, seed)
        }
        PartitionScheme::Shards { shards_per_client } => {
            partition_shards(ds, num_clients, shards_per_client, seed)
        }
        PartitionScheme::NoniidLabel {
            labels_per_client,
            size_jitter,
        } => partition_noniid_label(ds, num_clients, labels_per_client, size_jitter, seed),
        PartitionScheme::LabelSkew { labels_per_client } => {
            label_skew_partition(ds, num_clients, labels_per_client)
        }
    }?;
    plan.validate(ds.len())?;
    Ok(plan)
}

pub fn distinct_labels(ds: &LabeledDataset, idx: &[usize]) -> BTreeSet<usize> {
    idx.iter().map(|&i| ds.labels[i]).collect()
}
