//! Synthetic dataset generation, on-disk dataset loading, and IID / non-IID
//! partitioning across simulated devices.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    Unspecified,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Test => write!(f, "test"),
            SplitTag::Unspecified => write!(f, "unspecified"),
        }
    }
}

/// Labeled feature vectors, row-major.
#[derive(Clone, Debug)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    split: SplitTag,
    provenance: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
        split: SplitTag,
        provenance: String,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} samples of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::LabelOutOfRange { label: y, num_classes });
            }
        }
        Ok(Self { features, dim, labels, num_classes, split, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gather rows by index into a batch matrix plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
        }
        (
            Matrix::from_vec(indices.len(), self.dim, data).expect("consistent by construction"),
            labels,
        )
    }

    /// Materialize a subset (used to hand each device its local shard).
    pub fn subset(&self, indices: &[usize], provenance: String) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (m, labels) = self.batch(indices);
        Dataset::new(m.data().to_vec(), self.dim, labels, self.num_classes, self.split, provenance)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Interleaved 2-D spirals, one arm per class. Each sample draws a position
/// `t ~ U[0,1)` along its arm, so two draws with different seeds are disjoint
/// samples of the same arms. `noise_std` jitters the coordinates.
pub fn gen_spiral(n_per_class: usize, num_classes: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || num_classes == 0 {
        return Err(Error::InvalidConfig("n_per_class and num_classes must be >= 1".into()));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise_std must be >= 0, got {noise_std}")));
    }
    const INNER_RADIUS: f64 = 0.15;
    const TURNS: f64 = 1.25;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit std");
    let n = n_per_class * num_classes;
    let mut features = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        let phase = class as f64 * std::f64::consts::TAU / num_classes as f64;
        for _ in 0..n_per_class {
            let t: f64 = rng.random();
            let radius = INNER_RADIUS + (1.0 - INNER_RADIUS) * t;
            let angle = phase + TURNS * std::f64::consts::TAU * t;
            let mut x = radius * angle.cos();
            let mut y = radius * angle.sin();
            if noise_std > 0.0 {
                x += noise_std * normal.sample(&mut rng);
                y += noise_std * normal.sample(&mut rng);
            }
            features.push(x);
            features.push(y);
            labels.push(class);
        }
    }
    Dataset::new(
        features,
        2,
        labels,
        num_classes,
        SplitTag::Unspecified,
        format!("spiral(n_per_class={n_per_class}, classes={num_classes}, noise={noise_std}, seed={seed})"),
    )
}

/// Gaussian clusters (unit std) at seeded random centers with pairwise
/// center distance at least `separation`. Fails if the centers cannot be
/// placed within a bounded number of retries.
pub fn gen_blobs(
    n_per_class: usize,
    num_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || num_classes == 0 || dim == 0 {
        return Err(Error::InvalidConfig("n_per_class, num_classes, dim must be >= 1".into()));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::InvalidConfig(format!("separation must be >= 0, got {separation}")));
    }
    const MAX_TRIES: usize = 1000;
    let box_half = (2.0 * separation).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit std");

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let candidate: Vec<f64> =
                (0..dim).map(|_| rng.random_range(-box_half..box_half)).collect();
            let ok = centers.iter().all(|c| {
                let d2: f64 = c.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= separation
            });
            if ok {
                centers.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place center for class {class} with separation {separation} after {MAX_TRIES} tries"
            )));
        }
    }

    let n = n_per_class * num_classes;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &c in center {
                features.push(c + normal.sample(&mut rng));
            }
            labels.push(class);
        }
    }
    Dataset::new(
        features,
        dim,
        labels,
        num_classes,
        SplitTag::Unspecified,
        format!("blobs(n_per_class={n_per_class}, classes={num_classes}, dim={dim}, sep={separation}, seed={seed})"),
    )
}

/// Load an IDX image/label file pair (big-endian MNIST container format).
/// Pixels are scaled from `0..=255` to `[0, 1]` and flattened.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;

    let (image_dims, image_payload) = parse_idx_header(&image_bytes, IDX_IMAGES_MAGIC, 3)?;
    let (label_dims, label_payload) = parse_idx_header(&label_bytes, IDX_LABELS_MAGIC, 1)?;

    let count = image_dims[0];
    let item: usize = image_dims[1..].iter().product();
    if label_dims[0] != count {
        return Err(Error::IdxCountMismatch { images: count, labels: label_dims[0] });
    }
    let features: Vec<f64> = image_payload.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_payload.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        features,
        item,
        labels,
        num_classes,
        SplitTag::Unspecified,
        format!("idx({}, {})", images_path.display(), labels_path.display()),
    )
}

fn parse_idx_header(bytes: &[u8], expected_magic: u32, expected_ndim: usize) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated { needed: 4, got: bytes.len() });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != expected_magic {
        return Err(Error::IdxBadMagic { found: magic, expected: expected_magic });
    }
    let header = 4 + 4 * expected_ndim;
    if bytes.len() < header {
        return Err(Error::IdxTruncated { needed: header, got: bytes.len() });
    }
    let mut dims = Vec::with_capacity(expected_ndim);
    for i in 0..expected_ndim {
        let o = 4 + 4 * i;
        dims.push(u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize);
    }
    let payload_len: usize = dims.iter().product();
    if bytes.len() < header + payload_len {
        return Err(Error::IdxTruncated { needed: header + payload_len, got: bytes.len() });
    }
    Ok((dims, &bytes[header..header + payload_len]))
}

/// Load a CSV dataset with header row `x0,..,xd,label`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    if headers.len() < 2 || headers.iter().last() != Some("label") {
        return Err(Error::Data("csv header must be x0,..,xd,label".into()));
    }
    let dim = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(e.to_string()))?;
        if record.len() != dim + 1 {
            return Err(Error::Data(format!("csv row has {} fields, expected {}", record.len(), dim + 1)));
        }
        for v in record.iter().take(dim) {
            features.push(v.trim().parse::<f64>().map_err(|e| Error::Data(e.to_string()))?);
        }
        labels.push(
            record[dim]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Data(format!("bad label: {e}")))?,
        );
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        features,
        dim,
        labels,
        num_classes,
        SplitTag::Unspecified,
        format!("csv({})", path.display()),
    )
}

/// Disjoint per-device index lists covering the dataset.
#[derive(Clone, Debug)]
pub struct PartitionPlan {
    pub device_indices: Vec<Vec<usize>>,
    pub method: String,
}

impl PartitionPlan {
    /// Disjointness and per-device nonemptiness.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (d, idx) in self.device_indices.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Data(format!("device {d} received no samples")));
            }
            for &i in idx {
                if i >= n || seen[i] {
                    return Err(Error::Data(format!("index {i} out of range or duplicated")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Random permutation split into near-equal contiguous chunks; the remainder
/// is spread over the first devices.
pub fn partition_iid(dataset: &Dataset, num_devices: usize, seed: u64) -> Result<PartitionPlan> {
    let n = dataset.len();
    if num_devices == 0 || num_devices > n {
        return Err(Error::InvalidConfig(format!(
            "cannot split {n} samples across {num_devices} devices"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let base = n / num_devices;
    let remainder = n % num_devices;
    let mut device_indices = Vec::with_capacity(num_devices);
    let mut offset = 0;
    for d in 0..num_devices {
        let take = base + usize::from(d < remainder);
        device_indices.push(indices[offset..offset + take].to_vec());
        offset += take;
    }
    let plan = PartitionPlan { device_indices, method: "iid".into() };
    plan.validate(n)?;
    Ok(plan)
}

/// Label-skewed split: per class, device shares are drawn from
/// `Dirichlet(alpha * 1_J)` (sampled as normalized Gammas). Every device is
/// guaranteed at least one sample by minimal reassignment from the largest
/// device.
pub fn partition_dirichlet(
    dataset: &Dataset,
    num_devices: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    let n = dataset.len();
    if num_devices == 0 || num_devices > n {
        return Err(Error::InvalidConfig(format!(
            "cannot split {n} samples across {num_devices} devices"
        )));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for i in 0..n {
        per_class[dataset.label(i)].push(i);
    }
    let mut device_indices: Vec<Vec<usize>> = vec![Vec::new(); num_devices];
    for class_indices in per_class.iter_mut() {
        if class_indices.is_empty() {
            continue;
        }
        class_indices.shuffle(&mut rng);
        let mut shares: Vec<f64> = (0..num_devices).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = shares.iter().sum();
        if total <= 0.0 {
            shares = vec![1.0; num_devices];
        }
        let counts = largest_remainder_counts(&shares, class_indices.len());
        let mut offset = 0;
        for (d, &c) in counts.iter().enumerate() {
            device_indices[d].extend_from_slice(&class_indices[offset..offset + c]);
            offset += c;
        }
    }
    // nonemptiness by minimal reassignment
    loop {
        let Some(empty) = device_indices.iter().position(|v| v.is_empty()) else {
            break;
        };
        let donor = device_indices
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .map(|(d, _)| d)
            .expect("at least one device");
        let moved = device_indices[donor].pop().expect("donor non-empty");
        device_indices[empty].push(moved);
    }
    let plan = PartitionPlan { device_indices, method: format!("dirichlet({alpha})") };
    plan.validate(n)?;
    Ok(plan)
}

/// Integer apportionment of `total` proportional to `shares`.
fn largest_remainder_counts(shares: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let quotas: Vec<f64> = shares.iter().map(|&s| s / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|&q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for i in 0..(total - assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}
