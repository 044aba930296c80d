//! Datasets: synthetic blob generation, IDX ingestion, non-IID
//! partitioning, and the data-corruption model for unreliable clients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};

/// Feature matrix (row-major, n x dim) plus integer class labels in
/// `[0, n_classes)`. May be empty as a value; generators and loaders always
/// produce nonempty datasets, and training/evaluation reject empty inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: labels.len(),
            });
        }
        let dim = rows.first().map_or(0, |r| r.len());
        let mut features = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            features.extend_from_slice(row);
        }
        for &y in &labels {
            if y >= n_classes {
                return Err(Error::DimensionMismatch {
                    expected: n_classes,
                    got: y,
                });
            }
        }
        Ok(Self {
            features,
            labels,
            dim,
            n_classes,
        })
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

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// New dataset holding the given rows (indices may repeat or reorder).
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            features,
            labels,
            dim: self.dim,
            n_classes: self.n_classes,
        }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Row indices grouped by class, ascending within each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            groups[y].push(i);
        }
        groups
    }

    /// Stratified (train, test) split. Each class contributes
    /// `round(test_fraction * count)` test rows, capped so that at least one
    /// training row per class survives. Deterministic per seed.
    pub fn stratified_split(&self, test_fraction: f64, seed: u64) -> (Self, Self) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for mut group in self.class_indices() {
            group.shuffle(&mut rng);
            let mut n_test = (test_fraction * group.len() as f64).round() as usize;
            if n_test >= group.len() && !group.is_empty() {
                n_test = group.len() - 1;
            }
            test_idx.extend_from_slice(&group[..n_test]);
            train_idx.extend_from_slice(&group[n_test..]);
        }
        (self.subset(&train_idx), self.subset(&test_idx))
    }
}

/// Class centers used by [`generate_synthetic`]: distinct points on a
/// `class_separation`-spaced lattice, shifted so their mean is the origin.
/// Pairwise center distance is at least `class_separation`.
pub fn synthetic_centers(n_classes: usize, dim: usize, class_separation: f64) -> Vec<Vec<f64>> {
    // Smallest base whose dim-digit expansions cover all classes.
    let mut base = 1usize;
    while (base as u128).pow(dim.min(64) as u32) < n_classes as u128 {
        base += 1;
    }
    let mut centers = Vec::with_capacity(n_classes);
    for k in 0..n_classes {
        let mut coords = vec![0.0; dim];
        let mut rem = k;
        for c in coords.iter_mut() {
            *c = (rem % base) as f64 * class_separation;
            rem /= base;
        }
        centers.push(coords);
    }
    let mut mean = vec![0.0; dim];
    for c in &centers {
        for (m, x) in mean.iter_mut().zip(c) {
            *m += x / n_classes as f64;
        }
    }
    for c in &mut centers {
        for (x, m) in c.iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    centers
}

/// Gaussian blobs: near-equal class counts, unit isotropic noise around
/// centers from [`synthetic_centers`]. Deterministic per seed.
pub fn generate_synthetic(
    n_samples: usize,
    n_classes: usize,
    dim: usize,
    class_separation: f64,
    seed: u64,
) -> LabeledDataset {
    assert!(n_classes >= 1 && dim >= 1, "degenerate blob layout");
    assert!(n_samples >= n_classes, "need at least one sample per class");
    assert!(class_separation > 0.0, "class separation must be positive");

    let centers = synthetic_centers(n_classes, dim, class_separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(n_samples * dim);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % n_classes;
        labels.push(class);
        for &c in &centers[class] {
            features.push(c + noise.sample(&mut rng));
        }
    }
    LabeledDataset {
        features,
        labels,
        dim,
        n_classes,
    }
}

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        Ok(Self {
            path,
            bytes: std::fs::read(path)?,
            pos: 0,
        })
    }

    fn err(&self, field: &'static str, message: impl Into<String>) -> Error {
        Error::IdxFormat {
            path: self.path.display().to_string(),
            field,
            message: message.into(),
        }
    }

    fn read_u32(&mut self, field: &'static str) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(self.err(field, "file truncated"));
        }
        let raw: [u8; 4] = self.bytes[self.pos..self.pos + 4].try_into().expect("4 bytes");
        self.pos += 4;
        Ok(u32::from_be_bytes(raw))
    }

    fn payload(&self, field: &'static str, expected: usize) -> Result<&[u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining != expected {
            return Err(self.err(
                field,
                format!("expected {expected} payload bytes, found {remaining}"),
            ));
        }
        Ok(&self.bytes[self.pos..])
    }
}

/// Loads an IDX image/label pair (the MNIST container format: 4-byte
/// big-endian magic and dimension sizes, unsigned-byte payload). Pixels are
/// scaled to `[0, 1]` and flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let mut images = IdxReader::open(images_path)?;
    let magic = images.read_u32("magic")?;
    if magic != IMAGES_MAGIC {
        return Err(images.err("magic", format!("expected 0x{IMAGES_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let count = images.read_u32("count")? as usize;
    let rows = images.read_u32("rows")? as usize;
    let cols = images.read_u32("cols")? as usize;
    let pixels = images.payload("pixels", count * rows * cols)?;

    let mut labels_file = IdxReader::open(labels_path)?;
    let magic = labels_file.read_u32("magic")?;
    if magic != LABELS_MAGIC {
        return Err(labels_file.err("magic", format!("expected 0x{LABELS_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let label_count = labels_file.read_u32("count")? as usize;
    if label_count != count {
        return Err(labels_file.err(
            "count",
            format!("{count} images but {label_count} labels"),
        ));
    }
    let raw_labels = labels_file.payload("labels", count)?;

    let features: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Ok(LabeledDataset {
        features,
        labels,
        dim: rows * cols,
        n_classes,
    })
}

/// Per-client index lists into a parent dataset.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub shards: Vec<Vec<usize>>,
    pub lambda: f64,
}

impl PartitionPlan {
    /// Shards must be pairwise disjoint, cover the parent dataset, and each
    /// hold at least one sample.
    pub fn check_conservation(&self, dataset_len: usize) -> Result<()> {
        let mut seen = vec![false; dataset_len];
        let mut total = 0;
        for shard in &self.shards {
            if shard.is_empty() {
                return Err(Error::InfeasiblePartition {
                    n_samples: dataset_len,
                    n_clients: self.shards.len(),
                });
            }
            for &i in shard {
                if i >= dataset_len || seen[i] {
                    return Err(Error::InfeasiblePartition {
                        n_samples: dataset_len,
                        n_clients: self.shards.len(),
                    });
                }
                seen[i] = true;
                total += 1;
            }
        }
        if total != dataset_len {
            return Err(Error::InfeasiblePartition {
                n_samples: dataset_len,
                n_clients: self.shards.len(),
            });
        }
        Ok(())
    }
}

/// Class-wise Dirichlet allocation: for each class, client proportions are
/// drawn from Dirichlet(lambda, ..., lambda) and that class's rows are split
/// accordingly (largest-remainder rounding). A repair pass moves single
/// samples from the largest shard until every client holds at least one.
pub fn dirichlet_partition(
    dataset: &LabeledDataset,
    n_clients: usize,
    lambda: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    assert!(n_clients >= 1, "need at least one client");
    assert!(lambda > 0.0, "Dirichlet concentration must be positive");
    if dataset.len() < n_clients {
        return Err(Error::InfeasiblePartition {
            n_samples: dataset.len(),
            n_clients,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(lambda, 1.0).expect("valid shape");
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];

    for mut class_rows in dataset.class_indices() {
        if class_rows.is_empty() {
            continue;
        }
        class_rows.shuffle(&mut rng);

        // Dirichlet proportions via normalized Gamma draws.
        let mut weights: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = weights.iter().sum();
        if sum <= f64::MIN_POSITIVE {
            weights = vec![1.0; n_clients];
        }
        let total: f64 = weights.iter().sum();
        let n_c = class_rows.len();

        // Largest-remainder rounding of the target counts.
        let quotas: Vec<f64> = weights.iter().map(|w| w / total * n_c as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut leftover = n_c - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..n_clients).collect();
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.partial_cmp(&fa).expect("finite quota").then(a.cmp(&b))
        });
        for &client in &order {
            if leftover == 0 {
                break;
            }
            counts[client] += 1;
            leftover -= 1;
        }

        let mut cursor = 0;
        for (client, &take) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&class_rows[cursor..cursor + take]);
            cursor += take;
        }
    }

    // Repair: every client must end up with at least one sample.
    loop {
        let Some(empty) = shards.iter().position(|s| s.is_empty()) else {
            break;
        };
        let donor = shards
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("nonempty roster");
        let moved = shards[donor].pop().expect("donor has samples");
        shards[empty].push(moved);
    }

    let plan = PartitionPlan { shards, lambda };
    plan.check_conservation(dataset.len())?;
    Ok(plan)
}

/// Copy of the dataset with i.i.d. zero-mean Gaussian noise of standard
/// deviation `sigma` added to every feature entry. Labels are untouched.
pub fn corrupt_features(dataset: &LabeledDataset, sigma: f64, seed: u64) -> LabeledDataset {
    assert!(sigma >= 0.0, "noise level must be non-negative");
    let mut out = dataset.clone();
    if sigma == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    for x in &mut out.features {
        *x += noise.sample(&mut rng);
    }
    out
}
