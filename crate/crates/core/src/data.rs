//! Datasets: IDX ingestion, Gaussian-cluster synthesis, and device partitions.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled samples. `features` has shape `[N, ...sample shape]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().len() < 2 {
            return Err(Error::Shape("features need a leading sample axis".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
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

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Features and labels of the given rows.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (features, labels) = self.batch(indices)?;
        Ok(Dataset {
            features,
            labels,
            classes: self.classes,
        })
    }

    /// Flattens every sample to a vector.
    pub fn flattened(&self) -> Dataset {
        let n = self.len();
        let w = self.features.row_len();
        Dataset {
            features: Tensor::new(vec![n, w], self.features.data().to_vec())
                .expect("same element count"),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    /// Sample count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            needed: offset + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]`; the
/// label count fixes the class count (max label + 1, at least 10).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img = std::fs::read(images_path)?;
    let lab = std::fs::read(labels_path)?;
    parse_idx(&img, images_path, &lab, labels_path)
}

pub fn parse_idx(img: &[u8], images_path: &Path, lab: &[u8], labels_path: &Path) -> Result<Dataset> {
    check_magic(img, IDX_IMAGES_MAGIC, images_path)?;
    check_magic(lab, IDX_LABELS_MAGIC, labels_path)?;

    let n_images = read_u32(img, 4, images_path)? as usize;
    let rows = read_u32(img, 8, images_path)? as usize;
    let cols = read_u32(img, 12, images_path)? as usize;
    let n_labels = read_u32(lab, 4, labels_path)? as usize;

    let pixels = n_images * rows * cols;
    if img.len() < 16 + pixels {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            needed: 16 + pixels,
            found: img.len(),
        });
    }
    if lab.len() < 8 + n_labels {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            needed: 8 + n_labels,
            found: lab.len(),
        });
    }
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    if n_images == 0 {
        return Err(Error::EmptyDataset);
    }

    let data = img[16..16 + pixels]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = lab[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(Tensor::new(vec![n_images, rows, cols], data)?, labels, classes)
}

/// Gaussian class clusters: class means drawn from `N(0, separation² I)`,
/// samples from `N(mean, I)`. Labels cycle through the classes.
pub fn generate_synthetic(
    classes: usize,
    dim: usize,
    samples_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    generate_synthetic_split(classes, dim, &[samples_per_class], separation, seed)
        .map(|mut v| v.remove(0))
}

/// Several datasets drawn from the same cluster means (e.g. train and test).
pub fn generate_synthetic_split(
    classes: usize,
    dim: usize,
    samples_per_class: &[usize],
    separation: f64,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if classes == 0 || dim == 0 || samples_per_class.contains(&0) {
        return Err(Error::InvalidArgument(
            "synthetic data needs positive classes, dim and sample counts".into(),
        ));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "separation must be finite and non-negative, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| separation * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect()
        })
        .collect();
    samples_per_class
        .iter()
        .map(|&per_class| {
            let n = classes * per_class;
            let mut data = Vec::with_capacity(n * dim);
            let mut labels = Vec::with_capacity(n);
            for s in 0..n {
                let c = s % classes;
                for mean in &means[c] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(mean + z);
                }
                labels.push(c);
            }
            Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
        })
        .collect()
}

/// Device id → row indices into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub devices: BTreeMap<usize, Vec<usize>>,
}

impl Partition {
    pub fn indices(&self, device: usize) -> &[usize] {
        &self.devices[&device]
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.devices.values().flatten().all(|i| seen.insert(*i))
    }

    pub fn materialize(&self, parent: &Dataset) -> Result<Vec<Dataset>> {
        self.devices.values().map(|idx| parent.subset(idx)).collect()
    }
}

/// Seeded shuffle, then contiguous disjoint slices.
pub fn partition_iid(
    dataset: &Dataset,
    num_devices: usize,
    per_device: usize,
    seed: u64,
) -> Result<Partition> {
    let need = num_devices * per_device;
    if need > dataset.len() {
        return Err(Error::InsufficientSamples(format!(
            "{num_devices} devices x {per_device} samples needs {need}, dataset has {}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let devices = (0..num_devices)
        .map(|k| (k, order[k * per_device..(k + 1) * per_device].to_vec()))
        .collect();
    Ok(Partition { devices })
}

/// Each device draws two distinct classes and takes half its samples from
/// each (odd remainder to the first). Classes are drawn without replacement
/// from a shuffled pool that is refilled once exhausted.
pub fn partition_noniid_2class(
    dataset: &Dataset,
    num_devices: usize,
    per_device: usize,
    seed: u64,
) -> Result<Partition> {
    let classes = dataset.classes();
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "two-class partition needs at least 2 classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    for pool in &mut by_class {
        pool.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; classes];

    let mut class_pool: Vec<usize> = Vec::new();
    let mut draw = |rng: &mut ChaCha8Rng, exclude: Option<usize>| -> usize {
        if class_pool.is_empty() || class_pool.iter().all(|&c| Some(c) == exclude) {
            let mut fresh: Vec<usize> = (0..classes).collect();
            fresh.shuffle(rng);
            // keep any leftover so every class is used once per cycle
            class_pool.extend(fresh);
        }
        let pos = class_pool
            .iter()
            .rposition(|&c| Some(c) != exclude)
            .expect("pool holds another class");
        class_pool.remove(pos)
    };

    let mut devices = BTreeMap::new();
    for k in 0..num_devices {
        let first = draw(&mut rng, None);
        let second = draw(&mut rng, Some(first));
        let take = [(first, per_device - per_device / 2), (second, per_device / 2)];
        let mut indices = Vec::with_capacity(per_device);
        for (class, count) in take {
            let available = by_class[class].len() - cursor[class];
            if count > available {
                return Err(Error::ClassExhausted {
                    class,
                    needed: count,
                    available,
                });
            }
            indices.extend_from_slice(&by_class[class][cursor[class]..cursor[class] + count]);
            cursor[class] += count;
        }
        devices.insert(k, indices);
    }
    Ok(Partition { devices })
}
