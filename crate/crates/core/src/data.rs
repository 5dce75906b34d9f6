//! Dataset ingestion (IDX, CIFAR-10 binary), synthetic desk-scale tasks,
//! and seeded minibatch streams.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Elem, Tensor};

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

/// Labeled inputs in [0, 1], immutable after load.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    /// [N, C, H, W]; synthetic flat tasks use (1, 1, D).
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            inputs,
            labels,
            classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.inputs.batch() != self.labels.len() {
            return Err(Error::CountMismatch {
                images: self.inputs.batch(),
                labels: self.labels.len(),
            });
        }
        for &label in &self.labels {
            if label >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.classes,
                });
            }
        }
        for &v in self.inputs.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "dataset {} has input value {v} outside [0, 1]",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Input shape per example: (C, H, W).
    pub fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.inputs.shape();
        (s[1], s[2], s[3])
    }

    /// Batch tensor plus labels for the given example indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let t = self.inputs.gather(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((t, labels))
    }

    /// New dataset restricted to the given indices (keeps name and classes).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (inputs, labels) = self.batch(indices)?;
        Ok(Dataset {
            name: self.name.clone(),
            inputs,
            labels,
            classes: self.classes,
        })
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Content hash over shape, pixel bytes, labels, and class count. Chain
    /// records store this to refuse replay against altered data.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed_bytes = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for &d in self.inputs.shape() {
            feed_bytes(&(d as u64).to_le_bytes());
        }
        for &v in self.inputs.data() {
            feed_bytes(&(v as f64).to_le_bytes());
        }
        for &l in &self.labels {
            feed_bytes(&(l as u64).to_le_bytes());
        }
        feed_bytes(&(self.classes as u64).to_le_bytes());
        h
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile(path.display().to_string()))
}

/// Load an IDX image/label file pair (the standard MNIST layout):
/// big-endian headers, pixel bytes scaled by 1/255 into [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&img_bytes, 12, images_path)? as usize;
    let pixels = img_bytes
        .get(16..16 + n * rows * cols)
        .ok_or_else(|| Error::TruncatedFile(images_path.display().to_string()))?;

    let magic = read_u32_be(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABEL_MAGIC,
            found: magic,
        });
    }
    let n_labels = read_u32_be(&lbl_bytes, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let label_bytes = lbl_bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::TruncatedFile(labels_path.display().to_string()))?;

    let data: Vec<Elem> = pixels.iter().map(|&b| b as Elem / 255.0).collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    Dataset::new("mnist", inputs, labels, 10)
}

/// Load CIFAR-10 binary batches: 3073-byte records of one label byte plus
/// 3072 channel-major (R, G, B) pixel bytes, scaled by 1/255.
pub fn load_cifar10(batch_paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut data: Vec<Elem> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 || bytes.is_empty() {
            return Err(Error::TruncatedFile(path.display().to_string()));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label >= 10 {
                return Err(Error::LabelOutOfRange { label, classes: 10 });
            }
            labels.push(label);
            data.extend(record[1..].iter().map(|&b| b as Elem / 255.0));
        }
    }
    let n = labels.len();
    let inputs = Tensor::new(vec![n, 3, 32, 32], data)?;
    Dataset::new("cifar10", inputs, labels, 10)
}

/// Synthetic task family for oracle tests.
#[derive(Clone, Copy, Debug)]
pub enum SyntheticSpec {
    /// Two classes centered at +-(mu, ..., mu) with unit isotropic noise,
    /// min-max rescaled into [0, 1].
    TwoGaussians { dim: usize, mu: f64 },
    /// Inner disk vs outer annulus in the plane, radial Gaussian noise.
    Ring,
}

/// Deterministic synthetic dataset; inputs have shape [N, 1, 1, D].
pub fn make_synthetic(spec: SyntheticSpec, n_per_class: usize, seed: u64) -> Result<Dataset> {
    let mut rng = SplitMix64::derive(seed, "synthetic");
    let (name, dim) = match spec {
        SyntheticSpec::TwoGaussians { dim, .. } => ("two_gaussians", dim),
        SyntheticSpec::Ring => ("ring", 2),
    };
    let n = 2 * n_per_class;
    let mut raw = vec![0.0f64; n * dim];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        labels.push(class);
        let row = &mut raw[i * dim..(i + 1) * dim];
        match spec {
            SyntheticSpec::TwoGaussians { mu, .. } => {
                let center = if class == 0 { -mu } else { mu };
                for v in row.iter_mut() {
                    *v = center + rng.normal();
                }
            }
            SyntheticSpec::Ring => {
                let radius = if class == 0 { 0.5 } else { 1.0 };
                let r = radius + 0.08 * rng.normal();
                let angle = rng.uniform(0.0, std::f64::consts::TAU);
                row[0] = r * angle.cos();
                row[1] = r * angle.sin();
            }
        }
    }
    // min-max rescale into [0, 1]
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data: Vec<Elem> = raw.iter().map(|&v| (((v - lo) / span) as Elem).clamp(0.0, 1.0)).collect();
    let inputs = Tensor::new(vec![n, 1, 1, dim], data)?;
    Dataset::new(name, inputs, labels, 2)
}

/// Seeded without-replacement minibatch stream. Each epoch is a fresh
/// shuffled permutation of all indices; the last batch of an epoch may be
/// short. Single-owner sequential state.
#[derive(Clone, Debug)]
pub struct MinibatchStream {
    n: usize,
    batch_size: usize,
    rng: SplitMix64,
    perm: Vec<usize>,
    pos: usize,
}

impl MinibatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        Self::with_rng(n, batch_size, SplitMix64::derive(seed, "minibatch"))
    }

    pub fn with_rng(n: usize, batch_size: usize, rng: SplitMix64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::BadBatchSize {
                batch: batch_size,
                len: n,
            });
        }
        Ok(MinibatchStream {
            n,
            batch_size,
            rng,
            perm: Vec::new(),
            pos: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Next batch of indices.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.perm.len() {
            self.perm = (0..self.n).collect();
            self.rng.shuffle(&mut self.perm);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.perm.len());
        let batch = self.perm[self.pos..end].to_vec();
        self.pos = end;
        batch
    }

    /// Serializable stream state (RNG state, permutation, cursor).
    pub fn state(&self) -> ((u64, u64), Vec<usize>, usize) {
        (self.rng.state(), self.perm.clone(), self.pos)
    }
}

/// Stream over a dataset, per the module contract.
pub fn minibatches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<MinibatchStream> {
    MinibatchStream::new(dataset.len(), batch_size, seed)
}
