//! Dataset loading, synthetic fixtures and client partitioning.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gaussian, shuffled_indices, substream};
use crate::tensor::Tensor;

/// Labeled image set with pixel values in [0,1].
#[derive(Debug, Clone)]
pub struct Dataset {
    /// [N, C, H, W]
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// [C, H, W] of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch_images(&self, indices: &[usize]) -> Tensor {
        self.images.select_rows(indices)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    fn validate(self) -> Result<Self> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidParam(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        if self
            .images
            .data()
            .iter()
            .any(|&v| !v.is_finite() || !(0.0..=1.0).contains(&v))
        {
            return Err(Error::NonFinite {
                context: "dataset pixels must be finite and in [0,1]".into(),
            });
        }
        Ok(self)
    }
}

/// Synthetic class-conditional gratings: each class has its own orientation
/// and frequency; samples vary by phase jitter and pixel noise so both the
/// classification task and the inversion task are learnable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub num_classes: usize,
    /// [C, H, W]
    pub image_shape: [usize; 3],
    /// Phase jitter half-range in radians; PI gives fully random phase.
    pub phase_jitter: f64,
    /// Std-dev of additive pixel noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_samples: 256,
            num_classes: 4,
            image_shape: [1, 8, 8],
            phase_jitter: 0.7,
            noise: 0.05,
        }
    }
}

/// Deterministic per seed. Labels are assigned round-robin, so class counts
/// are balanced within one sample.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.num_samples < spec.num_classes || spec.num_classes == 0 {
        return Err(Error::InvalidParam(format!(
            "synth dataset needs at least one sample per class ({} samples, {} classes)",
            spec.num_samples, spec.num_classes
        )));
    }
    let [c, h, w] = spec.image_shape;
    let mut rng = substream(seed, "synth-data", 0);
    let k = spec.num_classes;
    let mut data = Vec::with_capacity(spec.num_samples * c * h * w);
    let mut labels = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let class = i % k;
        labels.push(class);
        let theta = std::f64::consts::PI * class as f64 / k as f64;
        let freq = 1.0 + class as f64;
        let base_phase = 2.0 * std::f64::consts::PI * class as f64 / k as f64;
        let phase = base_phase + rng.gen_range(-spec.phase_jitter..=spec.phase_jitter);
        for _ in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let u = (y as f64 * theta.cos() + x as f64 * theta.sin()) / h as f64;
                    let g = (2.0 * std::f64::consts::PI * freq * u + phase).sin();
                    let v: f64 = 0.5 + 0.35 * g + spec.noise * gaussian(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Dataset {
        images: Tensor::from_vec(vec![spec.num_samples, c, h, w], data),
        labels,
        num_classes: k,
    }
    .validate()
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Load a classic IDX image/label pair (big-endian headers, one byte per
/// pixel scaled by 1/255).
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (images, h, w) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::IdxCountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let n = images.len();
    let mut data = Vec::with_capacity(n * h * w);
    for img in &images {
        data.extend(img.iter().map(|&b| b as f64 / 255.0));
    }
    let labels: Vec<usize> = labels.into_iter().map(|b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset {
        images: Tensor::from_vec(vec![n, 1, h, w], data),
        labels,
        num_classes,
    }
    .validate()
}

fn read_exact_or(path: &Path, r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::IdxTruncated {
        path: path.display().to_string(),
        detail: format!("while reading {what}"),
    })
}

fn read_u32_be(path: &Path, r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(path, r, &mut b, what)?;
    Ok(u32::from_be_bytes(b))
}

fn read_idx_images(path: &Path) -> Result<(Vec<Vec<u8>>, usize, usize)> {
    let mut f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let magic = read_u32_be(path, &mut f, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::IdxBadMagic {
            path: path.display().to_string(),
            got: magic,
            expected: IDX_IMAGE_MAGIC,
        });
    }
    let n = read_u32_be(path, &mut f, "image count")? as usize;
    let h = read_u32_be(path, &mut f, "row count")? as usize;
    let w = read_u32_be(path, &mut f, "column count")? as usize;
    if h == 0 || w == 0 {
        return Err(Error::IdxTruncated {
            path: path.display().to_string(),
            detail: "zero image dimensions".into(),
        });
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = vec![0u8; h * w];
        read_exact_or(path, &mut f, &mut img, &format!("image {i}"))?;
        images.push(img);
    }
    Ok((images, h, w))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let magic = read_u32_be(path, &mut f, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::IdxBadMagic {
            path: path.display().to_string(),
            got: magic,
            expected: IDX_LABEL_MAGIC,
        });
    }
    let n = read_u32_be(path, &mut f, "label count")? as usize;
    let mut labels = vec![0u8; n];
    read_exact_or(path, &mut f, &mut labels, "labels")?;
    Ok(labels)
}

/// Disjoint index shards covering the whole index set, sizes differing by at
/// most one, assigned from a seeded shuffle.
#[derive(Debug, Clone)]
pub struct ClientPartition {
    pub shards: Vec<Vec<usize>>,
}

pub fn partition_clients(indices: &[usize], num_clients: usize, seed: u64) -> Result<ClientPartition> {
    if num_clients == 0 || num_clients > indices.len() {
        return Err(Error::TooManyClients {
            samples: indices.len(),
            clients: num_clients,
        });
    }
    let mut rng = substream(seed, "client-partition", 0);
    let order = shuffled_indices(&mut rng, indices.len());
    let base = indices.len() / num_clients;
    let extra = indices.len() % num_clients;
    let mut shards = Vec::with_capacity(num_clients);
    let mut cursor = 0;
    for c in 0..num_clients {
        let size = base + usize::from(c < extra);
        let shard: Vec<usize> = order[cursor..cursor + size]
            .iter()
            .map(|&i| indices[i])
            .collect();
        cursor += size;
        shards.push(shard);
    }
    Ok(ClientPartition { shards })
}

/// Seeded 80/20 train/validation split; the validation side doubles as the
/// server's auxiliary set for inversion training.
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let order = shuffled_indices(&mut substream(seed, "train-val-split", 0), n);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.clamp(1, n.saturating_sub(1).max(1));
    let (val, train) = order.split_at(n_val);
    (train.to_vec(), val.to_vec())
}
