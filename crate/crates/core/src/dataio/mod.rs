//! Image datasets: a TOML manifest next to flat binary record files, batch
//! streams, augmentation, resizing and a synthetic corpus generator.
//!
//! A record is one label byte followed by `C * H * W` raw bytes in
//! channel-major order.

mod augment;
mod resize;
mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::{parse_toml, read_text};
use crate::seed;
use crate::tensor::Tensor;

pub use augment::{augment, flip_horizontal};
pub use resize::{center_crop, eval_preprocess, resize_bicubic};
pub use synth::{nearest_centroid_accuracy, synth_dataset, SynthSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    /// Record file, relative to the manifest's directory.
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub source_resolution: usize,
    #[serde(default = "three")]
    pub channels: usize,
    /// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub splits: BTreeMap<String, SplitInfo>,
    /// Directory the manifest was loaded from.
    #[serde(skip)]
    pub root: PathBuf,
}

fn three() -> usize {
    3
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: Self = parse_toml(&read_text(path)?, &path.display().to_string())?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate(&path.display().to_string())?;
        Ok(m)
    }

    pub fn validate(&self, origin: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{origin}: {msg}")));
        if self.num_classes == 0 || self.num_classes > 256 {
            return bad(format!("num_classes {} outside [1, 256]", self.num_classes));
        }
        if self.source_resolution == 0 || self.channels == 0 {
            return bad("resolution and channels must be positive".into());
        }
        if self.mean.len() != self.channels || self.std.len() != self.channels {
            return bad("mean/std length differs from channel count".into());
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return bad("std must be positive".into());
        }
        if let Some((name, _)) = self.splits.iter().find(|(_, s)| s.count == 0) {
            return bad(format!("split {name} is empty"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn record_len(&self) -> usize {
        1 + self.channels * self.source_resolution * self.source_resolution
    }

    pub fn split(&self, name: &str) -> Result<&SplitInfo> {
        self.splits
            .get(name)
            .ok_or_else(|| Error::Config(format!("dataset {} has no split {name}", self.name)))
    }
}

/// Normalized images and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    /// `N x C x H x W`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One split held in memory as raw bytes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub split: String,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    /// Reads and checks every record of `split`.
    pub fn load(manifest: &DatasetManifest, split: &str) -> Result<Self> {
        let info = manifest.split(split)?;
        let path = manifest.root.join(&info.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let rl = manifest.record_len();
        let whole = bytes.len() / rl;
        if bytes.len() % rl != 0 {
            return Err(Error::Corrupt {
                path,
                offset: (whole * rl) as u64,
                message: format!("truncated record ({} of {rl} bytes)", bytes.len() % rl),
            });
        }
        if whole != info.count {
            return Err(Error::Corrupt {
                path,
                offset: bytes.len() as u64,
                message: format!("{whole} records, manifest declares {}", info.count),
            });
        }
        let mut pixels = Vec::with_capacity(whole * (rl - 1));
        let mut labels = Vec::with_capacity(whole);
        for (i, rec) in bytes.chunks_exact(rl).enumerate() {
            if usize::from(rec[0]) >= manifest.num_classes {
                return Err(Error::Corrupt {
                    path,
                    offset: (i * rl) as u64,
                    message: format!("label {} outside [0, {})", rec[0], manifest.num_classes),
                });
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
        Ok(Self {
            manifest: manifest.clone(),
            split: split.to_owned(),
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    /// Raw bytes of example `i`.
    pub fn raw(&self, i: usize) -> &[u8] {
        let n = self.manifest.record_len() - 1;
        &self.pixels[i * n..][..n]
    }

    /// Normalized batch of the given examples.
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let m = &self.manifest;
        let r = m.source_resolution;
        let plane = r * r;
        let mut data = Vec::with_capacity(indices.len() * m.channels * plane);
        for &i in indices {
            for (c, chunk) in self.raw(i).chunks(plane).enumerate() {
                let (mu, sd) = (m.mean[c], m.std[c]);
                data.extend(chunk.iter().map(|&b| (f32::from(b) / 255.0 - mu) / sd));
            }
        }
        ImageBatch {
            images: Tensor::new(vec![indices.len(), m.channels, r, r], data)
                .expect("consistent sizes"),
            labels: indices.iter().map(|&i| self.label(i)).collect(),
        }
    }

    /// Example order for one epoch.
    pub fn order(&self, shuffle_seed: Option<u64>) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(s) = shuffle_seed {
            idx.shuffle(&mut seed::rng(s));
        }
        idx
    }

    /// Batches over one epoch. With a shuffle seed the order is a seeded
    /// permutation; `drop_last` discards a final partial batch.
    pub fn batches(
        &self,
        batch_size: usize,
        shuffle_seed: Option<u64>,
        drop_last: bool,
    ) -> Batches<'_> {
        let order = self.order(shuffle_seed);
        Batches {
            data: self,
            order,
            batch_size: batch_size.max(1),
            pos: 0,
            drop_last,
        }
    }

    /// The first `n` examples as one dataset (deterministic slice).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.manifest.record_len() - 1;
        Dataset {
            manifest: self.manifest.clone(),
            split: self.split.clone(),
            pixels: self.pixels[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    drop_last: bool,
}

impl Iterator for Batches<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        let left = self.order.len() - self.pos;
        if left == 0 || (self.drop_last && left < self.batch_size) {
            return None;
        }
        let take = left.min(self.batch_size);
        let b = self.data.batch(&self.order[self.pos..self.pos + take]);
        self.pos += take;
        Some(b)
    }
}

/// Loads `split` and streams it: the `train` split is shuffled by
/// `epoch_seed` and drops its final partial batch, other splits keep file
/// order and every example.
pub fn load_batches(
    manifest: &DatasetManifest,
    split: &str,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<ImageBatch>> {
    let ds = Dataset::load(manifest, split)?;
    let train = split == "train";
    Ok(ds
        .batches(batch_size, train.then_some(epoch_seed), train)
        .collect())
}
