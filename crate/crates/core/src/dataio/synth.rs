//! Class-conditional Gaussian-blob images.
//!
//! Every class owns a few coloured blobs at fixed positions. An image renders
//! its class's blobs with jittered centres and amplitudes, optional
//! class-independent distractor blobs, and pixel noise.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, SplitInfo};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub name: String,
    pub classes: usize,
    pub resolution: usize,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
    pub blobs_per_class: usize,
    /// Standard deviation of blob-centre jitter, in pixels at resolution 32.
    pub jitter: f32,
    /// Standard deviation of per-pixel noise in [0, 1] pixel units.
    pub noise: f32,
    pub distractors: usize,
    /// Fraction of training records whose stored label is replaced by a
    /// different, uniformly drawn class. Validation labels stay clean.
    pub label_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: "blobs".into(),
            classes: 10,
            resolution: 32,
            train: 1000,
            val: 500,
            seed: 0,
            blobs_per_class: 3,
            jitter: 1.5,
            noise: 0.1,
            distractors: 1,
            label_noise: 0.0,
        }
    }
}

struct Blob {
    x: f32,
    y: f32,
    sigma: f32,
    colour: [f32; 3],
}

fn random_blob(rng: &mut impl Rng, r: f32) -> Blob {
    Blob {
        x: rng.random_range(0.2 * r..0.8 * r),
        y: rng.random_range(0.2 * r..0.8 * r),
        sigma: rng.random_range(0.08 * r..0.16 * r),
        colour: [
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
        ],
    }
}

fn render(spec: &SynthSpec, templates: &[Vec<Blob>], label: usize, stream: u64) -> Vec<u8> {
    let r = spec.resolution;
    let rf = r as f32;
    let mut rng = seed::rng(stream);
    let jitter = Normal::new(0.0, spec.jitter.max(0.0) * rf / 32.0).expect("finite jitter");
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut blobs: Vec<(f32, f32, f32, [f32; 3], f32)> = templates[label]
        .iter()
        .map(|b| {
            let amp = rng.random_range(0.7..1.3);
            (
                b.x + jitter.sample(&mut rng),
                b.y + jitter.sample(&mut rng),
                b.sigma,
                b.colour,
                amp,
            )
        })
        .collect();
    for _ in 0..spec.distractors {
        let b = random_blob(&mut rng, rf);
        blobs.push((b.x, b.y, b.sigma, b.colour, 1.0));
    }
    let mut out = vec![0u8; 3 * r * r];
    for c in 0..3 {
        for y in 0..r {
            for x in 0..r {
                let mut v = 0.5f32;
                for &(bx, by, s, col, amp) in &blobs {
                    let d2 = (x as f32 + 0.5 - bx).powi(2) + (y as f32 + 0.5 - by).powi(2);
                    v += amp * col[c] * (-d2 / (2.0 * s * s)).exp();
                }
                v += noise.sample(&mut rng);
                out[(c * r + y) * r + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

const NOISE_SALT: u64 = 0x6c61_6265_6c00_0000;

/// Writes `train.bin`, `val.bin` and `manifest.toml` into `dir`.
/// Identical specs produce byte-identical files.
pub fn synth_dataset(spec: &SynthSpec, dir: &Path) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&spec.label_noise)
        || spec.classes < 2
        || spec.classes > 256
        || spec.resolution == 0
        || spec.train == 0
        || spec.val == 0
    {
        return Err(Error::Config(format!(
            "invalid synthetic dataset spec {spec:?}"
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let templates: Vec<Vec<Blob>> = (0..spec.classes)
        .map(|c| {
            let mut rng = seed::rng(seed::stream_seed(spec.seed, Stream::Synth, c as u64));
            (0..spec.blobs_per_class)
                .map(|_| random_blob(&mut rng, spec.resolution as f32))
                .collect()
        })
        .collect();
    let plane = spec.resolution * spec.resolution;
    let mut sums = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut splits = std::collections::BTreeMap::new();
    for (split_id, (name, count)) in [("train", spec.train), ("val", spec.val)]
        .into_iter()
        .enumerate()
    {
        let base = seed::stream_seed(spec.seed, Stream::Synth, (1 << 32) | split_id as u64);
        let mut bytes = Vec::with_capacity(count * (1 + 3 * plane));
        for i in 0..count {
            let label = i % spec.classes;
            let img = render(spec, &templates, label, seed::mix(base, i as u64));
            if name == "train" {
                for c in 0..3 {
                    for &b in &img[c * plane..][..plane] {
                        let v = f64::from(b) / 255.0;
                        sums[c] += v;
                        sq[c] += v * v;
                    }
                }
            }
            let stored = if name == "train" {
                let mut rng = seed::rng(seed::mix(base ^ NOISE_SALT, i as u64));
                if rng.random_bool(spec.label_noise) {
                    (label + rng.random_range(1..spec.classes)) % spec.classes
                } else {
                    label
                }
            } else {
                label
            };
            bytes.push(stored as u8);
            bytes.extend_from_slice(&img);
        }
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        splits.insert(name.to_owned(), SplitInfo { file, count });
    }
    let n = (spec.train * plane) as f64;
    let mean: Vec<f32> = sums.iter().map(|s| (s / n) as f32).collect();
    let std: Vec<f32> = (0..3)
        .map(|c| ((sq[c] / n - (sums[c] / n).powi(2)).max(1e-12)).sqrt() as f32)
        .collect();
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        num_classes: spec.classes,
        source_resolution: spec.resolution,
        channels: 3,
        mean,
        std,
        splits,
        root: dir.to_path_buf(),
    };
    manifest.save(dir.join("manifest.toml"))?;
    Ok(manifest)
}

/// Test accuracy of a diagonal-covariance nearest-class-mean classifier fitted
/// in closed form on `train` (a linear discriminant with pooled variance).
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let k = train.manifest.num_classes;
    let d = train.manifest.record_len() - 1;
    let mut mu = vec![vec![0.0f64; d]; k];
    let mut counts = vec![0usize; k];
    for i in 0..train.len() {
        let l = train.label(i);
        counts[l] += 1;
        for (m, &b) in mu[l].iter_mut().zip(train.raw(i)) {
            *m += f64::from(b);
        }
    }
    for (m, &n) in mu.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let mut var = vec![0.0f64; d];
    for i in 0..train.len() {
        let m = &mu[train.label(i)];
        for ((v, &b), &mm) in var.iter_mut().zip(train.raw(i)).zip(m) {
            *v += (f64::from(b) - mm).powi(2);
        }
    }
    var.iter_mut()
        .for_each(|v| *v = *v / train.len() as f64 + 1.0);
    let mut correct = 0;
    for i in 0..test.len() {
        let x = test.raw(i);
        let best = (0..k)
            .map(|c| {
                let dist: f64 = x
                    .iter()
                    .zip(&mu[c])
                    .zip(&var)
                    .map(|((&b, &m), &v)| (f64::from(b) - m).powi(2) / v)
                    .sum();
                (c, dist)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .unwrap_or(0);
        correct += usize::from(best == test.label(i));
    }
    correct as f64 / test.len() as f64
}
