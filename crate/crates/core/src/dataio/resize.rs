//! Bicubic resizing shared by training and evaluation.

use super::ImageBatch;
use crate::tensor::Tensor;

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four (index, weight) taps per output position, half-pixel centres,
/// clamped borders.
fn taps(src: usize, dst: usize) -> Vec<[(usize, f32); 4]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = (o as f64 + 0.5) * scale - 0.5;
            let base = pos.floor();
            let t = pos - base;
            let mut out = [(0usize, 0.0f32); 4];
            for (j, slot) in out.iter_mut().enumerate() {
                let idx = (base as isize + j as isize - 1).clamp(0, src as isize - 1) as usize;
                *slot = (idx, cubic(t - (j as f64 - 1.0)) as f32);
            }
            out
        })
        .collect()
}

/// Resizes `N x C x H x W` images to `size x size`. Same-size input is
/// returned unchanged.
pub fn resize_bicubic(images: &Tensor, size: usize) -> Tensor {
    let (n, c, h, w) = images.dims4("resize").expect("image batches are rank 4");
    if h == size && w == size {
        return images.clone();
    }
    let ty = taps(h, size);
    let tx = taps(w, size);
    let mut rows = vec![0.0f32; h * size];
    let mut out = vec![0.0f32; n * c * size * size];
    for (p, plane) in images.data().chunks(h * w).enumerate() {
        for y in 0..h {
            for (x, tap) in tx.iter().enumerate() {
                rows[y * size + x] = tap.iter().map(|&(i, wt)| wt * plane[y * w + i]).sum();
            }
        }
        let dst = &mut out[p * size * size..][..size * size];
        for (y, tap) in ty.iter().enumerate() {
            for x in 0..size {
                dst[y * size + x] = tap.iter().map(|&(i, wt)| wt * rows[i * size + x]).sum();
            }
        }
    }
    Tensor::new(vec![n, c, size, size], out).expect("consistent sizes")
}

/// Central `size x size` window of each image.
pub fn center_crop(images: &Tensor, size: usize) -> Tensor {
    let (n, c, h, w) = images.dims4("crop").expect("image batches are rank 4");
    assert!(size <= h && size <= w, "crop {size} larger than {h}x{w}");
    let (oy, ox) = ((h - size) / 2, (w - size) / 2);
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in images.data().chunks(h * w) {
        for y in 0..size {
            out.extend_from_slice(&plane[(y + oy) * w + ox..][..size]);
        }
    }
    Tensor::new(vec![n, c, size, size], out).expect("consistent sizes")
}

/// Evaluation pipeline: centre crop at the source resolution, then the same
/// bicubic resize training uses.
pub fn eval_preprocess(batch: &ImageBatch, source: usize, target: usize) -> ImageBatch {
    ImageBatch {
        images: resize_bicubic(&center_crop(&batch.images, source), target),
        labels: batch.labels.clone(),
    }
}
