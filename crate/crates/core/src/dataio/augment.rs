//! Training augmentation: reflect-pad by 4, random crop back to size, random
//! horizontal flip.

use rand::Rng;

use super::ImageBatch;
use crate::seed;
use crate::tensor::Tensor;

const PAD: usize = 4;

/// Reflection without edge repetition: `-1 -> 1`, `n -> n - 2`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Crops `img` (`C x H x W`) at offset `(dy, dx)` in its padded frame,
/// optionally mirrored.
fn crop(
    src: &[f32],
    dst: &mut [f32],
    (c, h, w): (usize, usize, usize),
    (dy, dx): (usize, usize),
    flip: bool,
) {
    for ch in 0..c {
        let plane = &src[ch * h * w..][..h * w];
        for y in 0..h {
            let sy = reflect(y as isize + dy as isize - PAD as isize, h);
            for x in 0..w {
                let xo = if flip { w - 1 - x } else { x };
                let sx = reflect(xo as isize + dx as isize - PAD as isize, w);
                dst[(ch * h + y) * w + x] = plane[sy * w + sx];
            }
        }
    }
}

/// Pad-crop-flip augmentation, deterministic in `seed`. Each image draws
/// from its own stream, so results do not depend on batch composition order
/// beyond the index.
pub fn augment(batch: &ImageBatch, seed: u64) -> ImageBatch {
    let (n, c, h, w) = batch
        .images
        .dims4("augment")
        .expect("image batches are rank 4");
    let per = c * h * w;
    let mut out = vec![0.0f32; n * per];
    for i in 0..n {
        let mut rng = seed::rng(seed::mix(seed, i as u64));
        let dy = rng.random_range(0..=2 * PAD);
        let dx = rng.random_range(0..=2 * PAD);
        let flip = rng.random::<bool>();
        crop(
            &batch.images.data()[i * per..][..per],
            &mut out[i * per..][..per],
            (c, h, w),
            (dy, dx),
            flip,
        );
    }
    ImageBatch {
        images: Tensor::new(batch.images.shape().to_vec(), out).expect("same shape"),
        labels: batch.labels.clone(),
    }
}

/// Mirrors every image left to right.
pub fn flip_horizontal(batch: &ImageBatch) -> ImageBatch {
    let (n, c, h, w) = batch
        .images
        .dims4("flip")
        .expect("image batches are rank 4");
    let per = c * h * w;
    let mut out = vec![0.0f32; n * per];
    for i in 0..n {
        crop(
            &batch.images.data()[i * per..][..per],
            &mut out[i * per..][..per],
            (c, h, w),
            (PAD, PAD),
            true,
        );
    }
    ImageBatch {
        images: Tensor::new(batch.images.shape().to_vec(), out).expect("same shape"),
        labels: batch.labels.clone(),
    }
}
