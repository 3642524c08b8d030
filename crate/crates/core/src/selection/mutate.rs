//! One-step random mutations of a child config.

use rand::Rng;

use crate::searchspace::{ChildConfig, IntRange, SearchSpace};
use crate::seed::{self, Stream};

/// Trained resolutions plus the integer midpoint of every adjacent pair,
/// ascending.
pub fn resolution_ladder(space: &SearchSpace) -> Vec<usize> {
    let mut out = Vec::with_capacity(2 * space.resolutions.len());
    for w in space.resolutions.windows(2) {
        out.push(w[0]);
        let mid = (w[0] + w[1]) / 2;
        if mid != w[0] && mid != w[1] {
            out.push(mid);
        }
    }
    out.extend(space.resolutions.last());
    out
}

/// Moves to a neighbour of `value` in the sorted `ladder`, or to the nearest
/// rung when `value` is off the ladder.
fn ladder_step(rng: &mut impl Rng, ladder: &[usize], value: usize) -> usize {
    let pos = match ladder.binary_search(&value) {
        Ok(i) => i,
        Err(i) => {
            let below = i.checked_sub(1).map(|j| ladder[j]);
            let above = ladder.get(i).copied();
            return match (below, above) {
                (Some(b), Some(a)) => {
                    if rng.random_bool(0.5) {
                        b
                    } else {
                        a
                    }
                }
                (Some(b), None) => b,
                (None, Some(a)) => a,
                (None, None) => value,
            };
        }
    };
    let up = pos + 1 < ladder.len();
    let down = pos > 0;
    match (down, up) {
        (true, true) => {
            ladder[if rng.random_bool(0.5) {
                pos - 1
            } else {
                pos + 1
            }]
        }
        (true, false) => ladder[pos - 1],
        (false, true) => ladder[pos + 1],
        (false, false) => value,
    }
}

fn range_step(rng: &mut impl Rng, range: IntRange, step: usize, value: usize) -> usize {
    let up = value + step <= range.hi;
    let down = value >= range.lo + step;
    match (down, up) {
        (true, true) => {
            if rng.random_bool(0.5) {
                value - step
            } else {
                value + step
            }
        }
        (true, false) => value - step,
        (false, true) => value + step,
        (false, false) => value,
    }
}

/// Perturbs every dimension of `cfg` independently with probability `p` by
/// one step: resolution along [`resolution_ladder`], stem/head and per-layer
/// channels by `channel_step`, stage depth by one (a new layer copies the
/// previous last layer), per-layer kernel to a neighbour in the stage's
/// kernel set.
pub fn mutate(space: &SearchSpace, cfg: &ChildConfig, p: f64, seed: u64) -> ChildConfig {
    let mut rng = seed::rng(seed);
    let hit = |rng: &mut rand_chacha::ChaCha8Rng| p > 0.0 && rng.random_bool(p.min(1.0));
    let step = space.channel_step;
    let mut out = cfg.clone();
    if hit(&mut rng) {
        out.resolution = ladder_step(&mut rng, &resolution_ladder(space), out.resolution);
    }
    if hit(&mut rng) {
        out.stem_channels = range_step(&mut rng, space.stem.channels, step, out.stem_channels);
    }
    for (spec, stage) in space.stages.iter().zip(out.stages.iter_mut()) {
        if hit(&mut rng) {
            let d = stage.depth();
            let new = range_step(&mut rng, spec.depth, 1, d);
            if new > d {
                let last = *stage.layers.last().expect("valid stage has a layer");
                stage.layers.push(last);
            } else {
                stage.layers.truncate(new);
            }
        }
        for layer in stage.layers.iter_mut() {
            if hit(&mut rng) {
                layer.channels = range_step(&mut rng, spec.channels, step, layer.channels);
            }
            if hit(&mut rng) {
                layer.kernel = ladder_step(&mut rng, &spec.kernels, layer.kernel);
            }
        }
    }
    if hit(&mut rng) {
        out.head_channels = range_step(&mut rng, space.head.channels, step, out.head_channels);
    }
    out
}

/// `n` mutants of `skeleton`; mutant `i` uses sub-seed `i` of the mutation
/// stream under `seed`.
pub fn mutants(
    space: &SearchSpace,
    skeleton: &ChildConfig,
    n: usize,
    p: f64,
    seed: u64,
) -> Vec<ChildConfig> {
    (0..n)
        .map(|i| {
            mutate(
                space,
                skeleton,
                p,
                seed::stream_seed(seed, Stream::Mutation, i as u64),
            )
        })
        .collect()
}
