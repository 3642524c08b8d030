use num_bigint::BigUint;

use super::{ChildConfig, LayerChoice, SearchSpace, StageChoice};
use crate::error::{Error, Result};

/// Exact number of distinct children:
/// `|res| * |stem| * |head| * prod_s sum_{d in depth_s} (|channels_s| * |kernels_s|)^d`.
pub fn space_cardinality(space: &SearchSpace) -> BigUint {
    let mut total = BigUint::from(space.resolutions.len())
        * BigUint::from(space.channel_choice_count(space.stem.channels))
        * BigUint::from(space.channel_choice_count(space.head.channels));
    for st in &space.stages {
        let per_layer = BigUint::from(space.channel_choice_count(st.channels) * st.kernels.len());
        let stage: BigUint = (st.depth.lo..=st.depth.hi)
            .map(|d| per_layer.pow(d as u32))
            .sum();
        total *= stage;
    }
    total
}

/// Every child of the space in a fixed order (resolution, stem, stages, head).
/// Refuses spaces with more than `limit` children.
pub fn enumerate_configs(space: &SearchSpace, limit: usize) -> Result<Vec<ChildConfig>> {
    let count = space_cardinality(space);
    if count > BigUint::from(limit) {
        return Err(Error::Precondition(format!(
            "space '{}' has {count} children, more than the enumeration limit {limit}",
            space.name
        )));
    }
    // All options for each stage, built once.
    let stage_options: Vec<Vec<StageChoice>> = space
        .stages
        .iter()
        .map(|st| {
            let layer_opts: Vec<LayerChoice> = space
                .channel_choices(st.channels)
                .flat_map(|channels| {
                    st.kernels
                        .iter()
                        .map(move |&kernel| LayerChoice { channels, kernel })
                })
                .collect();
            let mut out = Vec::new();
            for d in st.depth.lo..=st.depth.hi {
                let mut partial: Vec<Vec<LayerChoice>> = vec![Vec::new()];
                for _ in 0..d {
                    partial = partial
                        .into_iter()
                        .flat_map(|p| {
                            layer_opts.iter().map(move |&o| {
                                let mut q = p.clone();
                                q.push(o);
                                q
                            })
                        })
                        .collect();
                }
                out.extend(partial.into_iter().map(|layers| StageChoice { layers }));
            }
            out
        })
        .collect();

    let mut stage_combos: Vec<Vec<StageChoice>> = vec![Vec::new()];
    for opts in &stage_options {
        stage_combos = stage_combos
            .into_iter()
            .flat_map(|p| {
                opts.iter().map(move |o| {
                    let mut q = p.clone();
                    q.push(o.clone());
                    q
                })
            })
            .collect();
    }
    let mut out = Vec::new();
    for &resolution in &space.resolutions {
        for stem_channels in space.channel_choices(space.stem.channels) {
            for stages in &stage_combos {
                for head_channels in space.channel_choices(space.head.channels) {
                    out.push(ChildConfig {
                        resolution,
                        stem_channels,
                        stages: stages.clone(),
                        head_channels,
                    });
                }
            }
        }
    }
    Ok(out)
}
