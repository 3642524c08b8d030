//! Canonical compact text form of a [`ChildConfig`]:
//!
//! ```text
//! r256-d1.2.2.2.4.4.1-c32.16.24.48.88.128.216.352.1408-k3.3.5.3.5.5.3
//! ```
//!
//! `c` lists stem, one entry per stage, then head; `k` lists one entry per
//! stage. A stage whose layers differ writes all of its per-layer values
//! joined by `_` (e.g. `c8.12_16.24`); a stage whose layers agree writes the
//! shared value once. Printing always produces this canonical form.

use std::fmt;
use std::str::FromStr;

use super::{ChildConfig, LayerChoice, StageChoice};
use crate::error::Error;

fn write_stage_values(
    f: &mut fmt::Formatter<'_>,
    stage: &StageChoice,
    value: impl Fn(&LayerChoice) -> usize,
) -> fmt::Result {
    let first = stage.layers.first().map(&value).unwrap_or(0);
    if stage.layers.iter().all(|l| value(l) == first) {
        write!(f, "{first}")
    } else {
        for (i, l) in stage.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("_")?;
            }
            write!(f, "{}", value(l))?;
        }
        Ok(())
    }
}

impl fmt::Display for ChildConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}-d", self.resolution)?;
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{}", s.depth())?;
        }
        write!(f, "-c{}", self.stem_channels)?;
        for s in &self.stages {
            f.write_str(".")?;
            write_stage_values(f, s, |l| l.channels)?;
        }
        write!(f, ".{}-k", self.head_channels)?;
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write_stage_values(f, s, |l| l.kernel)?;
        }
        Ok(())
    }
}

fn parse_err(s: &str, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: format!("config string '{s}'"),
        location: None,
        message: msg.into(),
    }
}

fn num(s: &str, tok: &str) -> Result<usize, Error> {
    tok.parse::<usize>()
        .map_err(|_| parse_err(s, format!("'{tok}' is not a non-negative integer")))
}

/// Expands one stage entry (`24` or `24_32_32`) to `depth` values.
fn stage_values(s: &str, tok: &str, depth: usize) -> Result<Vec<usize>, Error> {
    let vals = tok
        .split('_')
        .map(|t| num(s, t))
        .collect::<Result<Vec<_>, _>>()?;
    match vals.len() {
        1 => Ok(vec![vals[0]; depth]),
        n if n == depth => Ok(vals),
        n => Err(parse_err(
            s,
            format!("stage entry '{tok}' has {n} per-layer values but depth is {depth}"),
        )),
    }
}

impl FromStr for ChildConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split('-').collect();
        let [r, d, c, k] = parts.as_slice() else {
            return Err(parse_err(
                s,
                "expected four '-'-separated fields r…-d…-c…-k…",
            ));
        };
        let field = |p: &'_ str, prefix: char| {
            p.strip_prefix(prefix)
                .ok_or_else(|| parse_err(s, format!("field '{p}' must start with '{prefix}'")))
                .map(|rest| rest.to_owned())
        };
        let resolution = num(s, &field(r, 'r')?)?;
        let depths = field(d, 'd')?
            .split('.')
            .map(|t| num(s, t))
            .collect::<Result<Vec<_>, _>>()?;
        let c = field(c, 'c')?;
        let chans: Vec<&str> = c.split('.').collect();
        let k = field(k, 'k')?;
        let kerns: Vec<&str> = k.split('.').collect();
        let n = depths.len();
        if chans.len() != n + 2 {
            return Err(parse_err(
                s,
                format!(
                    "expected {} channel entries (stem, {n} stages, head), found {}",
                    n + 2,
                    chans.len()
                ),
            ));
        }
        if kerns.len() != n {
            return Err(parse_err(
                s,
                format!("expected {n} kernel entries, found {}", kerns.len()),
            ));
        }
        let mut stages = Vec::with_capacity(n);
        for (i, &depth) in depths.iter().enumerate() {
            let cs = stage_values(s, chans[i + 1], depth)?;
            let ks = stage_values(s, kerns[i], depth)?;
            stages.push(StageChoice {
                layers: cs
                    .into_iter()
                    .zip(ks)
                    .map(|(channels, kernel)| LayerChoice { channels, kernel })
                    .collect(),
            });
        }
        Ok(ChildConfig {
            resolution,
            stem_channels: num(s, chans[0])?,
            stages,
            head_channels: num(s, chans[n + 1])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::sample_child;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_string_round_trips() {
        let s = "r256-d1.2.2.2.4.4.1-c32.16.24.48.88.128.216.352.1408-k3.3.5.3.5.5.3";
        let cfg: ChildConfig = s.parse().unwrap();
        assert_eq!(cfg.resolution, 256);
        assert_eq!(cfg.depths(), vec![1, 2, 2, 2, 4, 4, 1]);
        assert_eq!(cfg.stages[4].layers[3].channels, 128);
        assert_eq!(cfg.stages[2].layers[1].kernel, 5);
        assert_eq!(cfg.to_string(), s);
    }

    #[test]
    fn per_layer_entries() {
        let s = "r24-d2.1.2-c8.8_12.16.20_24.40-k3.5.3_5";
        let cfg: ChildConfig = s.parse().unwrap();
        assert_eq!(cfg.stages[0].layers[1].channels, 12);
        assert_eq!(cfg.stages[2].layers[0].kernel, 3);
        assert_eq!(cfg.stages[2].layers[1].kernel, 5);
        assert_eq!(cfg.to_string(), s);
    }

    #[test]
    fn malformed_strings_are_rejected() {
        for bad in [
            "",
            "r24-d1.1.1-c8.8.12.16.32",
            "r24-d1.1.1-c8.8.12.16-k3.3.3",
            "x24-d1.1.1-c8.8.12.16.32-k3.3.3",
            "r24-d2.1.1-c8.8_12_16.12.16.32-k3.3.3",
            "r24-d1.1.1-c8.8.12.16.32-k3.3.a",
        ] {
            assert!(bad.parse::<ChildConfig>().is_err(), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn print_parse_is_stable(seed in any::<u64>()) {
            for space in [toy(), table1()] {
                let cfg = sample_child(&space, seed);
                let s = cfg.to_string();
                let back: ChildConfig = s.parse().unwrap();
                prop_assert_eq!(&back, &cfg);
                prop_assert_eq!(back.to_string(), s);
            }
        }
    }
}
