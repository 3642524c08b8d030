//! Binary checkpoint container.
//!
//! ```text
//! magic "SNASCKPT" | u32 version
//! u64 space_hash | u64 step | u64 global_seed
//! u32 n_meta     { str key, str value }
//! u32 n_tensors  { str name, u32 rank, u64 dims[rank], u64 offset }
//! u32 n_children { str config, u32 n_meta { str, str }, u32 n_names { str } }
//! u64 payload_len (bytes) | payload: little-endian f32
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. Integers are little-endian.
//! Tensor offsets are relative to the payload start and strictly sequential.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::calibration::{CalibratedChild, CalibrationMeta};
use crate::elastic::{BnMoments, BnTable, ChildWeights, ParamKind, SupernetParams};
use crate::error::{Error, Result};
use crate::searchspace::{space_hash, SearchSpace};
use crate::tensor::{OptimizerState, Tensor};

pub const MAGIC: &[u8; 8] = b"SNASCKPT";
pub const VERSION: u32 = 1;

/// Calibrated-child entry: its config string, metadata, and the names of its
/// tensors in the main manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildSection {
    pub config: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub space_hash: u64,
    pub step: u64,
    pub global_seed: u64,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
    pub children: Vec<ChildSection>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn meta(&mut self, m: &BTreeMap<String, String>) {
        self.u32(m.len() as u32);
        for (k, v) in m {
            self.str(k);
            self.str(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: msg.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!("unexpected end of file reading {n} bytes")));
        }
        let bytes: &'a [u8] = self.bytes;
        let s = &bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn count(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > self.bytes.len() {
            return Err(self.corrupt(format!("implausible count {n}")));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.count()?;
        let at = self.pos;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| Error::Corrupt {
            path: self.path.to_path_buf(),
            offset: at as u64,
            message: "invalid UTF-8".into(),
        })
    }
    fn meta(&mut self) -> Result<BTreeMap<String, String>> {
        let n = self.count()?;
        let mut m = BTreeMap::new();
        for _ in 0..n {
            let k = self.str()?;
            m.insert(k, self.str()?);
        }
        Ok(m)
    }
}

impl Checkpoint {
    pub fn new(space_hash: u64, step: u64, global_seed: u64) -> Self {
        Self {
            space_hash,
            step,
            global_seed,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.space_hash);
        w.u64(self.step);
        w.u64(self.global_seed);
        w.meta(&self.meta);
        w.u32(self.tensors.len() as u32);
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.u64(offset);
            offset += 4 * t.numel() as u64;
        }
        w.u32(self.children.len() as u32);
        for c in &self.children {
            w.str(&c.config);
            w.meta(&c.meta);
            w.u32(c.tensors.len() as u32);
            for n in &c.tensors {
                w.str(n);
            }
        }
        w.u64(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            r.pos = 0;
            return Err(r.corrupt("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            r.pos -= 4;
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let space_hash = r.u64()?;
        let step = r.u64()?;
        let global_seed = r.u64()?;
        let meta = r.meta()?;
        let n = r.count()?;
        let mut manifest = Vec::with_capacity(n);
        let mut expect = 0u64;
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.count()?;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let at = r.pos;
            let offset = r.u64()?;
            if offset != expect {
                r.pos = at;
                return Err(r.corrupt(format!(
                    "tensor {name} at offset {offset}, expected {expect}"
                )));
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(numel) = numel.filter(|&v| v <= bytes.len()) else {
                return Err(r.corrupt(format!("tensor {name} has implausible shape {dims:?}")));
            };
            expect += 4 * numel as u64;
            manifest.push((name, dims, offset));
        }
        let nc = r.count()?;
        let mut children = Vec::with_capacity(nc);
        for _ in 0..nc {
            let config = r.str()?;
            let meta = r.meta()?;
            let k = r.count()?;
            let mut tensors = Vec::with_capacity(k);
            for _ in 0..k {
                tensors.push(r.str()?);
            }
            children.push(ChildSection {
                config,
                meta,
                tensors,
            });
        }
        let payload_len = r.u64()?;
        if payload_len != expect {
            r.pos -= 8;
            return Err(r.corrupt(format!(
                "payload length {payload_len}, manifest needs {expect}"
            )));
        }
        let base = r.pos;
        let payload = r.take(payload_len as usize)?;
        if r.pos != bytes.len() {
            return Err(r.corrupt("trailing bytes after payload"));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, dims, offset) in manifest {
            let numel: usize = dims.iter().product();
            let raw = &payload[offset as usize..offset as usize + 4 * numel];
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                offset: (base as u64) + offset,
                message: e.to_string(),
            })?;
            tensors.push((name, t));
        }
        for c in &children {
            if let Some(missing) = c
                .tensors
                .iter()
                .find(|n| !tensors.iter().any(|(t, _)| t == *n))
            {
                return Err(Error::Checkpoint(format!(
                    "child {} references missing tensor {missing}",
                    c.config
                )));
            }
        }
        Ok(Self {
            space_hash,
            step,
            global_seed,
            meta,
            tensors,
            children,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Fails unless the checkpoint was written for `space`.
    pub fn verify_space(&self, space: &SearchSpace) -> Result<()> {
        let h = space_hash(space);
        if h != self.space_hash {
            return Err(Error::Checkpoint(format!(
                "space hash mismatch: checkpoint {:016x}, space file {h:016x}",
                self.space_hash
            )));
        }
        Ok(())
    }
}

fn kind_name(k: ParamKind) -> &'static str {
    match k {
        ParamKind::ConvWeight => "conv",
        ParamKind::DepthwiseWeight => "depthwise",
        ParamKind::BnGamma => "bn_gamma",
        ParamKind::BnBeta => "bn_beta",
        ParamKind::FcWeight => "fc",
        ParamKind::FcBias => "fc_bias",
    }
}

fn kind_from(s: &str) -> Result<ParamKind> {
    Ok(match s {
        "conv" => ParamKind::ConvWeight,
        "depthwise" => ParamKind::DepthwiseWeight,
        "bn_gamma" => ParamKind::BnGamma,
        "bn_beta" => ParamKind::BnBeta,
        "fc" => ParamKind::FcWeight,
        "fc_bias" => ParamKind::FcBias,
        other => return Err(Error::Checkpoint(format!("unknown parameter kind {other}"))),
    })
}

const PARAM: &str = "param/";
const OPT_MS: &str = "opt.ms/";
const OPT_MOM: &str = "opt.mom/";
const BN_MEAN: &str = "bn.mean/";
const BN_VAR: &str = "bn.var/";

fn push_bn(ck: &mut Checkpoint, prefix: &str, bn: &BnTable) {
    for (name, m) in &bn.entries {
        ck.tensors
            .push((format!("{prefix}{BN_MEAN}{name}"), vec1(&m.mean)));
        ck.tensors
            .push((format!("{prefix}{BN_VAR}{name}"), vec1(&m.var)));
    }
}

fn vec1(v: &[f32]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("rank 1")
}

fn read_bn(ck: &Checkpoint, prefix: &str) -> BnTable {
    let mut entries = BTreeMap::new();
    let mean_p = format!("{prefix}{BN_MEAN}");
    for (name, t) in &ck.tensors {
        if let Some(bn) = name.strip_prefix(&mean_p) {
            if let Some(var) = ck.tensor(&format!("{prefix}{BN_VAR}{bn}")) {
                entries.insert(
                    bn.to_owned(),
                    BnMoments {
                        mean: t.data().to_vec(),
                        var: var.data().to_vec(),
                    },
                );
            }
        }
    }
    BnTable { entries }
}

/// Training state stored in a supernet checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub params: SupernetParams,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    pub global_seed: u64,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Supernet parameters, placeholder statistics and optional optimizer
    /// state. The parameter kind list is kept in `meta["kinds"]`.
    pub fn from_supernet(
        space: &SearchSpace,
        params: &SupernetParams,
        optimizer: Option<&OptimizerState>,
        step: u64,
        global_seed: u64,
    ) -> Self {
        let mut ck = Checkpoint::new(space_hash(space), step, global_seed);
        ck.meta.insert("kind".into(), "supernet".into());
        ck.meta.insert(
            "space".into(),
            toml::to_string(space).expect("space serializes"),
        );
        ck.meta.insert(
            "kinds".into(),
            params
                .kinds
                .iter()
                .map(|&k| kind_name(k))
                .collect::<Vec<_>>()
                .join(","),
        );
        for (name, t) in params.names.iter().zip(&params.tensors) {
            ck.tensors.push((format!("{PARAM}{name}"), t.clone()));
        }
        push_bn(&mut ck, "", &params.bn);
        if let Some(opt) = optimizer {
            ck.meta
                .insert("optimizer_step".into(), opt.step.to_string());
            for (i, name) in params.names.iter().enumerate() {
                let shape = params.tensors[i].shape().to_vec();
                let ms = Tensor::new(shape.clone(), opt.mean_square[i].clone()).expect("aligned");
                let mom = Tensor::new(shape, opt.momentum[i].clone()).expect("aligned");
                ck.tensors.push((format!("{OPT_MS}{name}"), ms));
                ck.tensors.push((format!("{OPT_MOM}{name}"), mom));
            }
        }
        ck
    }

    pub fn to_training_state(&self) -> Result<TrainingState> {
        let kinds_s = self.meta.get("kinds").ok_or_else(|| {
            Error::Checkpoint("not a supernet checkpoint (no parameter kinds)".into())
        })?;
        let kinds = kinds_s
            .split(',')
            .map(kind_from)
            .collect::<Result<Vec<_>>>()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (n, t) in &self.tensors {
            if let Some(p) = n.strip_prefix(PARAM) {
                names.push(p.to_owned());
                tensors.push(t.clone());
            }
        }
        if names.len() != kinds.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters but {} kinds",
                names.len(),
                kinds.len()
            )));
        }
        let bn = read_bn(self, "");
        let optimizer = match self.meta.get("optimizer_step") {
            Some(s) => {
                let step = s
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad optimizer step {s}")))?;
                let mut ms = Vec::with_capacity(names.len());
                let mut mom = Vec::with_capacity(names.len());
                for n in &names {
                    let get = |p: &str| {
                        self.tensor(&format!("{p}{n}"))
                            .map(|t| t.data().to_vec())
                            .ok_or_else(|| {
                                Error::Checkpoint(format!("missing optimizer state {p}{n}"))
                            })
                    };
                    ms.push(get(OPT_MS)?);
                    mom.push(get(OPT_MOM)?);
                }
                Some(OptimizerState {
                    mean_square: ms,
                    momentum: mom,
                    step,
                })
            }
            None => None,
        };
        Ok(TrainingState {
            params: SupernetParams::from_parts(names, kinds, tensors, bn)?,
            optimizer,
            step: self.step,
            global_seed: self.global_seed,
            meta: self.meta.clone(),
        })
    }

    /// Appends a calibrated child as a child section.
    pub fn push_child(&mut self, child: &CalibratedChild) {
        let i = self.children.len();
        let prefix = format!("child{i}/");
        let mut names = Vec::new();
        for (n, t) in child.weights.names.iter().zip(&child.weights.tensors) {
            let full = format!("{prefix}{PARAM}{n}");
            self.tensors.push((full.clone(), t.clone()));
            names.push(full);
        }
        let before = self.tensors.len();
        push_bn(self, &prefix, &child.bn);
        names.extend(self.tensors[before..].iter().map(|(n, _)| n.clone()));
        let mut meta = BTreeMap::new();
        meta.insert("batches".into(), child.meta.batches.to_string());
        meta.insert("examples".into(), child.meta.examples.to_string());
        meta.insert("dataset".into(), child.meta.dataset.clone());
        meta.insert("statistics".into(), "aggregate".into());
        meta.insert(
            "kinds".into(),
            child
                .weights
                .kinds
                .iter()
                .map(|&k| kind_name(k))
                .collect::<Vec<_>>()
                .join(","),
        );
        self.children.push(ChildSection {
            config: child.config.to_string(),
            meta,
            tensors: names,
        });
    }

    pub fn child(&self, i: usize) -> Result<CalibratedChild> {
        let sec = self
            .children
            .get(i)
            .ok_or_else(|| Error::Checkpoint(format!("no child section {i}")))?;
        let config = sec.config.parse()?;
        let prefix = format!("child{i}/");
        let pp = format!("{prefix}{PARAM}");
        let kinds = sec
            .meta
            .get("kinds")
            .ok_or_else(|| Error::Checkpoint("child section without kinds".into()))?
            .split(',')
            .map(kind_from)
            .collect::<Result<Vec<_>>>()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for n in &sec.tensors {
            if let Some(p) = n.strip_prefix(&pp) {
                names.push(p.to_owned());
                tensors.push(self.tensor(n).expect("validated on load").clone());
            }
        }
        let num = |k: &str| -> Result<usize> {
            sec.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("child section missing {k}")))
        };
        Ok(CalibratedChild {
            weights: ChildWeights::from_parts(config, names, kinds, tensors)?,
            config: sec.config.parse()?,
            bn: read_bn(self, &prefix),
            meta: CalibrationMeta {
                batches: num("batches")?,
                examples: num("examples")?,
                dataset: sec.meta.get("dataset").cloned().unwrap_or_default(),
            },
        })
    }
}

/// `ckpt-{step:08}.bin` inside `dir`.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:08}.bin"))
}

/// The checkpoint with the highest step in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).ok()?.flatten() {
        let name = entry.file_name();
        let Some(step) = name
            .to_str()
            .and_then(|s| s.strip_prefix("ckpt-"))
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    best.map(|(_, p)| p)
}
