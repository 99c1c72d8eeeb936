//! Checkpoint directory layout:
//!
//! - `manifest.txt`: `MOCE-CKPT v1` then `key = value` lines (`step`, `params`,
//!   `clustering`, `config.*`, `meta.*`)
//! - `params.bin`: magic `MOCEPRM1`, `u64` entry count, a name table of
//!   (`u32` name length, UTF-8 name, `u32` rank, `u64` dims), then every
//!   tensor's values as little-endian `f64` in table order
//! - `kmeans.txt`: bound clustering model, when present

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{MoceModel, ModelConfig, Parameters};
use crate::clustering::KMeansModel;
use crate::error::{MoceError, Result};
use crate::tensor::Tensor;

const MANIFEST_MAGIC: &str = "MOCE-CKPT v1";
const PARAMS_MAGIC: &[u8; 8] = b"MOCEPRM1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";
pub const CLUSTERING_FILE: &str = "kmeans.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MoceModel,
    pub step: u64,
    /// Free-form string metadata, stored as `meta.<key>` lines.
    pub meta: BTreeMap<String, String>,
}

pub fn encode_params<P: Parameters + ?Sized>(model: &P) -> Vec<u8> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, t| {
        entries.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()))
    });
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, shape, _) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
    }
    for (_, _, data) in &entries {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| {
                MoceError::format(PARAMS_FILE, format!("truncated at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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
}

/// Parses a parameter blob into `(name, tensor)` pairs in file order.
pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != PARAMS_MAGIC {
        return Err(MoceError::format(PARAMS_FILE, "bad magic"));
    }
    let count = r.u64()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| MoceError::format(PARAMS_FILE, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        table.push((name, shape));
    }
    let mut out = Vec::with_capacity(table.len());
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| MoceError::format(PARAMS_FILE, format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(MoceError::format(PARAMS_FILE, "trailing bytes"));
    }
    Ok(out)
}

/// Overwrites every parameter of `model` from `entries`; names and shapes must match exactly.
pub fn load_params_into<P: Parameters + ?Sized>(
    model: &mut P,
    entries: Vec<(String, Tensor)>,
) -> Result<()> {
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in entries {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(MoceError::format(
                PARAMS_FILE,
                format!("duplicate parameter {name}"),
            ));
        }
    }
    let mut err = None;
    model.visit_params_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match by_name.remove(name) {
            Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
            Some(src) => {
                err = Some(MoceError::format(
                    PARAMS_FILE,
                    format!(
                        "{name} has shape {:?}, model expects {:?}",
                        src.shape(),
                        t.shape()
                    ),
                ))
            }
            None => {
                err = Some(MoceError::format(
                    PARAMS_FILE,
                    format!("missing parameter {name}"),
                ))
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(MoceError::format(
            PARAMS_FILE,
            format!("unexpected parameter {extra}"),
        ));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: MoceModel, step: u64) -> Self {
        Self {
            model,
            step,
            meta: BTreeMap::new(),
        }
    }

    pub fn manifest(&self) -> String {
        let mut out = format!(
            "{MANIFEST_MAGIC}\nstep = {}\nparams = {PARAMS_FILE}\n",
            self.step
        );
        if self.model.clustering().is_some() {
            out.push_str(&format!("clustering = {CLUSTERING_FILE}\n"));
        }
        for (k, v) in self.model.config().to_pairs() {
            out.push_str(&format!("config.{k} = {v}\n"));
        }
        for (k, v) in &self.meta {
            out.push_str(&format!("meta.{k} = {v}\n"));
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| MoceError::io(dir, e))?;
        if let Some((k, _)) = self
            .meta
            .iter()
            .find(|(k, v)| k.contains(['=', '\n']) || v.contains('\n'))
        {
            return Err(MoceError::config(format!(
                "metadata key {k:?} cannot be stored in a manifest"
            )));
        }
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| MoceError::io(&p, e))
        };
        write(PARAMS_FILE, &encode_params(&self.model))?;
        if let Some(km) = self.model.clustering() {
            write(CLUSTERING_FILE, km.to_file_string().as_bytes())?;
        }
        write(MANIFEST_FILE, self.manifest().as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| MoceError::io(&path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(MANIFEST_MAGIC) {
            return Err(MoceError::format(
                MANIFEST_FILE,
                format!("expected header '{MANIFEST_MAGIC}'"),
            ));
        }
        let mut config = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut step = None;
        let mut params = None;
        let mut clustering = None;
        for (i, line) in lines.enumerate() {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                MoceError::format(
                    MANIFEST_FILE,
                    format!("line {}: expected 'key = value'", i + 2),
                )
            })?;
            let (k, v) = (k.trim(), v.trim().to_string());
            if let Some(key) = k.strip_prefix("config.") {
                config.insert(key.to_string(), v);
            } else if let Some(key) = k.strip_prefix("meta.") {
                meta.insert(key.to_string(), v);
            } else {
                match k {
                    "step" => {
                        step = Some(v.parse::<u64>().map_err(|_| {
                            MoceError::format(MANIFEST_FILE, format!("bad step {v:?}"))
                        })?)
                    }
                    "params" => params = Some(v),
                    "clustering" => clustering = Some(v),
                    other => {
                        return Err(MoceError::format(
                            MANIFEST_FILE,
                            format!("unknown key '{other}'"),
                        ))
                    }
                }
            }
        }
        let step = step.ok_or_else(|| MoceError::format(MANIFEST_FILE, "missing step"))?;
        let params = params.ok_or_else(|| MoceError::format(MANIFEST_FILE, "missing params"))?;
        let config = ModelConfig::from_pairs(&config)?;
        let mut model = MoceModel::skeleton(&config)?;
        let ppath = dir.join(&params);
        let bytes = fs::read(&ppath).map_err(|e| MoceError::io(&ppath, e))?;
        load_params_into(&mut model, decode_params(&bytes)?)?;
        if let Some(c) = clustering {
            model.bind_clustering(KMeansModel::load(dir.join(c))?)?;
        }
        Ok(Self { model, step, meta })
    }
}
