//! Binary container for checkpoints, embedding archives and feature caches.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "RSKN" version meta_len meta_bytes record_count
//! { path_len path_bytes ndim dim... f32_values... } * record_count
//! ```
//!
//! `meta_bytes` is UTF-8 text of `key=value` lines. Every file carries a
//! `kind` key naming its role.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::{ModelConfig, Network};
use crate::error::{Error, Result};
use crate::param::Module;
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"RSKN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<Record>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(format!("{v} does not fit the container's u32 fields")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::format(format!("truncated container: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    r.take(n as u64).read_to_end(&mut v)?;
    if v.len() != n {
        return Err(Error::format("truncated container"));
    }
    Ok(v)
}

impl Container {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.meta.insert("kind".into(), kind.into());
        c
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").map(String::as_str)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::format(format!("expected a {kind} file, found {}", other.unwrap_or("untyped")))),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::format(format!("missing metadata key '{key}'")))
    }

    pub fn push(&mut self, path: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.records.push(Record { path: path.into(), shape, data });
    }

    pub fn record(&self, path: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.path == path)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION as usize)?;
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::format(format!("metadata entry '{k}' cannot be stored")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        put_u32(w, meta.len())?;
        w.write_all(meta.as_bytes())?;
        put_u32(w, self.records.len())?;
        for r in &self.records {
            put_u32(w, r.path.len())?;
            w.write_all(r.path.as_bytes())?;
            put_u32(w, r.shape.len())?;
            for &d in &r.shape {
                put_u32(w, d)?;
            }
            if r.shape.iter().product::<usize>() != r.data.len() {
                return Err(Error::format(format!("record '{}' data does not match its shape", r.path)));
            }
            let mut buf = Vec::with_capacity(r.data.len() * 4);
            for v in &r.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic = get_bytes(r, 4)?;
        if magic != MAGIC {
            return Err(Error::format("not an RSKN container (bad magic)"));
        }
        let version = get_u32(r)?;
        if version != VERSION as usize {
            return Err(Error::format(format!("unsupported container version {version}")));
        }
        let meta_len = get_u32(r)?;
        let text = String::from_utf8(get_bytes(r, meta_len)?).map_err(|_| Error::format("metadata is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::format(format!("bad metadata line '{line}'")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = get_u32(r)?;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = get_u32(r)?;
            let path = String::from_utf8(get_bytes(r, n)?).map_err(|_| Error::format("record path is not UTF-8"))?;
            let ndim = get_u32(r)?;
            let shape = (0..ndim).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = get_bytes(r, len * 4)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            records.push(Record { path, shape, data });
        }
        Ok(Self { meta, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

pub fn config_to_meta(c: &mut Container, cfg: &ModelConfig) {
    for (k, v) in cfg.to_pairs() {
        c.set_meta(&format!("model.{k}"), v);
    }
}

pub fn config_from_meta(c: &Container) -> Result<ModelConfig> {
    let pairs: Vec<(&str, &str)> =
        c.meta.iter().filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k, v.as_str()))).collect();
    if pairs.is_empty() {
        return Err(Error::format("container holds no model configuration"));
    }
    ModelConfig::from_pairs(pairs)
}

/// Every parameter of `net`, including batch-norm running statistics.
pub fn network_to_container<T: Real>(net: &Network<T>) -> Container {
    let mut c = Container::new("checkpoint");
    config_to_meta(&mut c, &net.config);
    net.visit("", &mut |path, p| {
        c.push(path, p.shape.clone(), p.value.iter().map(|v| v.as_f64() as f32).collect());
    });
    c
}

/// Overwrites every parameter of `net` from the container's records.
pub fn load_into<T: Real>(net: &mut Network<T>, c: &Container) -> Result<()> {
    let index: BTreeMap<&str, &Record> = c.records.iter().map(|r| (r.path.as_str(), r)).collect();
    let mut err = None;
    net.visit_mut("", &mut |path, p| {
        if err.is_some() {
            return;
        }
        match index.get(path) {
            Some(r) if r.shape == p.shape => {
                p.value.iter_mut().zip(&r.data).for_each(|(v, &x)| *v = T::of(x as f64));
            }
            Some(r) => {
                err = Some(Error::format(format!("record '{path}' has shape {:?}, model expects {:?}", r.shape, p.shape)))
            }
            None => err = Some(Error::format(format!("checkpoint lacks parameter '{path}'"))),
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn network_from_container<T: Real>(c: &Container) -> Result<Network<T>> {
    let cfg = config_from_meta(c)?;
    let mut net = Network::new(cfg, 0)?;
    load_into(&mut net, c)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let mut c = Container::new("features");
        c.set_meta("note", "a b=c");
        c.push("u1", vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-20, f32::MAX, 7.0]);
        c.push("u2", vec![0], vec![]);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Container::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);
        let bits: Vec<u32> = back.records[0].data.iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = c.records[0].data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::read_from(&mut &b"XXXX\x01\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        Container::new("x").write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(Container::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn kind_check() {
        let c = Container::new("embeddings");
        assert!(c.expect_kind("embeddings").is_ok());
        assert!(c.expect_kind("checkpoint").is_err());
    }
}
