//! `RACK` checkpoint container.
//!
//! Layout, all integers 32-bit little-endian:
//!
//! ```text
//! "RACK" | version=1 | config length | config JSON (UTF-8)
//! repeated: name length | name | rank | dims... | f32 values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::train::TrainConfig;

const MAGIC: &[u8; 4] = b"RACK";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(params: &ModelParams<f32>, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let doc = serde_json::to_string(cfg)
        .map_err(|e| Error::format("config", e.to_string()))?;
    let mut out = Vec::with_capacity(12 + doc.len() + 4 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, doc.len());
    out.extend_from_slice(doc.as_bytes());
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                field,
                format!("truncated at byte {} (needed {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams<f32>, TrainConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a RACK checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let len = r.u32("config")?;
    let doc = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|e| Error::format("config", e.to_string()))?;
    let cfg: TrainConfig =
        serde_json::from_str(doc).map_err(|e| Error::format("config", e.to_string()))?;

    let mut tensors = BTreeMap::new();
    while !r.done() {
        let n = r.u32("record name")?;
        let name = std::str::from_utf8(r.take(n, "record name")?)
            .map_err(|e| Error::format("record name", e.to_string()))?
            .to_string();
        let field = format!("record {name}");
        let rank = r.u32(&field)?;
        let dims = (0..rank).map(|_| r.u32(&field)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::format(&field, "overflow"))?, &field)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(Error::format(field, "duplicate record"));
        }
    }
    let params = ModelParams::from_map(tensors);
    params.check_layout(&cfg.net)?;
    Ok((params, cfg))
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params, cfg)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams<f32>, TrainConfig)> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
